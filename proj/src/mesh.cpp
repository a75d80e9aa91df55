#include "stagekit/mesh.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "stagekit/error.hpp"
#include "stagekit/morphology.hpp"

namespace stagekit {

namespace {

Vec3 face_cross(const TriMesh& m, std::size_t f) {
  const auto& t = m.faces[f];
  const Vec3& a = m.vertices[static_cast<std::size_t>(t[0])];
  const Vec3& b = m.vertices[static_cast<std::size_t>(t[1])];
  const Vec3& c = m.vertices[static_cast<std::size_t>(t[2])];
  return (b - a).cross(c - a);
}

int find_root(std::vector<int>& parent, int i) {
  while (parent[static_cast<std::size_t>(i)] != i) {
    parent[static_cast<std::size_t>(i)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(i)])];
    i = parent[static_cast<std::size_t>(i)];
  }
  return i;
}

// Keeps only faces with the given component id and drops unreferenced vertices.
TriMesh keep_component(const TriMesh& m, const std::vector<int>& comp, int keep) {
  TriMesh out;
  std::vector<int> remap(m.vertices.size(), -1);
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    if (comp[f] != keep) continue;
    std::array<int, 3> t{};
    for (int k = 0; k < 3; ++k) {
      const auto v = static_cast<std::size_t>(m.faces[f][static_cast<std::size_t>(k)]);
      if (remap[v] < 0) {
        remap[v] = static_cast<int>(out.vertices.size());
        out.vertices.push_back(m.vertices[v]);
      }
      t[static_cast<std::size_t>(k)] = remap[v];
    }
    out.faces.push_back(t);
  }
  return out;
}

}  // namespace

double surface_area(const TriMesh& m) {
  double a = 0;
  for (std::size_t f = 0; f < m.faces.size(); ++f) a += 0.5 * face_cross(m, f).norm();
  return a;
}

double signed_volume(const TriMesh& m) {
  double v = 0;
  for (const auto& t : m.faces) {
    const Vec3& a = m.vertices[static_cast<std::size_t>(t[0])];
    const Vec3& b = m.vertices[static_cast<std::size_t>(t[1])];
    const Vec3& c = m.vertices[static_cast<std::size_t>(t[2])];
    v += a.dot(b.cross(c));
  }
  return v / 6.0;
}

double min_face_area(const TriMesh& m) {
  double a = std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < m.faces.size(); ++f) a = std::min(a, 0.5 * face_cross(m, f).norm());
  return a;
}

Vec3 face_normal(const TriMesh& m, std::size_t f) { return face_cross(m, f).normalized(); }

std::vector<Vec3> vertex_normals(const TriMesh& m) {
  std::vector<Vec3> n(m.vertices.size(), Vec3::Zero());
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    const Vec3 c = face_cross(m, f);
    for (int v : m.faces[f]) n[static_cast<std::size_t>(v)] += c;
  }
  for (auto& v : n)
    if (v.norm() > 0) v.normalize();
  return n;
}

bool is_watertight(const TriMesh& m) {
  std::map<std::pair<int, int>, int> directed;
  for (const auto& t : m.faces)
    for (int k = 0; k < 3; ++k) {
      const int a = t[static_cast<std::size_t>(k)], b = t[static_cast<std::size_t>((k + 1) % 3)];
      if (a == b) return false;
      if (++directed[{a, b}] > 1) return false;
    }
  for (const auto& [e, n] : directed)
    if (!directed.count({e.second, e.first})) return false;
  return !m.faces.empty();
}

std::size_t count_flipped_faces(const TriMesh& before, const TriMesh& after) {
  if (before.faces != after.faces) throw GeometryError("count_flipped_faces: meshes differ in connectivity");
  std::size_t n = 0;
  for (std::size_t f = 0; f < before.faces.size(); ++f)
    if (face_cross(before, f).dot(face_cross(after, f)) <= 0) ++n;
  return n;
}

TriMesh translated(const TriMesh& m, const Vec3& offset) {
  TriMesh out = m;
  for (auto& v : out.vertices) v += offset;
  return out;
}

int mesh_components(const TriMesh& m, std::vector<int>* face_component) {
  std::vector<int> parent(m.vertices.size());
  std::iota(parent.begin(), parent.end(), 0);
  for (const auto& t : m.faces) {
    const int a = find_root(parent, t[0]);
    for (int k = 1; k < 3; ++k) {
      const int b = find_root(parent, t[static_cast<std::size_t>(k)]);
      if (a != b) parent[static_cast<std::size_t>(b)] = a;
    }
  }
  std::unordered_map<int, int> ids;
  if (face_component) face_component->assign(m.faces.size(), 0);
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    const int r = find_root(parent, m.faces[f][0]);
    const auto it = ids.emplace(r, static_cast<int>(ids.size())).first;
    if (face_component) (*face_component)[f] = it->second;
  }
  return static_cast<int>(ids.size());
}

TriMesh label_to_mesh(const Mask& mask, const MeshingOptions& opt) {
  const std::size_t n = count_nonzero(mask);
  if (n == 0) throw GeometryError("label_to_mesh: mask is empty (0 components)");
  const Components cc = connected_components(mask, Connectivity::Face6);
  if (cc.count != 1)
    throw GeometryError("label_to_mesh: mask has " + std::to_string(cc.count) + " components, expected 1");
  if (n < opt.min_voxels)
    throw GeometryError("label_to_mesh: mask has " + std::to_string(n) + " voxels, below the floor of " +
                        std::to_string(opt.min_voxels));

  const auto pad = static_cast<std::int64_t>(2 + std::ceil(3 * opt.smoothing_sigma_voxels));
  const Shape3 s = mask.shape;
  const Shape3 ps{s.z + 2 * pad, s.y + 2 * pad, s.x + 2 * pad};
  Mask padded(ps, mask.spacing_mm);
  for (std::int64_t z = 0; z < s.z; ++z)
    for (std::int64_t y = 0; y < s.y; ++y)
      for (std::int64_t x = 0; x < s.x; ++x) padded.at(z + pad, y + pad, x + pad) = mask.at(z, y, x) ? 1 : 0;
  std::vector<double> field;
  if (opt.smoothing_sigma_voxels > 0) {
    field = gaussian_blur(padded, opt.smoothing_sigma_voxels);
  } else {
    field.assign(padded.data.begin(), padded.data.end());
  }
  std::vector<std::uint8_t> inside(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) inside[i] = field[i] > opt.iso;

  const Spacing3 sp = mask.spacing_mm;
  auto position = [&](std::size_t idx) {
    const auto x = static_cast<std::int64_t>(idx % static_cast<std::size_t>(ps.x));
    const auto y = static_cast<std::int64_t>((idx / static_cast<std::size_t>(ps.x)) % static_cast<std::size_t>(ps.y));
    const auto z = static_cast<std::int64_t>(idx / static_cast<std::size_t>(ps.x * ps.y));
    return Vec3(static_cast<double>(z - pad) * sp.z, static_cast<double>(y - pad) * sp.y,
                static_cast<double>(x - pad) * sp.x);
  };

  TriMesh mesh;
  std::unordered_map<std::uint64_t, int> edge_vertex;
  const auto total = static_cast<std::uint64_t>(field.size());
  // Interpolation parameter is kept off the edge ends so no face collapses.
  auto vertex_on = [&](std::size_t a, std::size_t b) {
    const std::size_t lo = std::min(a, b), hi = std::max(a, b);
    const std::uint64_t key = static_cast<std::uint64_t>(lo) * total + hi;
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    double t = (opt.iso - field[lo]) / (field[hi] - field[lo]);
    t = std::clamp(t, 0.02, 0.98);
    const Vec3 p = position(lo) + t * (position(hi) - position(lo));
    const int id = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(p);
    edge_vertex.emplace(key, id);
    return id;
  };
  auto emit = [&](int a, int b, int c, const Vec3& in_pt, const Vec3& out_pt) {
    const Vec3 nrm = (mesh.vertices[static_cast<std::size_t>(b)] - mesh.vertices[static_cast<std::size_t>(a)])
                         .cross(mesh.vertices[static_cast<std::size_t>(c)] - mesh.vertices[static_cast<std::size_t>(a)]);
    if (nrm.dot(out_pt - in_pt) < 0) std::swap(b, c);
    mesh.faces.push_back({a, b, c});
  };

  static constexpr int kPerms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  const std::int64_t stride[3] = {ps.y * ps.x, ps.x, 1};
  for (std::int64_t z = 0; z + 1 < ps.z; ++z)
    for (std::int64_t y = 0; y + 1 < ps.y; ++y)
      for (std::int64_t x = 0; x + 1 < ps.x; ++x) {
        const std::size_t base = ps.index(z, y, x);
        int count = 0;
        for (int c = 0; c < 8; ++c) {
          const std::size_t idx = base + static_cast<std::size_t>(((c >> 2) & 1) * stride[0] +
                                                                  ((c >> 1) & 1) * stride[1] + (c & 1) * stride[2]);
          count += inside[idx];
        }
        if (count == 0 || count == 8) continue;
        for (const auto& perm : kPerms) {
          std::size_t tet[4];
          tet[0] = base;
          tet[1] = tet[0] + static_cast<std::size_t>(stride[perm[0]]);
          tet[2] = tet[1] + static_cast<std::size_t>(stride[perm[1]]);
          tet[3] = tet[2] + static_cast<std::size_t>(stride[perm[2]]);
          std::vector<std::size_t> in, out;
          for (auto v : tet) (inside[v] ? in : out).push_back(v);
          if (in.empty() || out.empty()) continue;
          const Vec3 pin = position(in[0]), pout = position(out[0]);
          if (in.size() == 1 || out.size() == 1) {
            const bool lone_in = in.size() == 1;
            const std::size_t lone = lone_in ? in[0] : out[0];
            const auto& rest = lone_in ? out : in;
            emit(vertex_on(lone, rest[0]), vertex_on(lone, rest[1]), vertex_on(lone, rest[2]), pin, pout);
          } else {
            const int ac = vertex_on(in[0], out[0]), ad = vertex_on(in[0], out[1]);
            const int bd = vertex_on(in[1], out[1]), bc = vertex_on(in[1], out[0]);
            emit(ac, ad, bd, pin, pout);
            emit(ac, bd, bc, pin, pout);
          }
        }
      }
  if (mesh.faces.empty()) throw GeometryError("label_to_mesh: smoothed mask has no surface at the iso level");

  std::vector<int> comp;
  const int ncomp = mesh_components(mesh, &comp);
  if (ncomp > 1) {
    std::vector<std::size_t> sizes(static_cast<std::size_t>(ncomp), 0);
    for (int c : comp) ++sizes[static_cast<std::size_t>(c)];
    const auto keep = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    mesh = keep_component(mesh, comp, keep);
  }
  return mesh;
}

namespace {

Mask rasterize(const TriMesh& mesh, Shape3 shape, Spacing3 sp) {
  Mask out(shape, sp);
  if (mesh.faces.empty()) return out;
  // Rays run along x through voxel centres shifted by a tiny fraction of a voxel,
  // which keeps them off mesh vertices that sit on grid lines.
  const double jz = 2.71828e-5 * sp.z, jy = 3.14159e-5 * sp.y;
  std::vector<std::vector<double>> hits(static_cast<std::size_t>(shape.z * shape.y));

  auto orient = [&](int i, int j, double qz, double qy) {
    // Evaluated with the endpoints in index order so shared edges agree exactly.
    const bool swap = i > j;
    const Vec3& a = mesh.vertices[static_cast<std::size_t>(swap ? j : i)];
    const Vec3& b = mesh.vertices[static_cast<std::size_t>(swap ? i : j)];
    const double o = (b[0] - a[0]) * (qy - a[1]) - (b[1] - a[1]) * (qz - a[0]);
    return swap ? -o : o;
  };

  for (const auto& t : mesh.faces) {
    const Vec3& a = mesh.vertices[static_cast<std::size_t>(t[0])];
    const Vec3& b = mesh.vertices[static_cast<std::size_t>(t[1])];
    const Vec3& c = mesh.vertices[static_cast<std::size_t>(t[2])];
    const double zmin = std::min({a[0], b[0], c[0]}), zmax = std::max({a[0], b[0], c[0]});
    const double ymin = std::min({a[1], b[1], c[1]}), ymax = std::max({a[1], b[1], c[1]});
    const auto z0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil((zmin - jz) / sp.z)));
    const auto z1 = std::min<std::int64_t>(shape.z - 1, static_cast<std::int64_t>(std::floor((zmax - jz) / sp.z)));
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil((ymin - jy) / sp.y)));
    const auto y1 = std::min<std::int64_t>(shape.y - 1, static_cast<std::int64_t>(std::floor((ymax - jy) / sp.y)));
    for (std::int64_t zi = z0; zi <= z1; ++zi)
      for (std::int64_t yi = y0; yi <= y1; ++yi) {
        const double qz = static_cast<double>(zi) * sp.z + jz, qy = static_cast<double>(yi) * sp.y + jy;
        const double w0 = orient(t[1], t[2], qz, qy);
        const double w1 = orient(t[2], t[0], qz, qy);
        const double w2 = orient(t[0], t[1], qz, qy);
        const bool pos = w0 > 0 && w1 > 0 && w2 > 0, neg = w0 < 0 && w1 < 0 && w2 < 0;
        if (!pos && !neg) continue;
        const double sum = w0 + w1 + w2;
        const double hx = (w0 * a[2] + w1 * b[2] + w2 * c[2]) / sum;
        hits[static_cast<std::size_t>(zi * shape.y + yi)].push_back(hx);
      }
  }
  for (std::int64_t zi = 0; zi < shape.z; ++zi)
    for (std::int64_t yi = 0; yi < shape.y; ++yi) {
      auto& h = hits[static_cast<std::size_t>(zi * shape.y + yi)];
      if (h.size() < 2) continue;
      std::sort(h.begin(), h.end());
      for (std::size_t k = 0; k + 1 < h.size(); k += 2) {
        const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(h[k] / sp.x)) + 1);
        const auto x1 = std::min<std::int64_t>(shape.x - 1, static_cast<std::int64_t>(std::ceil(h[k + 1] / sp.x)) - 1);
        for (std::int64_t xi = x0; xi <= x1; ++xi) {
          const double xc = static_cast<double>(xi) * sp.x;
          if (xc > h[k] && xc < h[k + 1]) out.at(zi, yi, xi) = 1;
        }
      }
    }
  return out;
}

}  // namespace

Mask voxelize(const TriMesh& mesh, Shape3 shape, Spacing3 spacing) {
  if (!spacing.valid()) throw ValidationError("voxelize: spacing must be positive");
  if (mesh.vertices.empty()) throw GeometryError("voxelize: mesh has no vertices");
  Vec3 lo = mesh.vertices[0], hi = mesh.vertices[0];
  for (const auto& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  for (int a = 0; a < 3; ++a) {
    const double gmin = -0.5 * spacing[a], gmax = (static_cast<double>(shape[a]) - 0.5) * spacing[a];
    if (lo[a] < gmin || hi[a] > gmax) {
      std::ostringstream os;
      os << "voxelize: mesh bounding box [" << lo.transpose() << "] - [" << hi.transpose()
         << "] mm leaves the grid [" << -0.5 * spacing.z << " " << -0.5 * spacing.y << " " << -0.5 * spacing.x
         << "] - [" << (static_cast<double>(shape.z) - 0.5) * spacing.z << " "
         << (static_cast<double>(shape.y) - 0.5) * spacing.y << " " << (static_cast<double>(shape.x) - 0.5) * spacing.x
         << "]";
      throw GeometryError(os.str());
    }
  }
  return rasterize(mesh, shape, spacing);
}

Mask voxelize_clipped(const TriMesh& mesh, Shape3 shape, Spacing3 spacing) {
  if (!spacing.valid()) throw ValidationError("voxelize: spacing must be positive");
  return rasterize(mesh, shape, spacing);
}

}  // namespace stagekit
