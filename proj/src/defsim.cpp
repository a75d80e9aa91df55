#include "stagekit/defsim.hpp"

#include <Eigen/Geometry>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <queue>

#include "stagekit/error.hpp"
#include "stagekit/morphology.hpp"
#include "stagekit/staging.hpp"

namespace stagekit {

namespace {

double uniform(std::mt19937_64& rng, Range r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); }

double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).norm();
}

std::vector<std::vector<std::pair<int, double>>> edge_graph(const TriMesh& m) {
  std::vector<std::vector<std::pair<int, double>>> adj(m.vertices.size());
  for (const auto& t : m.faces)
    for (int k = 0; k < 3; ++k) {
      const int a = t[static_cast<std::size_t>(k)], b = t[static_cast<std::size_t>((k + 1) % 3)];
      const double w = (m.vertices[static_cast<std::size_t>(a)] - m.vertices[static_cast<std::size_t>(b)]).norm();
      // Each edge appears once per incident face; duplicates are harmless for Dijkstra.
      adj[static_cast<std::size_t>(a)].push_back({b, w});
      adj[static_cast<std::size_t>(b)].push_back({a, w});
    }
  return adj;
}

std::vector<double> geodesic_from(const TriMesh& m, int src) {
  const auto adj = edge_graph(m);
  std::vector<double> dist(m.vertices.size(), std::numeric_limits<double>::infinity());
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[static_cast<std::size_t>(src)] = 0;
  pq.push({0, src});
  while (!pq.empty()) {
    const auto [d, u] = pq.top();
    pq.pop();
    if (d > dist[static_cast<std::size_t>(u)]) continue;
    for (const auto& [v, w] : adj[static_cast<std::size_t>(u)])
      if (d + w < dist[static_cast<std::size_t>(v)]) {
        dist[static_cast<std::size_t>(v)] = d + w;
        pq.push({d + w, v});
      }
  }
  return dist;
}

double mesh_diameter(const TriMesh& m) {
  double best = 0;
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    for (std::size_t j = i + 1; j < m.vertices.size(); ++j)
      best = std::max(best, (m.vertices[i] - m.vertices[j]).squaredNorm());
  return std::sqrt(best);
}

using SpMat = Eigen::SparseMatrix<double>;

SpMat laplacian(const TriMesh& m, bool uniform_weights) {
  const auto n = static_cast<Eigen::Index>(m.vertices.size());
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(m.faces.size() * 12);
  auto add_edge = [&](int i, int j, double w) {
    trip.emplace_back(i, j, w);
    trip.emplace_back(j, i, w);
    trip.emplace_back(i, i, -w);
    trip.emplace_back(j, j, -w);
  };
  for (const auto& t : m.faces)
    for (int k = 0; k < 3; ++k) {
      const int i = t[static_cast<std::size_t>((k + 1) % 3)], j = t[static_cast<std::size_t>((k + 2) % 3)];
      if (uniform_weights) {
        add_edge(i, j, 0.5);  // each interior edge is seen from two faces
        continue;
      }
      const Vec3& o = m.vertices[static_cast<std::size_t>(t[static_cast<std::size_t>(k)])];
      const Vec3 u = m.vertices[static_cast<std::size_t>(i)] - o, v = m.vertices[static_cast<std::size_t>(j)] - o;
      const double cot = u.dot(v) / u.cross(v).norm();
      add_edge(i, j, 0.5 * cot);
    }
  SpMat L(n, n);
  L.setFromTriplets(trip.begin(), trip.end());
  return L;
}

bool cotangents_usable(const TriMesh& m) {
  for (const auto& t : m.faces)
    for (int k = 0; k < 3; ++k) {
      const Vec3& o = m.vertices[static_cast<std::size_t>(t[static_cast<std::size_t>(k)])];
      const Vec3 u = m.vertices[static_cast<std::size_t>(t[static_cast<std::size_t>((k + 1) % 3)])] - o;
      const Vec3 v = m.vertices[static_cast<std::size_t>(t[static_cast<std::size_t>((k + 2) % 3)])] - o;
      const double s = u.cross(v).norm();
      if (!(s > 1e-12 * u.norm() * v.norm())) return false;
    }
  return true;
}

std::optional<Eigen::MatrixXd> solve_free(const TriMesh& m, const std::vector<char>& constrained,
                                          const Eigen::MatrixXd& d_constrained, bool uniform_weights) {
  const auto n = m.vertices.size();
  const SpMat L = laplacian(m, uniform_weights);
  Eigen::VectorXd inv_mass = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    const auto& t = m.faces[f];
    const double a = 0.5 * (m.vertices[static_cast<std::size_t>(t[1])] - m.vertices[static_cast<std::size_t>(t[0])])
                               .cross(m.vertices[static_cast<std::size_t>(t[2])] - m.vertices[static_cast<std::size_t>(t[0])])
                               .norm();
    for (int v : t) inv_mass[v] += a / 3.0;
  }
  for (Eigen::Index i = 0; i < inv_mass.size(); ++i) {
    if (!(inv_mass[i] > 0)) return std::nullopt;
    inv_mass[i] = 1.0 / inv_mass[i];
  }
  const SpMat K = L * inv_mass.asDiagonal() * L;

  std::vector<Eigen::Index> free_id(n, -1), con_id(n, -1);
  Eigen::Index nf = 0, nc = 0;
  for (std::size_t i = 0; i < n; ++i) (constrained[i] ? con_id[i] = nc++ : free_id[i] = nf++);
  std::vector<Eigen::Triplet<double>> ff, fc;
  for (Eigen::Index col = 0; col < K.outerSize(); ++col)
    for (SpMat::InnerIterator it(K, col); it; ++it) {
      const auto r = static_cast<std::size_t>(it.row()), c = static_cast<std::size_t>(it.col());
      if (free_id[r] < 0) continue;
      if (free_id[c] >= 0) ff.emplace_back(free_id[r], free_id[c], it.value());
      else fc.emplace_back(free_id[r], con_id[c], it.value());
    }
  SpMat Kff(nf, nf), Kfc(nf, nc);
  Kff.setFromTriplets(ff.begin(), ff.end());
  Kfc.setFromTriplets(fc.begin(), fc.end());
  Eigen::SimplicialLDLT<SpMat> solver(Kff);
  if (solver.info() != Eigen::Success) return std::nullopt;
  const Eigen::MatrixXd rhs = -(Kfc * d_constrained);
  Eigen::MatrixXd d = solver.solve(rhs);
  if (solver.info() != Eigen::Success || !d.allFinite()) return std::nullopt;
  // One refinement step against the assembled system.
  const Eigen::MatrixXd r = rhs - Kff * d;
  d += solver.solve(r);
  if (!d.allFinite()) return std::nullopt;
  return d;
}

Mask rasterize_structure(const EmbeddedStructure& s, const Mask& base, const Vec3& origin) {
  Mask out = base;
  const Spacing3 sp = base.spacing_mm;
  for (std::int64_t z = 0; z < out.shape.z; ++z)
    for (std::int64_t y = 0; y < out.shape.y; ++y)
      for (std::int64_t x = 0; x < out.shape.x; ++x) {
        const Vec3 p = origin + Vec3(static_cast<double>(z) * sp.z, static_cast<double>(y) * sp.y,
                                     static_cast<double>(x) * sp.x);
        if (s.contains(p)) out.at(z, y, x) = 1;
      }
  return out;
}

// Component of `grown` containing the first voxel of `seed`.
Mask component_containing(const Mask& grown, const Mask& seed) {
  const Components cc = connected_components(grown, Connectivity::Face6);
  int keep = 0;
  for (std::size_t i = 0; i < seed.data.size() && keep == 0; ++i)
    if (seed.data[i]) keep = cc.label[i];
  Mask out(grown.shape, grown.spacing_mm);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = cc.label[i] == keep && keep != 0;
  return out;
}

}  // namespace

double sample_signed_distance(const std::vector<double>& sdf, const Mask& grid, const Vec3& p) {
  const Shape3 s = grid.shape;
  double u[3];
  std::int64_t i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    u[a] = std::clamp(p[a] / grid.spacing_mm[a], 0.0, static_cast<double>(s[a] - 1));
    i0[a] = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(u[a])), std::max<std::int64_t>(s[a] - 2, 0));
    f[a] = s[a] > 1 ? u[a] - static_cast<double>(i0[a]) : 0.0;
  }
  double v = 0;
  for (int c = 0; c < 8; ++c) {
    const std::int64_t dz = (c >> 2) & 1, dy = (c >> 1) & 1, dx = c & 1;
    const double w = (dz ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dx ? f[2] : 1 - f[2]);
    if (w == 0) continue;
    v += w * sdf[s.index(std::min(i0[0] + dz, s.z - 1), std::min(i0[1] + dy, s.y - 1), std::min(i0[2] + dx, s.x - 1))];
  }
  return v;
}

DeformationPlan compute_deformation_plan(const TriMesh& cancer, const Mask& rectum, std::mt19937_64& rng,
                                         const DefSimConfig& cfg) {
  if (cancer.vertices.empty()) throw GeometryError("compute_deformation_plan: cancer mesh is empty");
  const std::size_t nr = count_nonzero(rectum);
  if (nr == 0) throw GeometryError("compute_deformation_plan: rectum mask is empty");
  if (nr == rectum.data.size()) throw GeometryError("compute_deformation_plan: rectum mask fills the whole grid");

  const std::vector<double> sdf = signed_distance(rectum);
  DeformationPlan plan;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cancer.vertices.size(); ++i) {
    const double d = sample_signed_distance(sdf, rectum, cancer.vertices[i]);
    if (d > best) {
      best = d;
      plan.handle_vertex = static_cast<int>(i);
    }
  }
  const Vec3 h = cancer.vertices[static_cast<std::size_t>(plan.handle_vertex)];
  const double step = 0.5 * std::min({rectum.spacing_mm.z, rectum.spacing_mm.y, rectum.spacing_mm.x});
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    Vec3 e = Vec3::Zero();
    e[a] = step;
    g[a] = sample_signed_distance(sdf, rectum, h + e) - sample_signed_distance(sdf, rectum, h - e);
  }
  if (g.norm() < 1e-12) {
    Vec3 centroid = Vec3::Zero();
    const Shape3 s = rectum.shape;
    for (std::int64_t z = 0; z < s.z; ++z)
      for (std::int64_t y = 0; y < s.y; ++y)
        for (std::int64_t x = 0; x < s.x; ++x)
          if (rectum.at(z, y, x))
            centroid += Vec3(static_cast<double>(z) * rectum.spacing_mm.z, static_cast<double>(y) * rectum.spacing_mm.y,
                             static_cast<double>(x) * rectum.spacing_mm.x);
    g = h - centroid / static_cast<double>(nr);
    if (g.norm() < 1e-12) throw GeometryError("compute_deformation_plan: no outward direction at the handle");
  }
  plan.direction = g.normalized();

  plan.transition_radius_mm = cfg.transition_radius_mm.value_or(cfg.transition_fraction * mesh_diameter(cancer));
  const auto geo = geodesic_from(cancer, plan.handle_vertex);
  for (std::size_t i = 0; i < geo.size(); ++i)
    if (geo[i] > plan.transition_radius_mm) plan.fixed_vertices.push_back(static_cast<int>(i));
  plan.displacement_mm = uniform(rng, cfg.displacement_mm);
  return plan;
}

TriMesh apply_constrained_deformation(const TriMesh& mesh, const DeformationPlan& plan, const DefSimConfig& cfg) {
  const std::size_t n = mesh.vertices.size();
  if (plan.handle_vertex < 0 || static_cast<std::size_t>(plan.handle_vertex) >= n)
    throw GeometryError("apply_constrained_deformation: handle vertex out of range");
  if (std::abs(plan.direction.norm() - 1.0) > 1e-9)
    throw GeometryError("apply_constrained_deformation: direction is not unit length");
  std::vector<char> constrained(n, 0);
  for (int v : plan.fixed_vertices) {
    if (v < 0 || static_cast<std::size_t>(v) >= n) throw GeometryError("apply_constrained_deformation: fixed vertex out of range");
    if (v == plan.handle_vertex) throw GeometryError("apply_constrained_deformation: handle vertex is also fixed");
    constrained[static_cast<std::size_t>(v)] = 1;
  }
  constrained[static_cast<std::size_t>(plan.handle_vertex)] = 1;
  const auto nc = static_cast<Eigen::Index>(std::count(constrained.begin(), constrained.end(), 1));
  if (static_cast<std::size_t>(nc) == n)
    throw GeometryError("apply_constrained_deformation: every vertex is constrained, nothing to solve");

  const Vec3 target = mesh.vertices[static_cast<std::size_t>(plan.handle_vertex)] + plan.displacement_mm * plan.direction;
  TriMesh out = mesh;
  if (plan.displacement_mm == 0) return out;

  Eigen::MatrixXd dc = Eigen::MatrixXd::Zero(nc, 3);
  {
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!constrained[i]) continue;
      if (static_cast<int>(i) == plan.handle_vertex) dc.row(k) = (plan.displacement_mm * plan.direction).transpose();
      ++k;
    }
  }
  const bool uniform_first = cfg.uniform_weights || !cotangents_usable(mesh);
  auto d = solve_free(mesh, constrained, dc, uniform_first);
  if (!d && !uniform_first) d = solve_free(mesh, constrained, dc, true);
  if (!d) throw GeometryError("apply_constrained_deformation: singular bi-Laplacian system");

  Eigen::Index k = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (!constrained[i]) out.vertices[i] += d->row(k++).transpose();
  out.vertices[static_cast<std::size_t>(plan.handle_vertex)] = target;
  return out;
}

bool EmbeddedStructure::contains(const Vec3& p) const {
  if (kind == EmbedKind::Capsule) return segment_distance(p, root, tip) <= radius_mm;
  return (p - tip).norm() <= radius_mm || segment_distance(p, root, tip) <= connector_radius_mm;
}

EmbedResult embed_invasion_structure(const TriMesh& mesh, std::mt19937_64& rng, const DefSimConfig& cfg) {
  if (!is_watertight(mesh)) throw GeometryError("embed_invasion_structure: input mesh is not watertight");
  const auto normals = vertex_normals(mesh);
  const double h = cfg.embed_voxel_mm;
  const Spacing3 sp{h, h, h};
  std::string last_failure = "no attempt made";
  for (int attempt = 1; attempt <= cfg.max_embed_attempts; ++attempt) {
    EmbeddedStructure s;
    s.attempts = attempt;
    s.root_vertex = std::uniform_int_distribution<int>(0, static_cast<int>(mesh.vertices.size()) - 1)(rng);
    s.root = mesh.vertices[static_cast<std::size_t>(s.root_vertex)];
    s.axis = normals[static_cast<std::size_t>(s.root_vertex)];
    if (s.axis.norm() < 0.5) {
      last_failure = "root vertex has no normal";
      continue;
    }
    const bool capsule = std::bernoulli_distribution(cfg.tube_prob)(rng);
    if (capsule) {
      s.kind = EmbedKind::Capsule;
      s.radius_mm = uniform(rng, cfg.tube_radius_mm);
      s.length_mm = uniform(rng, cfg.tube_length_mm);
    } else {
      s.kind = EmbedKind::Sphere;
      s.radius_mm = uniform(rng, cfg.sphere_radius_mm);
      s.length_mm = uniform(rng, cfg.sphere_offset_mm);
      s.connector_radius_mm = cfg.connector_radius_mm;
    }
    s.tip = s.root + s.length_mm * s.axis;

    Vec3 lo = mesh.vertices[0], hi = mesh.vertices[0];
    for (const auto& v : mesh.vertices) {
      lo = lo.cwiseMin(v);
      hi = hi.cwiseMax(v);
    }
    const double reach = s.radius_mm + std::max(s.connector_radius_mm, 0.0);
    lo = lo.cwiseMin(s.tip - Vec3::Constant(reach)).cwiseMin(s.root - Vec3::Constant(reach));
    hi = hi.cwiseMax(s.tip + Vec3::Constant(reach)).cwiseMax(s.root + Vec3::Constant(reach));
    const double margin = 3 * h;
    Vec3 origin;
    Shape3 shape;
    for (int a = 0; a < 3; ++a) origin[a] = std::floor((lo[a] - margin) / h) * h;
    shape.z = static_cast<std::int64_t>(std::ceil((hi[0] + margin - origin[0]) / h)) + 1;
    shape.y = static_cast<std::int64_t>(std::ceil((hi[1] + margin - origin[1]) / h)) + 1;
    shape.x = static_cast<std::int64_t>(std::ceil((hi[2] + margin - origin[2]) / h)) + 1;

    const Mask body = voxelize(translated(mesh, -origin), shape, sp);
    const Mask joined = rasterize_structure(s, body, origin);
    const Components cc = connected_components(joined, Connectivity::Face6);
    if (cc.count != 1) {
      last_failure = "union has " + std::to_string(cc.count) + " components";
      continue;
    }
    try {
      TriMesh out = translated(label_to_mesh(joined, cfg.meshing), origin);
      if (!is_watertight(out)) {
        last_failure = "re-extracted surface is not watertight";
        continue;
      }
      return {std::move(out), s};
    } catch (const GeometryError& e) {
      last_failure = e.what();
    }
  }
  throw GeometryError("embed_invasion_structure: no connected union after " + std::to_string(cfg.max_embed_attempts) +
                      " attempts (" + last_failure + ")");
}

nlohmann::json ProgressionResult::provenance() const {
  auto vec = [](const Vec3& v) { return nlohmann::json::array({v[0], v[1], v[2]}); };
  nlohmann::json j;
  j["redraws"] = redraws;
  j["steps"] = nlohmann::json::array();
  for (const auto& s : steps) {
    nlohmann::json e;
    e["handle_vertex"] = s.plan.handle_vertex;
    e["direction"] = vec(s.plan.direction);
    e["displacement_mm"] = s.plan.displacement_mm;
    e["transition_radius_mm"] = s.plan.transition_radius_mm;
    e["fixed_vertices"] = s.plan.fixed_vertices.size();
    if (s.embedded) {
      const auto& st = *s.embedded;
      e["embedded"] = {{"kind", st.kind == EmbedKind::Capsule ? "capsule" : "sphere"},
                       {"root", vec(st.root)},
                       {"tip", vec(st.tip)},
                       {"radius_mm", st.radius_mm},
                       {"length_mm", st.length_mm},
                       {"attempts", st.attempts}};
    } else {
      e["embedded"] = nullptr;
    }
    j["steps"].push_back(e);
  }
  return j;
}

ProgressionResult simulate_progression(const Case& c, int steps, std::mt19937_64& rng, const DefSimConfig& cfg) {
  if (!c.labels) throw ValidationError("simulate_progression: case " + c.id + " has no labels");
  if (steps < 0) throw ValidationError("simulate_progression: steps must be >= 0");
  const LabelVolume& labels = *c.labels;
  const Mask cancer0 = extract_bit(labels, LabelBit::Cancer);
  if (count_nonzero(cancer0) == 0) throw ValidationError("simulate_progression: case " + c.id + " has an empty cancer label");
  const Mask rectum = extract_bit(labels, LabelBit::Rectum);

  ProgressionResult res;
  res.output.id = c.id;
  res.output.role = CaseRole::Generated;
  res.output.image = ImageVolume(labels.shape, labels.spacing_mm, 0.0f);
  if (steps == 0) {
    res.output.labels = labels;
    res.output.stage = classify_stage(labels);
    return res;
  }

  const Shape3 shape = labels.shape;
  const Spacing3 sp = labels.spacing_mm;
  std::string last_failure;
  for (int attempt = 0; attempt <= cfg.max_redraws; ++attempt) {
    res.redraws = attempt;
    res.steps.clear();
    Mask cancer = cancer0;
    try {
      for (int k = 0; k < steps; ++k) {
        ProgressionStep rec;
        TriMesh mesh = label_to_mesh(cancer, cfg.meshing);
        rec.plan = compute_deformation_plan(mesh, rectum, rng, cfg);
        // Shorten the pull so the handle stays a voxel inside the grid.
        const Vec3 hp = mesh.vertices[static_cast<std::size_t>(rec.plan.handle_vertex)];
        for (int a = 0; a < 3; ++a) {
          const double dir = rec.plan.direction[a];
          if (std::abs(dir) < 1e-12) continue;
          const double bound = dir > 0 ? (static_cast<double>(shape[a]) - 2) * sp[a] : sp[a];
          const double room = (bound - hp[a]) / dir;
          rec.plan.displacement_mm = std::max(0.0, std::min(rec.plan.displacement_mm, room));
        }
        mesh = apply_constrained_deformation(mesh, rec.plan, cfg);
        if (std::bernoulli_distribution(cfg.embed_prob)(rng)) {
          EmbedResult e = embed_invasion_structure(mesh, rng, cfg);
          mesh = std::move(e.mesh);
          rec.embedded = e.structure;
        }
        Mask grown = voxelize_clipped(mesh, shape, sp);
        for (std::size_t i = 0; i < grown.data.size(); ++i) grown.data[i] = grown.data[i] || cancer.data[i];
        cancer = component_containing(grown, cancer);
        res.steps.push_back(std::move(rec));
      }
      LabelVolume out = labels;
      assign_bit(out, LabelBit::Cancer, cancer);
      if (classify_stage(out) == StageLabel::OverT3) {
        res.output.labels = std::move(out);
        res.output.stage = StageLabel::OverT3;
        return res;
      }
      last_failure = "no invasion after " + std::to_string(steps) + " steps";
    } catch (const GeometryError& e) {
      last_failure = e.what();
    }
  }
  throw GeometryError("simulate_progression: case " + c.id + " still not OVER_T3 after " +
                      std::to_string(cfg.max_redraws) + " redraws (" + last_failure + ")");
}

}  // namespace stagekit
