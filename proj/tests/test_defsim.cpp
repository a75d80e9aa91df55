#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "stagekit/defsim.hpp"
#include "stagekit/error.hpp"
#include "stagekit/phantom.hpp"
#include "stagekit/staging.hpp"
#include "test_util.hpp"

using namespace stagekit;
using stagekit::testing::sphere_mask;

namespace {

TriMesh box_mesh(const Vec3& lo, const Vec3& hi) {
  TriMesh m;
  for (int c = 0; c < 8; ++c)
    m.vertices.emplace_back(c & 4 ? hi[0] : lo[0], c & 2 ? hi[1] : lo[1], c & 1 ? hi[2] : lo[2]);
  // quads as corner ids, counter-clockwise from outside
  const int quads[6][4] = {{0, 1, 3, 2}, {4, 6, 7, 5}, {0, 4, 5, 1}, {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 5, 7, 3}};
  for (const auto& q : quads) {
    m.faces.push_back({q[0], q[1], q[2]});
    m.faces.push_back({q[0], q[2], q[3]});
  }
  if (signed_volume(m) < 0)
    for (auto& f : m.faces) std::swap(f[1], f[2]);
  return m;
}

Mask shift_mask(const Mask& m, std::int64_t dz, std::int64_t dy, std::int64_t dx) {
  Mask out(m.shape, m.spacing_mm);
  for (std::int64_t z = 0; z < m.shape.z; ++z)
    for (std::int64_t y = 0; y < m.shape.y; ++y)
      for (std::int64_t x = 0; x < m.shape.x; ++x)
        if (m.shape.contains(z - dz, y - dy, x - dx)) out.at(z, y, x) = m.at(z - dz, y - dy, x - dx);
  return out;
}

Mask union_mask(const Mask& a, const Mask& b) {
  Mask out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] || b.data[i];
  return out;
}

// Dense bi-Laplacian with angle-based cotangents, for checking the sparse solve.
Eigen::MatrixXd dense_bilaplacian(const TriMesh& m) {
  const auto n = static_cast<Eigen::Index>(m.vertices.size());
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd mass = Eigen::VectorXd::Zero(n);
  for (const auto& t : m.faces) {
    const Vec3 p[3] = {m.vertices[static_cast<std::size_t>(t[0])], m.vertices[static_cast<std::size_t>(t[1])],
                       m.vertices[static_cast<std::size_t>(t[2])]};
    const double area = 0.5 * (p[1] - p[0]).cross(p[2] - p[0]).norm();
    for (int k = 0; k < 3; ++k) {
      mass[t[static_cast<std::size_t>(k)]] += area / 3;
      const Vec3 u = p[(k + 1) % 3] - p[k], v = p[(k + 2) % 3] - p[k];
      const double angle = std::atan2(u.cross(v).norm(), u.dot(v));
      const double w = 0.5 / std::tan(angle);
      const int i = t[static_cast<std::size_t>((k + 1) % 3)], j = t[static_cast<std::size_t>((k + 2) % 3)];
      L(i, j) += w;
      L(j, i) += w;
      L(i, i) -= w;
      L(j, j) -= w;
    }
  }
  return L * mass.cwiseInverse().asDiagonal() * L;
}

Vec3 mask_center_mm(Shape3 s, double h) {
  return Vec3((static_cast<double>(s.z) - 1) * h / 2, (static_cast<double>(s.y) - 1) * h / 2,
              (static_cast<double>(s.x) - 1) * h / 2);
}

}  // namespace

TEST_CASE("label_to_mesh on a digital sphere") {
  const double h = 0.5, r = 10.0;
  const Shape3 s{48, 48, 48};
  const Vec3 c = mask_center_mm(s, h);
  const Mask sphere = sphere_mask(s, {h, h, h}, {c[0], c[1], c[2]}, r);
  const TriMesh m = label_to_mesh(sphere);
  CHECK(is_watertight(m));
  CHECK(min_face_area(m) > 1e-9);
  CHECK(mesh_components(m) == 1);
  const double area = surface_area(m), analytic = 4 * std::numbers::pi * r * r;
  MESSAGE("sphere area " << area << " vs " << analytic);
  CHECK(std::abs(area - analytic) / analytic < 0.05);
  CHECK(signed_volume(m) > 0);

  const Mask back = voxelize(m, s, {h, h, h});
  const double d = dice_score(back, sphere);
  MESSAGE("round-trip dice " << d);
  CHECK(d >= 0.98);
}

TEST_CASE("label_to_mesh preconditions") {
  Mask one({8, 8, 8}, {1, 1, 1});
  one.at(4, 4, 4) = 1;
  CHECK_THROWS_AS(label_to_mesh(one), GeometryError);
  Mask empty({8, 8, 8}, {1, 1, 1});
  CHECK_THROWS_WITH_AS(label_to_mesh(empty), doctest::Contains("0 components"), GeometryError);
  Mask two = union_mask(sphere_mask({20, 20, 20}, {1, 1, 1}, {5, 5, 5}, 3), sphere_mask({20, 20, 20}, {1, 1, 1}, {14, 14, 14}, 3));
  CHECK_THROWS_WITH_AS(label_to_mesh(two), doctest::Contains("2 components"), GeometryError);
}

TEST_CASE("voxelize an analytic box counts the enclosed voxel centres") {
  const Spacing3 sp{0.5, 0.5, 0.5};
  const Shape3 s{24, 24, 24};
  const Vec3 lo(2.31, 1.13, 3.37), hi(7.83, 5.41, 9.92);
  const Mask vox = voxelize(box_mesh(lo, hi), s, sp);
  std::size_t centres = 0;
  for (std::int64_t z = 0; z < s.z; ++z)
    for (std::int64_t y = 0; y < s.y; ++y)
      for (std::int64_t x = 0; x < s.x; ++x) {
        const Vec3 p(z * sp.z, y * sp.y, x * sp.x);
        centres += (p.array() > lo.array()).all() && (p.array() < hi.array()).all();
      }
  CHECK(count_nonzero(vox) == centres);
  const Vec3 ext = hi - lo;
  const double volume_voxels = ext.prod() / 0.125;
  const double layer = 2 * (ext[0] * ext[1] + ext[1] * ext[2] + ext[0] * ext[2]) / 0.25;
  CHECK(std::abs(static_cast<double>(count_nonzero(vox)) - volume_voxels) <= layer);
}

TEST_CASE("voxelize is equivariant to whole-voxel translation") {
  const Case c = generate_phantom(3, StageLabel::OverT3);
  const Mask cancer = extract_bit(*c.labels, LabelBit::Cancer);
  const TriMesh m = label_to_mesh(cancer);
  const Spacing3 sp = cancer.spacing_mm;
  const Mask base = voxelize(m, cancer.shape, sp);
  const Mask moved = voxelize(translated(m, Vec3(sp.z, 0, 0)), cancer.shape, sp);
  CHECK(moved == shift_mask(base, 1, 0, 0));
  const Mask moved2 = voxelize(translated(m, Vec3(0, -2 * sp.y, sp.x)), cancer.shape, sp);
  CHECK(moved2 == shift_mask(base, 0, -2, 1));
}

TEST_CASE("voxelize rejects meshes outside the grid") {
  const TriMesh box = box_mesh(Vec3(-2, 1, 1), Vec3(3, 3, 3));
  CHECK_THROWS_WITH_AS(voxelize(box, {10, 10, 10}, {1, 1, 1}), doctest::Contains("bounding box"), GeometryError);
}

TEST_CASE("phantom cancer masks survive the mesh round trip") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Case c = generate_phantom(seed, seed % 2 ? StageLabel::OverT3 : StageLabel::UnderT2);
    const Mask cancer = extract_bit(*c.labels, LabelBit::Cancer);
    const TriMesh m = label_to_mesh(cancer);
    CHECK(is_watertight(m));
    CHECK(min_face_area(m) > 1e-9);
    CHECK(dice_score(voxelize(m, cancer.shape, cancer.spacing_mm), cancer) >= 0.95);
  }
}

TEST_CASE("deformation plan picks the bump apex") {
  const double h = 0.5;
  const Shape3 s{64, 64, 64};
  const Spacing3 sp{h, h, h};
  const Vec3 rc(16, 16, 12), cc(16, 16, 21);
  const Vec3 u = Vec3(0, 1, 1).normalized();
  const Vec3 bc = cc + 3 * u;
  const Mask rectum = sphere_mask(s, sp, {rc[0], rc[1], rc[2]}, 6);
  const Mask cancer = union_mask(sphere_mask(s, sp, {cc[0], cc[1], cc[2]}, 3), sphere_mask(s, sp, {bc[0], bc[1], bc[2]}, 2));
  const TriMesh m = label_to_mesh(cancer);

  // brute force: distance of each vertex to the nearest rectum voxel centre
  std::vector<Vec3> rect_pts;
  for (std::int64_t z = 0; z < s.z; ++z)
    for (std::int64_t y = 0; y < s.y; ++y)
      for (std::int64_t x = 0; x < s.x; ++x)
        if (rectum.at(z, y, x)) rect_pts.emplace_back(z * h, y * h, x * h);
  int oracle = -1;
  double best = -1;
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& p : rect_pts) d = std::min(d, (m.vertices[i] - p).norm());
    if (d > best) best = d, oracle = static_cast<int>(i);
  }
  std::mt19937_64 rng(1);
  const DeformationPlan plan = compute_deformation_plan(m, rectum, rng);
  // farthest point of the bump sphere from the rectum centre
  const Vec3 apex = bc + 2 * (bc - rc).normalized();
  const Vec3 got = m.vertices[static_cast<std::size_t>(plan.handle_vertex)];
  CHECK((got - m.vertices[static_cast<std::size_t>(oracle)]).norm() < 0.5);
  CHECK((got - apex).norm() < 1.0);
  CHECK(std::abs(plan.direction.norm() - 1) < 1e-9);
  // outward from the rectum towards the handle
  CHECK(plan.direction.dot((got - rc).normalized()) > 0.95);
  CHECK(plan.displacement_mm >= 2.0);
  CHECK(plan.displacement_mm <= 10.0);
}

TEST_CASE("deformation plan determinism and invariants over phantoms") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Case c = generate_phantom(seed, seed % 2 ? StageLabel::OverT3 : StageLabel::UnderT2);
    const TriMesh m = label_to_mesh(extract_bit(*c.labels, LabelBit::Cancer));
    const Mask rectum = extract_bit(*c.labels, LabelBit::Rectum);
    std::mt19937_64 r1(seed), r2(seed);
    const DeformationPlan a = compute_deformation_plan(m, rectum, r1);
    const DeformationPlan b = compute_deformation_plan(m, rectum, r2);
    CHECK(a.handle_vertex == b.handle_vertex);
    CHECK(a.direction == b.direction);
    CHECK(a.displacement_mm == b.displacement_mm);
    CHECK(a.fixed_vertices == b.fixed_vertices);
    CHECK_FALSE(std::binary_search(a.fixed_vertices.begin(), a.fixed_vertices.end(), a.handle_vertex));
    CHECK_FALSE(a.fixed_vertices.empty());
    CHECK(std::abs(a.direction.norm() - 1) < 1e-9);
  }
}

TEST_CASE("deformation plan rejects a degenerate rectum") {
  const Mask cancer = sphere_mask({24, 24, 24}, {0.5, 0.5, 0.5}, {6, 6, 6}, 3);
  const TriMesh m = label_to_mesh(cancer);
  std::mt19937_64 rng(0);
  CHECK_THROWS_AS(compute_deformation_plan(m, Mask({24, 24, 24}, {0.5, 0.5, 0.5}), rng), GeometryError);
  CHECK_THROWS_AS(compute_deformation_plan(m, Mask({24, 24, 24}, {0.5, 0.5, 0.5}, 1), rng), GeometryError);
}

TEST_CASE("constrained deformation of a sphere") {
  const double h = 0.5;
  const Shape3 s{40, 40, 40};
  const Vec3 c = mask_center_mm(s, h);
  const TriMesh m = label_to_mesh(sphere_mask(s, {h, h, h}, {c[0], c[1], c[2]}, 6));
  DeformationPlan plan;
  double top = -1e9;
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    if (m.vertices[i][2] > top) top = m.vertices[i][2], plan.handle_vertex = static_cast<int>(i);
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    if (m.vertices[i][2] < c[2]) plan.fixed_vertices.push_back(static_cast<int>(i));
  plan.direction = Vec3(0, 0, 1);
  plan.displacement_mm = 5;

  const TriMesh out = apply_constrained_deformation(m, plan);
  CHECK(out.faces == m.faces);
  const Vec3 target = m.vertices[static_cast<std::size_t>(plan.handle_vertex)] + Vec3(0, 0, 5);
  CHECK((out.vertices[static_cast<std::size_t>(plan.handle_vertex)] - target).norm() < 1e-6);
  double fixed_move = 0;
  for (int v : plan.fixed_vertices)
    fixed_move = std::max(fixed_move, (out.vertices[static_cast<std::size_t>(v)] - m.vertices[static_cast<std::size_t>(v)]).norm());
  CHECK(fixed_move < 1e-6);
  CHECK(count_flipped_faces(m, out) == 0);
  CHECK(is_watertight(out));
  CHECK(signed_volume(out) > signed_volume(m));

  plan.displacement_mm = 0;
  const TriMesh same = apply_constrained_deformation(m, plan);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) CHECK((same.vertices[i] - m.vertices[i]).norm() < 1e-9);
}

TEST_CASE("constrained deformation solves the bi-Laplacian system") {
  const Shape3 s{14, 14, 14};
  const TriMesh m = label_to_mesh(sphere_mask(s, {1, 1, 1}, {6.5, 6.5, 6.5}, 4));
  REQUIRE(m.vertices.size() < 1500);
  DeformationPlan plan;
  plan.handle_vertex = 0;
  plan.direction = Vec3(1, 2, -1).normalized();
  plan.displacement_mm = 3;
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    if ((m.vertices[i] - m.vertices[0]).norm() > 5) plan.fixed_vertices.push_back(static_cast<int>(i));
  const TriMesh out = apply_constrained_deformation(m, plan);

  const Eigen::MatrixXd K = dense_bilaplacian(m);
  const auto n = static_cast<Eigen::Index>(m.vertices.size());
  Eigen::MatrixXd D(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) D.row(i) = (out.vertices[static_cast<std::size_t>(i)] - m.vertices[static_cast<std::size_t>(i)]).transpose();
  const Eigen::MatrixXd KD = K * D;
  std::vector<char> constrained(m.vertices.size(), 0);
  for (int v : plan.fixed_vertices) constrained[static_cast<std::size_t>(v)] = 1;
  constrained[0] = 1;
  double worst = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!constrained[static_cast<std::size_t>(i)]) worst = std::max(worst, KD.row(i).norm());
  const double scale = K.cwiseAbs().maxCoeff() * D.cwiseAbs().maxCoeff();
  CHECK(worst / scale < 1e-9);
}

TEST_CASE("constrained deformation errors") {
  const TriMesh m = label_to_mesh(sphere_mask({14, 14, 14}, {1, 1, 1}, {6.5, 6.5, 6.5}, 4));
  DeformationPlan plan;
  plan.handle_vertex = 0;
  plan.displacement_mm = 1;
  for (std::size_t i = 1; i < m.vertices.size(); ++i) plan.fixed_vertices.push_back(static_cast<int>(i));
  CHECK_THROWS_AS(apply_constrained_deformation(m, plan), GeometryError);
  plan.fixed_vertices = {0};
  CHECK_THROWS_AS(apply_constrained_deformation(m, plan), GeometryError);
}

TEST_CASE("default-range deformations of phantom cancers do not invert faces") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Case c = generate_phantom(200 + seed, StageLabel::UnderT2);
    const TriMesh m = label_to_mesh(extract_bit(*c.labels, LabelBit::Cancer));
    std::mt19937_64 rng(seed);
    const DeformationPlan plan = compute_deformation_plan(m, extract_bit(*c.labels, LabelBit::Rectum), rng);
    const TriMesh out = apply_constrained_deformation(m, plan);
    CHECK(count_flipped_faces(m, out) == 0);
  }
}

TEST_CASE("sphere embedding adds the structure volume") {
  const double h = 0.5;
  const Shape3 s{48, 48, 48};
  const Vec3 c = mask_center_mm(s, h);
  const double rc = 5;
  const TriMesh m = label_to_mesh(sphere_mask(s, {h, h, h}, {c[0], c[1], c[2]}, rc));
  DefSimConfig cfg;
  cfg.tube_prob = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    std::mt19937_64 rng(seed);
    const EmbedResult r = embed_invasion_structure(m, rng, cfg);
    CHECK(r.structure.kind == EmbedKind::Sphere);
    CHECK(is_watertight(r.mesh));
    // voxel-count oracle on a fine grid: union of the analytic sphere and the structure
    const double fh = 0.1;
    const double reach = r.structure.length_mm + r.structure.radius_mm + rc + 1;
    std::size_t added = 0;
    for (double z = c[0] - reach; z <= c[0] + reach; z += fh)
      for (double y = c[1] - reach; y <= c[1] + reach; y += fh)
        for (double x = c[2] - reach; x <= c[2] + reach; x += fh) {
          const Vec3 p(z, y, x);
          if ((p - c).norm() > rc && r.structure.contains(p)) ++added;
        }
    const double oracle = static_cast<double>(added) * fh * fh * fh;
    const double got = signed_volume(r.mesh) - signed_volume(m);
    MESSAGE("embedded volume " << got << " oracle " << oracle);
    CHECK(std::abs(got - oracle) <= 0.1 * oracle);
  }
}

TEST_CASE("embedding is deterministic and keeps the surface closed") {
  const TriMesh m = label_to_mesh(sphere_mask({40, 40, 40}, {0.5, 0.5, 0.5}, {10, 10, 10}, 4));
  std::mt19937_64 a(5), b(5);
  const EmbedResult ra = embed_invasion_structure(m, a);
  const EmbedResult rb = embed_invasion_structure(m, b);
  CHECK(ra.structure.root_vertex == rb.structure.root_vertex);
  CHECK(ra.structure.tip == rb.structure.tip);
  CHECK(ra.mesh.vertices == rb.mesh.vertices);
  CHECK(ra.mesh.faces == rb.mesh.faces);
  CHECK(is_watertight(ra.mesh));
  CHECK(min_face_area(ra.mesh) > 1e-9);
}

TEST_CASE("progression with zero steps leaves labels unchanged") {
  const Case c = generate_phantom(1, StageLabel::UnderT2);
  std::mt19937_64 rng(1);
  const ProgressionResult r = simulate_progression(c, 0, rng);
  CHECK(*r.output.labels == *c.labels);
  CHECK(r.output.role == CaseRole::Generated);
}

TEST_CASE("progression turns UNDER_T2 phantoms into OVER_T3") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Case c = generate_phantom(300 + seed, StageLabel::UnderT2);
    std::mt19937_64 rng(seed);
    const ProgressionResult r = simulate_progression(c, 3, rng);
    const LabelVolume& before = *c.labels;
    const LabelVolume& after = *r.output.labels;
    CHECK(classify_stage(after) == StageLabel::OverT3);
    CHECK(*r.output.stage == StageLabel::OverT3);
    CHECK(r.output.role == CaseRole::Generated);
    CHECK(count_nonzero(extract_bit(after, LabelBit::Cancer)) >= count_nonzero(extract_bit(before, LabelBit::Cancer)));
    bool others_same = true;
    const std::uint8_t keep = static_cast<std::uint8_t>(kDefinedBitsMask & ~bit_value(LabelBit::Cancer));
    for (std::size_t i = 0; i < before.data.size(); ++i)
      if ((before.data[i] & keep) != (after.data[i] & keep)) others_same = false;
    CHECK(others_same);
    // cancer voxels present before stay present
    const Mask c0 = extract_bit(before, LabelBit::Cancer), c1 = extract_bit(after, LabelBit::Cancer);
    bool monotone = true;
    for (std::size_t i = 0; i < c0.data.size(); ++i)
      if (c0.data[i] && !c1.data[i]) monotone = false;
    CHECK(monotone);
  }
}

TEST_CASE("progression is deterministic in the rng seed") {
  const Case c = generate_phantom(77, StageLabel::UnderT2);
  std::mt19937_64 a(9), b(9);
  const ProgressionResult ra = simulate_progression(c, 3, a);
  const ProgressionResult rb = simulate_progression(c, 3, b);
  CHECK(*ra.output.labels == *rb.output.labels);
  CHECK(ra.provenance() == rb.provenance());
}

TEST_CASE("progression requires labels") {
  Case c = generate_phantom(2, StageLabel::UnderT2);
  c.labels.reset();
  std::mt19937_64 rng(0);
  CHECK_THROWS_AS(simulate_progression(c, 3, rng), ValidationError);
}
