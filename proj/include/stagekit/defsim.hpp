#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "stagekit/mesh.hpp"
#include "stagekit/phantom.hpp"
#include "stagekit/volume.hpp"

namespace stagekit {

struct DefSimConfig {
  Range displacement_mm{2.0, 10.0};
  double transition_fraction = 0.6;            ///< of the mesh diameter, when no explicit radius is set
  std::optional<double> transition_radius_mm;  ///< geodesic radius of the deformable patch
  bool uniform_weights = false;                ///< graph Laplacian instead of cotangent weights

  double embed_prob = 0.3;
  double tube_prob = 0.5;  ///< capsule versus sphere-with-connector
  Range tube_radius_mm{1.0, 3.0};
  Range tube_length_mm{5.0, 15.0};
  Range sphere_radius_mm{2.0, 6.0};
  Range sphere_offset_mm{5.0, 15.0};
  double connector_radius_mm = 1.0;
  double embed_voxel_mm = 0.5;  ///< grid used to form the union
  int max_embed_attempts = 10;

  int steps = 3;
  int max_redraws = 5;
  MeshingOptions meshing;
};

struct DeformationPlan {
  int handle_vertex = -1;
  Vec3 direction = Vec3::UnitZ();
  double displacement_mm = 0;
  std::vector<int> fixed_vertices;  ///< sorted
  double transition_radius_mm = 0;
};

/// Signed distance (mm) of a physical point from the boundary of `mask`, by
/// trilinear interpolation of the voxel signed-distance field.
double sample_signed_distance(const std::vector<double>& sdf, const Mask& grid, const Vec3& p);

/// Handle = vertex farthest outside the rectum (least deep if none is outside),
/// direction = outward rectum normal there, fixed = vertices geodesically
/// farther from the handle than the transition radius.
DeformationPlan compute_deformation_plan(const TriMesh& cancer, const Mask& rectum, std::mt19937_64& rng,
                                         const DefSimConfig& cfg = {});

/// Bi-Laplacian deformation with the fixed vertices pinned and the handle moved
/// by displacement_mm * direction. Connectivity is preserved.
TriMesh apply_constrained_deformation(const TriMesh& mesh, const DeformationPlan& plan, const DefSimConfig& cfg = {});

enum class EmbedKind { Capsule, Sphere };

struct EmbeddedStructure {
  EmbedKind kind = EmbedKind::Capsule;
  int root_vertex = -1;
  Vec3 root = Vec3::Zero();
  Vec3 axis = Vec3::UnitZ();
  double radius_mm = 0;  ///< capsule or sphere radius
  double length_mm = 0;  ///< capsule length, or sphere centre offset along the axis
  Vec3 tip = Vec3::Zero();  ///< capsule end, or sphere centre
  double connector_radius_mm = 0;
  int attempts = 0;

  /// Whether a physical point lies inside the structure (capsule, or sphere plus connector).
  bool contains(const Vec3& p) const;
};

struct EmbedResult {
  TriMesh mesh;
  EmbeddedStructure structure;
};

/// Unions a tube or a connected sphere with the closed mesh and re-extracts the surface.
EmbedResult embed_invasion_structure(const TriMesh& mesh, std::mt19937_64& rng, const DefSimConfig& cfg = {});

struct ProgressionStep {
  DeformationPlan plan;
  std::optional<EmbeddedStructure> embedded;
};

struct ProgressionResult {
  Case output;
  std::vector<ProgressionStep> steps;
  int redraws = 0;
  nlohmann::json provenance() const;
};

/// Grows the cancer label by repeated plan/deform/embed cycles until the rule-based
/// stage reads OVER_T3. Only the cancer bit changes; the result is a GENERATED case
/// with an empty image.
ProgressionResult simulate_progression(const Case& c, int steps, std::mt19937_64& rng, const DefSimConfig& cfg = {});

}  // namespace stagekit
