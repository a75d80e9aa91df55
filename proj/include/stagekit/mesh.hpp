#pragma once

#include <array>
#include <vector>

#include <Eigen/Core>

#include "stagekit/volume.hpp"

namespace stagekit {

/// Points are in millimetres, ordered (z, y, x) like voxel indices, with voxel
/// (i, j, k) centred at (i*sz, j*sy, k*sx).
using Vec3 = Eigen::Vector3d;

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;  ///< counter-clockwise seen from outside
};

double surface_area(const TriMesh& m);
/// Enclosed volume (mm^3) by the divergence theorem; positive for outward faces.
double signed_volume(const TriMesh& m);
double min_face_area(const TriMesh& m);
Vec3 face_normal(const TriMesh& m, std::size_t f);  ///< unit
std::vector<Vec3> vertex_normals(const TriMesh& m);  ///< area-weighted, unit
/// Every undirected edge is used by exactly two faces with opposite orientation.
bool is_watertight(const TriMesh& m);
/// Faces whose normal turned by more than 90 degrees between two meshes of equal connectivity.
std::size_t count_flipped_faces(const TriMesh& before, const TriMesh& after);
TriMesh translated(const TriMesh& m, const Vec3& offset);
/// Mesh connected components over shared vertices; returns per-face component ids and the count.
int mesh_components(const TriMesh& m, std::vector<int>* face_component = nullptr);

struct MeshingOptions {
  double smoothing_sigma_voxels = 0.7;  ///< Gaussian pre-smoothing of the binary mask
  double iso = 0.5;
  std::size_t min_voxels = 8;
};

/// Closed surface of a single-component mask, extracted at the iso level of the
/// smoothed mask by marching tetrahedra. Throws GeometryError on an empty,
/// too small or multi-component mask.
TriMesh label_to_mesh(const Mask& mask, const MeshingOptions& opt = {});

/// Voxel centres inside the closed mesh (ray parity along x). Throws
/// GeometryError if the mesh leaves the grid.
Mask voxelize(const TriMesh& mesh, Shape3 shape, Spacing3 spacing);
/// Same as voxelize but silently ignores the parts of the mesh outside the grid.
Mask voxelize_clipped(const TriMesh& mesh, Shape3 shape, Spacing3 spacing);

}  // namespace stagekit
