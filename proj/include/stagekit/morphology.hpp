#pragma once

#include <vector>

#include "stagekit/volume.hpp"

namespace stagekit {

/// Exact Euclidean distance (mm) from every voxel centre to the nearest nonzero
/// voxel centre of `mask`, honouring anisotropic spacing. Voxels inside the mask
/// get 0; an empty mask yields +infinity everywhere.
std::vector<double> distance_to_mask(const Mask& mask);

/// Signed distance to the boundary of `mask` in mm: positive outside, negative
/// inside, with the zero level half a voxel from the boundary voxel centres.
std::vector<double> signed_distance(const Mask& mask);

enum class Connectivity { Face6, Full26 };

struct Components {
  std::vector<int> label;  ///< 0 background, 1..count per voxel
  int count = 0;
  std::vector<std::size_t> sizes;  ///< sizes[k-1] is the voxel count of component k
};

Components connected_components(const Mask& mask, Connectivity conn = Connectivity::Face6);

/// Separable Gaussian blur of a mask (sigma in voxels), returned as doubles.
std::vector<double> gaussian_blur(const Mask& mask, double sigma_voxels);

}  // namespace stagekit
