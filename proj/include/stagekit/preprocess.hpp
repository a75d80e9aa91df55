#pragma once

#include "stagekit/volume.hpp"

namespace stagekit {

enum class Phase { Train, Eval };

/// Crop extents per phase, stored in (z, y, x) order.
struct CropConfig {
  Shape3 train{112, 192, 192};
  Shape3 eval{128, 256, 256};

  /// Small crops used with 64^3 phantoms: (x,y,z) = 64x64x48 / 96x96x64.
  static CropConfig phantom() { return {Shape3{48, 64, 64}, Shape3{64, 96, 96}}; }
  Shape3 for_phase(Phase p) const { return p == Phase::Train ? train : eval; }
};

/// Trilinear resampling to isotropic `target_mm` voxels. New extent per axis is
/// round(n * spacing / target). Already-isotropic input at the target is returned as is.
ImageVolume resample_isotropic(const ImageVolume& vol, double target_mm = 0.5);
/// Nearest-neighbour per bit, so overlapping labels keep their bitmask.
LabelVolume resample_isotropic(const LabelVolume& vol, double target_mm = 0.5);

/// Crops a fixed window centred on `center` (voxel coordinates, z/y/x).
/// Out-of-range voxels become zero in both image and labels.
Case crop_at(const Case& c, const std::array<double, 3>& center, Shape3 window);

/// Crops around the centroid of the cancer bit. Requires labels with a nonempty
/// cancer bit; otherwise throws ValidationError asking the caller to centre on
/// the rectum (or volume) centroid via crop_at.
Case crop_around_label(const Case& c, Phase phase, const CropConfig& cfg = {});

/// Centroid of the nonzero voxels of `mask`, in voxel coordinates.
std::array<double, 3> centroid(const Mask& mask);
std::array<double, 3> volume_center(Shape3 s);

/// Linear map p_low-th percentile -> 0, p_high-th -> 1, clamped to [0,1].
/// Percentiles here are nearest-rank.
/// A constant image maps to all zeros.
ImageVolume percentile_normalize(const ImageVolume& img, double p_low = 1.0, double p_high = 99.0);

/// Linear-interpolated percentile (numpy "linear" convention) of `values`.
double percentile(std::vector<float> values, double pct);

}  // namespace stagekit
