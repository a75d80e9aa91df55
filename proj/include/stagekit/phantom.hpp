#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stagekit/volume.hpp"

namespace stagekit {

struct Range {
  double lo = 0, hi = 0;
};

struct PhantomConfig {
  Shape3 shape{64, 64, 64};
  double spacing_mm = 0.5;
  Range rectum_radius_mm{5.5, 7.0};       ///< in-plane semi-axes
  Range rectum_length_mm{12.0, 14.0};     ///< z semi-axis
  Range mesorectum_margin_mm{5.5, 6.5};   ///< mesorectum semi-axis minus rectum semi-axis
  Range cancer_radius_mm{3.0, 4.5};
  Range t2_wall_gap_mm{0.5, 1.5};         ///< cancer-to-rectum-surface clearance for UNDER_T2
  Range invasion_depth_mm{1.0, 3.0};      ///< max cancer distance outside the rectum for OVER_T3
  double noise_sigma = 0.03;
  double texture_amplitude = 0.04;

  /// Base intensity per class before texture and noise.
  double intensity_background = 0.15;
  double intensity_mesorectum = 0.75;
  double intensity_rectum = 0.35;
  double intensity_cancer = 0.55;
  double intensity_bladder = 0.95;
  double intensity_prostate = 0.5;
  double intensity_pelvis = 0.25;

  void validate() const;
};

/// Builds one phantom with the requested stage. The geometry is concentric:
/// mesorectum ellipsoid around a rectum ellipsoid, a cancer blob on the rectum
/// wall (inside for UNDER_T2, protruding into the mesorectum for OVER_T3) and
/// bladder/prostate/pelvis structures outside the mesorectum.
Case generate_phantom(std::uint64_t seed, StageLabel stage, const PhantomConfig& cfg = {});

/// Largest distance (mm) of a cancer voxel centre from the nearest rectum voxel centre.
double invasion_depth_mm(const LabelVolume& labels);

struct PoolRequest {
  int count = 0;
  int t2 = 0;
  int t3 = 0;
};

/// Parses "A=20:8/12,B=20:8/12,C=20:10/10".
std::map<std::string, PoolRequest> parse_pool_counts(const std::string& spec);

struct Manifest {
  std::map<std::string, std::vector<std::filesystem::path>> pools;  ///< A, B, C, D
  std::map<std::string, std::vector<std::filesystem::path>> hidden_oracle;
  std::filesystem::path root;  ///< directory relative paths resolve against
};

/// Writes one VolumePack per case under `out_dir/<pool>/<id>` plus
/// `out_dir/manifest.json`. Pool C packs omit labels; their labels go to
/// `out_dir/hidden_oracle/C/<id>`. Pool D starts empty.
Manifest generate_dataset(const std::filesystem::path& out_dir, const std::map<std::string, PoolRequest>& pools,
                          std::uint64_t seed, const PhantomConfig& cfg = {});

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

/// Deterministic per-item seed derivation.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

}  // namespace stagekit
