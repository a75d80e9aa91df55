#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "stagekit/volume.hpp"

namespace stagekit {

struct SegNetConfig {
  int in_channels = 1;
  int out_channels = 3;  ///< mesorectum, rectum, cancer
  int base_width = 16;
  int depth = 4;  ///< resolution levels; the input must be divisible by 2^(depth-1)
  std::string activation = "leaky_relu";  ///< or "relu"
  int convs_per_level = 2;

  void validate() const;
  nlohmann::json to_json() const;
  static SegNetConfig from_json(const nlohmann::json& j);
};

/// 3D U-Net: conv-instancenorm-activation blocks, max-pool down, transposed-conv
/// up with skip concatenation, and a per-channel sigmoid head.
class SegNetImpl : public torch::nn::Module {
 public:
  explicit SegNetImpl(const SegNetConfig& cfg);
  /// x: [N, in_channels, Z, Y, X] -> probabilities [N, out_channels, Z, Y, X].
  torch::Tensor forward(const torch::Tensor& x);
  const SegNetConfig& config() const { return cfg_; }

 private:

  SegNetConfig cfg_;
  std::vector<torch::nn::Sequential> down_;
  std::vector<torch::nn::ConvTranspose3d> up_;
  std::vector<torch::nn::Sequential> dec_;
  torch::nn::Conv3d head_{nullptr};
};
TORCH_MODULE(SegNet);

/// Deterministic construction: parameters depend only on (config, seed).
SegNet build_segnet(const SegNetConfig& cfg, std::uint64_t seed);

/// Stacks single-channel volumes of equal shape into [N, 1, Z, Y, X].
torch::Tensor image_batch(const std::vector<const ImageVolume*>& images);
/// Splits [N, 3, Z, Y, X] probabilities into per-case maps.
std::vector<ProbabilityMaps> to_probability_maps(const torch::Tensor& probs);
/// Inverse of to_probability_maps for gradient tensors.
torch::Tensor from_probability_maps(const std::vector<ProbabilityMaps>& maps);

/// Inference without autograd on one preprocessed image.
ProbabilityMaps predict(SegNet& net, const ImageVolume& image);

struct SegNetCheckpoint {
  SegNet net{nullptr};
  SegNetConfig config;
  std::int64_t iteration = 0;
  double validation_dice = 0;
};

void save_segnet(SegNet& net, const std::filesystem::path& path, std::int64_t iteration, double validation_dice);
SegNetCheckpoint load_segnet(const std::filesystem::path& path);

}  // namespace stagekit
