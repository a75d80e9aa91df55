#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "stagekit/volume.hpp"

namespace stagekit {

struct SynthConfig {
  int scales = 4;
  int base_channels = 32;  ///< feature width at the coarsest scale, halved per finer scale down to 8
  int label_channels = 6;  ///< one channel per label bit
  int hidden_channels = 16;  ///< width of the shared modulation layer
  int disc_channels = 16;
  double recon_weight = 10;
  double adv_weight = 1;
  double lr_g = 1e-3;
  double lr_d = 1e-3;
  bool zero_init_disc_head = true;
  Shape3 train_crop{32, 32, 32};

  void validate() const;
  int channels_at(int scale) const;  ///< scale 0 is the coarsest
  std::int64_t stride() const { return std::int64_t{1} << (scales - 1); }
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

/// Parameter-free instance norm modulated per voxel by scale and shift maps
/// predicted from the label volume.
class Spade3dImpl : public torch::nn::Module {
 public:
  Spade3dImpl(int feature_channels, int label_channels, int hidden_channels);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& labels);

 private:
  torch::nn::InstanceNorm3d norm_{nullptr};
  torch::nn::Conv3d shared_{nullptr}, gamma_{nullptr}, beta_{nullptr};
};
TORCH_MODULE(Spade3d);

/// Noise volume at the coarsest scale, one modulated block per scale, nearest
/// upsampling between scales, sigmoid output. All convolutions wrap around
/// circularly, so shifting labels and noise by whole coarse strides shifts the output.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const SynthConfig& cfg);
  /// labels [N, 6, Z, Y, X], noise [N, 1, Z/s, Y/s, X/s] -> image [N, 1, Z, Y, X]
  torch::Tensor forward(const torch::Tensor& labels, const torch::Tensor& noise);
  const SynthConfig& config() const { return cfg_; }

 private:
  SynthConfig cfg_;
  torch::nn::Conv3d stem_{nullptr}, out_{nullptr};
  std::vector<Spade3d> spade_;
  std::vector<torch::nn::Conv3d> conv_;
};
TORCH_MODULE(Generator);

/// Patch discriminator over concatenated (labels, image); returns a score map
/// at a quarter of the input resolution.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const SynthConfig& cfg);
  torch::Tensor forward(const torch::Tensor& labels, const torch::Tensor& image);

 private:
  torch::nn::Sequential body_;
  torch::nn::Conv3d head_{nullptr};
};
TORCH_MODULE(Discriminator);

Generator build_generator(const SynthConfig& cfg, std::uint64_t seed);
Discriminator build_discriminator(const SynthConfig& cfg, std::uint64_t seed);

/// [1, 6, Z, Y, X] float tensor with one channel per label bit. Undefined bits raise ValidationError.
torch::Tensor label_tensor(const LabelVolume& labels);
/// Standard normal noise at the coarsest scale for a label grid.
torch::Tensor noise_tensor(Shape3 label_shape, const SynthConfig& cfg, std::mt19937_64& rng);

struct GanPair {
  LabelVolume labels;
  ImageVolume image;  ///< normalized to [0,1]
};

struct GanLosses {
  double d_loss = 0, d_real = 0, d_fake = 0;  ///< hinge loss and mean scores
  double g_adv = 0, g_l1 = 0, g_total = 0;
};

struct GanModels {
  SynthConfig cfg;
  Generator gen{nullptr};
  Discriminator disc{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g, opt_d;

  GanModels(const SynthConfig& cfg, std::uint64_t seed);
};

/// Discriminator update then generator update on one batch of equally shaped pairs.
GanLosses gan_train_step(GanModels& m, const std::vector<GanPair>& batch, std::mt19937_64& rng);

/// Random training crops (cfg.train_crop) from full pairs.
std::vector<GanPair> sample_gan_batch(const std::vector<GanPair>& pool, std::size_t batch_size, const SynthConfig& cfg,
                                      std::mt19937_64& rng);

/// Resample to isotropic spacing and normalize the image to [0,1]. The case must carry labels.
GanPair gan_pair_from_case(const Case& c, double target_spacing_mm = 0.5);

struct GanTrainResult {
  GanModels models;
  std::vector<GanLosses> history;  ///< one record per step
};

/// `steps` updates on random crops drawn from `pool`, batch size `batch`.
GanTrainResult train_gan(const std::vector<GanPair>& pool, const SynthConfig& cfg, int steps, std::size_t batch,
                         std::uint64_t seed);

/// Label-conditioned image; deterministic in `seed`.
ImageVolume synthesize(Generator& gen, const LabelVolume& labels, std::uint64_t seed);

void save_generator(Generator& gen, const std::filesystem::path& path, std::int64_t steps);
Generator load_generator(const std::filesystem::path& path);

}  // namespace stagekit
