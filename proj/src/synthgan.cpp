#include "stagekit/synthgan.hpp"

#include <cmath>
#include <cstring>

#include "stagekit/checkpoint.hpp"
#include "stagekit/error.hpp"
#include "stagekit/phantom.hpp"
#include "stagekit/preprocess.hpp"

namespace stagekit {

namespace nn = torch::nn;
using nlohmann::json;

void SynthConfig::validate() const {
  if (scales < 2) throw ValidationError("SynthConfig: scales must be at least 2");
  if (label_channels != kLabelBitCount)
    throw ValidationError("SynthConfig: label_channels must equal the label bit count (" + std::to_string(kLabelBitCount) + ")");
  if (base_channels < 1 || hidden_channels < 1 || disc_channels < 1)
    throw ValidationError("SynthConfig: channel counts must be positive");
  if (recon_weight < 0 || adv_weight < 0) throw ValidationError("SynthConfig: loss weights must be non-negative");
  if (!(lr_g > 0) || !(lr_d > 0)) throw ValidationError("SynthConfig: learning rates must be positive");
  for (int a = 0; a < 3; ++a)
    if (train_crop[a] < 1 || train_crop[a] % stride() != 0)
      throw ValidationError("SynthConfig: train_crop must be a positive multiple of " + std::to_string(stride()));
}

int SynthConfig::channels_at(int scale) const { return std::max(base_channels >> scale, 8); }

json SynthConfig::to_json() const {
  return {{"scales", scales},
          {"base_channels", base_channels},
          {"label_channels", label_channels},
          {"hidden_channels", hidden_channels},
          {"disc_channels", disc_channels},
          {"recon_weight", recon_weight},
          {"adv_weight", adv_weight},
          {"lr_g", lr_g},
          {"lr_d", lr_d},
          {"zero_init_disc_head", zero_init_disc_head},
          {"train_crop", {train_crop.z, train_crop.y, train_crop.x}}};
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig c;
  try {
    c.scales = j.value("scales", c.scales);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.label_channels = j.value("label_channels", c.label_channels);
    c.hidden_channels = j.value("hidden_channels", c.hidden_channels);
    c.disc_channels = j.value("disc_channels", c.disc_channels);
    c.recon_weight = j.value("recon_weight", c.recon_weight);
    c.adv_weight = j.value("adv_weight", c.adv_weight);
    c.lr_g = j.value("lr_g", c.lr_g);
    c.lr_d = j.value("lr_d", c.lr_d);
    c.zero_init_disc_head = j.value("zero_init_disc_head", c.zero_init_disc_head);
    if (j.contains("train_crop")) {
      const auto& t = j["train_crop"];
      c.train_crop = {t.at(0).get<std::int64_t>(), t.at(1).get<std::int64_t>(), t.at(2).get<std::int64_t>()};
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed synthesis config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

nn::Conv3d circular_conv(int in, int out, bool bias = true) {
  return nn::Conv3d(nn::Conv3dOptions(in, out, 3).padding(1).padding_mode(torch::kCircular).bias(bias));
}

}  // namespace

Spade3dImpl::Spade3dImpl(int feature_channels, int label_channels, int hidden_channels) {
  norm_ = register_module("norm", nn::InstanceNorm3d(nn::InstanceNorm3dOptions(feature_channels).affine(false)));
  shared_ = register_module("shared", circular_conv(label_channels, hidden_channels));
  gamma_ = register_module("gamma", circular_conv(hidden_channels, feature_channels));
  beta_ = register_module("beta", circular_conv(hidden_channels, feature_channels));
}

torch::Tensor Spade3dImpl::forward(const torch::Tensor& x, const torch::Tensor& labels) {
  const torch::Tensor h = torch::relu(shared_->forward(labels));
  const torch::Tensor g = gamma_->forward(h), b = beta_->forward(h);
  if (g.sizes() != x.sizes() || b.sizes() != x.sizes())
    throw std::logic_error("modulation maps do not match the feature map shape");
  return norm_->forward(x) * (1 + g) + b;
}

GeneratorImpl::GeneratorImpl(const SynthConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  // Layers that feed a modulated norm get no bias.
  stem_ = register_module("stem", circular_conv(1, cfg_.channels_at(0), false));
  for (int s = 0; s < cfg_.scales; ++s) {
    const int c = cfg_.channels_at(s);
    const int next = s + 1 < cfg_.scales ? cfg_.channels_at(s + 1) : c;
    spade_.push_back(register_module("spade" + std::to_string(s), Spade3d(c, cfg_.label_channels, cfg_.hidden_channels)));
    conv_.push_back(register_module("conv" + std::to_string(s), circular_conv(c, next, s + 1 == cfg_.scales)));
  }
  out_ = register_module("out", circular_conv(cfg_.channels_at(cfg_.scales - 1), 1));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& labels, const torch::Tensor& noise) {
  if (labels.dim() != 5 || labels.size(1) != cfg_.label_channels)
    throw ShapeError("generator labels must be [N, " + std::to_string(cfg_.label_channels) + ", Z, Y, X]");
  const std::int64_t st = cfg_.stride();
  static const char* axes[3] = {"z", "y", "x"};
  for (int a = 0; a < 3; ++a) {
    if (labels.size(2 + a) % st != 0)
      throw ShapeError(std::string("generator labels ") + axes[a] + " extent " + std::to_string(labels.size(2 + a)) +
                       " is not divisible by " + std::to_string(st));
    if (noise.size(2 + a) * st != labels.size(2 + a)) throw ShapeError("generator noise does not match the coarsest scale");
  }
  torch::Tensor x = stem_->forward(noise);
  for (int s = 0; s < cfg_.scales; ++s) {
    const std::int64_t f = st >> s;
    const torch::Tensor lab = f > 1 ? torch::avg_pool3d(labels, f) : labels;
    x = spade_[static_cast<std::size_t>(s)]->forward(x, lab);
    x = torch::leaky_relu(x, 0.2);
    x = conv_[static_cast<std::size_t>(s)]->forward(x);
    if (s + 1 < cfg_.scales)
      x = torch::upsample_nearest3d(x, std::vector<std::int64_t>{x.size(2) * 2, x.size(3) * 2, x.size(4) * 2});
  }
  return torch::sigmoid(out_->forward(torch::leaky_relu(x, 0.2)));
}

DiscriminatorImpl::DiscriminatorImpl(const SynthConfig& cfg) {
  cfg.validate();
  const int d = cfg.disc_channels, in = cfg.label_channels + 1;
  body_ = register_module(
      "body", nn::Sequential(nn::Conv3d(nn::Conv3dOptions(in, d, 4).stride(2).padding(1)),
                             nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                             nn::Conv3d(nn::Conv3dOptions(d, 2 * d, 4).stride(2).padding(1).bias(false)),
                             nn::InstanceNorm3d(nn::InstanceNorm3dOptions(2 * d).affine(true)),
                             nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                             nn::Conv3d(nn::Conv3dOptions(2 * d, 2 * d, 3).padding(1)),
                             nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2))));
  head_ = register_module("head", nn::Conv3d(nn::Conv3dOptions(2 * d, 1, 3).padding(1)));
  if (cfg.zero_init_disc_head) {
    torch::NoGradGuard g;
    head_->weight.zero_();
    head_->bias.zero_();
  }
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& labels, const torch::Tensor& image) {
  return head_->forward(body_->forward(torch::cat({labels, image}, 1)));
}

Generator build_generator(const SynthConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return Generator(cfg);
}

Discriminator build_discriminator(const SynthConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return Discriminator(cfg);
}

torch::Tensor label_tensor(const LabelVolume& labels) {
  const Shape3 s = labels.shape;
  auto t = torch::zeros({1, kLabelBitCount, s.z, s.y, s.x}, torch::kFloat32);
  float* p = t.data_ptr<float>();
  const std::size_t n = s.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t v = labels.data[i];
    if (v & ~kDefinedBitsMask)
      throw ValidationError("label value " + std::to_string(v) + " uses bits outside the configured classes");
    for (int b = 0; b < kLabelBitCount; ++b)
      if (v & (1u << b)) p[static_cast<std::size_t>(b) * n + i] = 1.0f;
  }
  return t;
}

torch::Tensor noise_tensor(Shape3 label_shape, const SynthConfig& cfg, std::mt19937_64& rng) {
  const std::int64_t st = cfg.stride();
  auto t = torch::empty({1, 1, label_shape.z / st, label_shape.y / st, label_shape.x / st}, torch::kFloat32);
  std::normal_distribution<float> n(0.0f, 1.0f);
  float* p = t.data_ptr<float>();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = n(rng);
  return t;
}

GanModels::GanModels(const SynthConfig& c, std::uint64_t seed)
    : cfg(c), gen(build_generator(c, seed)), disc(build_discriminator(c, seed + 1)) {
  opt_g = std::make_unique<torch::optim::Adam>(gen->parameters(), torch::optim::AdamOptions(c.lr_g).betas({0.5, 0.999}));
  opt_d = std::make_unique<torch::optim::Adam>(disc->parameters(), torch::optim::AdamOptions(c.lr_d).betas({0.5, 0.999}));
}

namespace {

torch::Tensor image_tensor(const ImageVolume& img) {
  const Shape3 s = img.shape;
  auto t = torch::empty({1, 1, s.z, s.y, s.x}, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), img.data.data(), s.voxels() * sizeof(float));
  return t;
}

}  // namespace

GanLosses gan_train_step(GanModels& m, const std::vector<GanPair>& batch, std::mt19937_64& rng) {
  if (batch.empty()) throw ValidationError("gan_train_step: empty batch");
  std::vector<torch::Tensor> labs, imgs, noises;
  for (const auto& p : batch) {
    if (!(p.labels.shape == p.image.shape)) throw ShapeError("gan_train_step: label and image shapes differ");
    labs.push_back(label_tensor(p.labels));
    imgs.push_back(image_tensor(p.image));
    noises.push_back(noise_tensor(p.labels.shape, m.cfg, rng));
  }
  const torch::Tensor labels = torch::cat(labs, 0), real = torch::cat(imgs, 0), noise = torch::cat(noises, 0);
  m.gen->train();
  m.disc->train();

  GanLosses out;
  const torch::Tensor fake = m.gen->forward(labels, noise);
  {
    const torch::Tensor s_real = m.disc->forward(labels, real);
    const torch::Tensor s_fake = m.disc->forward(labels, fake.detach());
    const torch::Tensor d_loss = torch::relu(1 - s_real).mean() + torch::relu(1 + s_fake).mean();
    m.opt_d->zero_grad();
    d_loss.backward();
    m.opt_d->step();
    out.d_loss = d_loss.item<double>();
    out.d_real = s_real.mean().item<double>();
    out.d_fake = s_fake.mean().item<double>();
  }
  {
    const torch::Tensor l1 = (fake - real).abs().mean();
    torch::Tensor g_total = m.cfg.recon_weight * l1;
    torch::Tensor adv = torch::zeros({});
    if (m.cfg.adv_weight > 0) {
      adv = -m.disc->forward(labels, fake).mean();
      g_total = g_total + m.cfg.adv_weight * adv;
    }
    m.opt_g->zero_grad();
    g_total.backward();
    m.opt_g->step();
    out.g_adv = adv.item<double>();
    out.g_l1 = l1.item<double>();
    out.g_total = g_total.item<double>();
  }
  for (double v : {out.d_loss, out.g_adv, out.g_l1, out.g_total})
    if (!std::isfinite(v)) throw TrainingError("gan_train_step: non-finite loss");
  return out;
}

std::vector<GanPair> sample_gan_batch(const std::vector<GanPair>& pool, std::size_t batch_size, const SynthConfig& cfg,
                                      std::mt19937_64& rng) {
  if (pool.empty()) throw ValidationError("sample_gan_batch: empty pool");
  std::vector<GanPair> out;
  for (std::size_t b = 0; b < batch_size; ++b) {
    const GanPair& p = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    std::array<double, 3> center{};
    for (int a = 0; a < 3; ++a) {
      const double half = static_cast<double>(cfg.train_crop[a]) / 2;
      const double lo = std::min(half, static_cast<double>(p.image.shape[a]) / 2);
      const double hi = std::max(lo, static_cast<double>(p.image.shape[a]) - half);
      center[static_cast<std::size_t>(a)] = std::floor(std::uniform_real_distribution<double>(lo, hi)(rng));
    }
    Case c;
    c.image = p.image;
    c.labels = p.labels;
    const Case cropped = crop_at(c, center, cfg.train_crop);
    out.push_back({*cropped.labels, cropped.image});
  }
  return out;
}

GanPair gan_pair_from_case(const Case& c, double target_spacing_mm) {
  if (!c.labels) throw ValidationError("case " + c.id + " has no labels to pair with its image");
  return {resample_isotropic(*c.labels, target_spacing_mm),
          percentile_normalize(resample_isotropic(c.image, target_spacing_mm))};
}

GanTrainResult train_gan(const std::vector<GanPair>& pool, const SynthConfig& cfg, int steps, std::size_t batch,
                         std::uint64_t seed) {
  if (steps < 0) throw ValidationError("train_gan: steps must be non-negative");
  if (batch < 1) throw ValidationError("train_gan: batch must be positive");
  GanTrainResult r{GanModels(cfg, seed), {}};
  std::mt19937_64 rng(derive_seed(seed, 0x9a4));
  for (int i = 0; i < steps; ++i) r.history.push_back(gan_train_step(r.models, sample_gan_batch(pool, batch, cfg, rng), rng));
  return r;
}

ImageVolume synthesize(Generator& gen, const LabelVolume& labels, std::uint64_t seed) {
  torch::NoGradGuard guard;
  std::mt19937_64 rng(seed);
  const torch::Tensor lab = label_tensor(labels);
  const torch::Tensor noise = noise_tensor(labels.shape, gen->config(), rng);
  gen->eval();
  const torch::Tensor img = gen->forward(lab, noise).contiguous();
  ImageVolume out(labels.shape, labels.spacing_mm);
  std::memcpy(out.data.data(), img.data_ptr<float>(), out.data.size() * sizeof(float));
  return out;
}

void save_generator(Generator& gen, const std::filesystem::path& path, std::int64_t steps) {
  save_checkpoint(*gen, path, {{"kind", "generator"}, {"config", gen->config().to_json()}, {"steps", steps}});
}

Generator load_generator(const std::filesystem::path& path) {
  const json meta = read_checkpoint_meta(path);
  if (meta.value("kind", "") != "generator") throw FormatError(path.string() + " is not a generator checkpoint");
  Generator gen(SynthConfig::from_json(meta.at("config")));
  load_checkpoint(*gen, path);
  return gen;
}

}  // namespace stagekit
