#include "stagekit/segnet.hpp"

#include <cstring>

#include "stagekit/checkpoint.hpp"
#include "stagekit/error.hpp"

namespace stagekit {

namespace nn = torch::nn;

void SegNetConfig::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ValidationError("SegNetConfig: channel counts must be positive");
  if (base_width < 1) throw ValidationError("SegNetConfig: base_width must be positive");
  if (depth < 2) throw ValidationError("SegNetConfig: depth must be at least 2");
  if (convs_per_level < 1) throw ValidationError("SegNetConfig: convs_per_level must be positive");
  if (activation != "leaky_relu" && activation != "relu")
    throw ValidationError("SegNetConfig: unknown activation '" + activation + "'");
}

nlohmann::json SegNetConfig::to_json() const {
  return {{"in_channels", in_channels}, {"out_channels", out_channels}, {"base_width", base_width},
          {"depth", depth},             {"activation", activation},     {"convs_per_level", convs_per_level}};
}

SegNetConfig SegNetConfig::from_json(const nlohmann::json& j) {
  SegNetConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.out_channels = j.value("out_channels", c.out_channels);
  c.base_width = j.value("base_width", c.base_width);
  c.depth = j.value("depth", c.depth);
  c.activation = j.value("activation", c.activation);
  c.convs_per_level = j.value("convs_per_level", c.convs_per_level);
  c.validate();
  return c;
}

namespace {

// Convolutions feeding an instance norm carry no bias; the norm would cancel it.
nn::Sequential conv_block(int in, int out, const SegNetConfig& cfg) {
  nn::Sequential s;
  for (int k = 0; k < cfg.convs_per_level; ++k) {
    s->push_back(nn::Conv3d(nn::Conv3dOptions(k == 0 ? in : out, out, 3).padding(1).bias(false)));
    s->push_back(nn::InstanceNorm3d(nn::InstanceNorm3dOptions(out).affine(true)));
    if (cfg.activation == "relu")
      s->push_back(nn::ReLU());
    else
      s->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.01)));
  }
  return s;
}

}  // namespace

SegNetImpl::SegNetImpl(const SegNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::vector<int> width(static_cast<std::size_t>(cfg_.depth));
  for (int i = 0; i < cfg_.depth; ++i) width[static_cast<std::size_t>(i)] = cfg_.base_width << i;
  for (int i = 0; i < cfg_.depth; ++i) {
    const int in = i == 0 ? cfg_.in_channels : width[static_cast<std::size_t>(i - 1)];
    down_.push_back(register_module("down" + std::to_string(i), conv_block(in, width[static_cast<std::size_t>(i)], cfg_)));
  }
  for (int i = 0; i + 1 < cfg_.depth; ++i) {
    const int w = width[static_cast<std::size_t>(i)], wn = width[static_cast<std::size_t>(i + 1)];
    up_.push_back(register_module("up" + std::to_string(i),
                                  nn::ConvTranspose3d(nn::ConvTranspose3dOptions(wn, w, 2).stride(2))));
    dec_.push_back(register_module("dec" + std::to_string(i), conv_block(2 * w, w, cfg_)));
  }
  head_ = register_module("head", nn::Conv3d(nn::Conv3dOptions(width[0], cfg_.out_channels, 1)));
}

torch::Tensor SegNetImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 5) throw ShapeError("segnet input must be [N, C, Z, Y, X], got " + std::to_string(x.dim()) + " dims");
  if (x.size(1) != cfg_.in_channels)
    throw ShapeError("segnet input has " + std::to_string(x.size(1)) + " channels, expected " +
                     std::to_string(cfg_.in_channels));
  const std::int64_t div = std::int64_t{1} << (cfg_.depth - 1);
  static const char* axes[3] = {"z", "y", "x"};
  for (int a = 0; a < 3; ++a)
    if (x.size(2 + a) % div != 0)
      throw ShapeError(std::string("segnet input ") + axes[a] + " extent " + std::to_string(x.size(2 + a)) +
                       " is not divisible by " + std::to_string(div));

  std::vector<torch::Tensor> skips;
  torch::Tensor h = x;
  for (std::size_t i = 0; i < down_.size(); ++i) {
    if (i > 0) h = torch::max_pool3d(h, 2);
    h = down_[i]->forward(h);
    skips.push_back(h);
  }
  for (std::size_t i = up_.size(); i-- > 0;) {
    h = up_[i]->forward(h);
    h = dec_[i]->forward(torch::cat({h, skips[i]}, 1));
  }
  return torch::sigmoid(head_->forward(h));
}

SegNet build_segnet(const SegNetConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return SegNet(cfg);
}

torch::Tensor image_batch(const std::vector<const ImageVolume*>& images) {
  if (images.empty()) throw ValidationError("image_batch: no images");
  const Shape3 s = images[0]->shape;
  auto t = torch::empty({static_cast<std::int64_t>(images.size()), 1, s.z, s.y, s.x}, torch::kFloat32);
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (!(images[n]->shape == s)) throw ShapeError("image_batch: images differ in shape");
    std::memcpy(t[static_cast<std::int64_t>(n)].data_ptr<float>(), images[n]->data.data(), s.voxels() * sizeof(float));
  }
  return t;
}

std::vector<ProbabilityMaps> to_probability_maps(const torch::Tensor& probs) {
  if (probs.dim() != 5 || probs.size(1) != kOutputChannels)
    throw ShapeError("to_probability_maps expects [N, 3, Z, Y, X]");
  const torch::Tensor c = probs.detach().to(torch::kFloat64).contiguous();
  const Shape3 s{c.size(2), c.size(3), c.size(4)};
  std::vector<ProbabilityMaps> out;
  const double* p = c.data_ptr<double>();
  for (std::int64_t n = 0; n < c.size(0); ++n) {
    ProbabilityMaps m(s);
    for (int ch = 0; ch < kOutputChannels; ++ch) {
      const double* src = p + (n * kOutputChannels + ch) * static_cast<std::int64_t>(s.voxels());
      std::copy(src, src + s.voxels(), m.channels[static_cast<std::size_t>(ch)].begin());
    }
    out.push_back(std::move(m));
  }
  return out;
}

torch::Tensor from_probability_maps(const std::vector<ProbabilityMaps>& maps) {
  if (maps.empty()) throw ValidationError("from_probability_maps: no maps");
  const Shape3 s = maps[0].shape;
  auto t = torch::empty({static_cast<std::int64_t>(maps.size()), kOutputChannels, s.z, s.y, s.x}, torch::kFloat64);
  double* p = t.data_ptr<double>();
  for (std::size_t n = 0; n < maps.size(); ++n)
    for (int ch = 0; ch < kOutputChannels; ++ch) {
      const auto& src = maps[n].channels[static_cast<std::size_t>(ch)];
      std::copy(src.begin(), src.end(), p + (static_cast<std::int64_t>(n) * kOutputChannels + ch) * static_cast<std::int64_t>(s.voxels()));
    }
  return t;
}

ProbabilityMaps predict(SegNet& net, const ImageVolume& image) {
  torch::NoGradGuard guard;
  return to_probability_maps(net->forward(image_batch({&image})))[0];
}

void save_segnet(SegNet& net, const std::filesystem::path& path, std::int64_t iteration, double validation_dice) {
  save_checkpoint(*net, path,
                  {{"kind", "segnet"},
                   {"config", net->config().to_json()},
                   {"iteration", iteration},
                   {"validation_dice", validation_dice}});
}

SegNetCheckpoint load_segnet(const std::filesystem::path& path) {
  const nlohmann::json meta = read_checkpoint_meta(path);
  if (meta.value("kind", "") != "segnet") throw FormatError(path.string() + " is not a segmentation checkpoint");
  SegNetCheckpoint ck;
  ck.config = SegNetConfig::from_json(meta.at("config"));
  ck.net = SegNet(ck.config);
  load_checkpoint(*ck.net, path);
  ck.iteration = meta.value("iteration", std::int64_t{0});
  ck.validation_dice = meta.value("validation_dice", 0.0);
  return ck;
}

}  // namespace stagekit
