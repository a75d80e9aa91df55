#include "stagekit/checkpoint.hpp"
#include "stagekit/defsim.hpp"
#include "stagekit/error.hpp"
#include "stagekit/phantom.hpp"
#include "stagekit/preprocess.hpp"
#include "stagekit/staging.hpp"
#include "stagekit/synthgan.hpp"
#include "test_util.hpp"

// libtorch's logging header defines its own CHECK.
#undef CHECK
#include <doctest.h>

using namespace stagekit;

namespace {

SynthConfig small_synth() {
  SynthConfig c;
  c.scales = 3;
  c.base_channels = 16;
  c.hidden_channels = 8;
  c.disc_channels = 8;
  c.train_crop = {16, 16, 16};
  return c;
}

GanPair phantom_pair(std::uint64_t seed, Shape3 shape = {32, 32, 32}) {
  PhantomConfig p;
  p.shape = shape;
  p.spacing_mm = 1.0;
  Case c = generate_phantom(seed, seed % 2 ? StageLabel::OverT3 : StageLabel::UnderT2, p);
  return {*c.labels, percentile_normalize(c.image)};
}

}  // namespace

TEST_CASE("generator output matches the label shape and lies in [0,1]") {
  Generator g = build_generator(SynthConfig{}, 1);
  const GanPair p = phantom_pair(1, {32, 64, 64});
  const ImageVolume img = synthesize(g, p.labels, 5);
  CHECK(img.shape == p.labels.shape);
  for (float v : img.data) REQUIRE((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("two seeds build different generators") {
  Generator a = build_generator(small_synth(), 1), b = build_generator(small_synth(), 2);
  bool differ = false;
  auto pa = a->parameters(), pb = b->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) differ |= !torch::equal(pa[i], pb[i]);
  CHECK(differ);
}

TEST_CASE("synthesize is deterministic in the seed and sensitive to it") {
  Generator g = build_generator(small_synth(), 3);
  const GanPair p = phantom_pair(2);
  const ImageVolume a = synthesize(g, p.labels, 9), b = synthesize(g, p.labels, 9), c = synthesize(g, p.labels, 10);
  CHECK(a.data == b.data);
  double mad = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) mad += std::abs(a.data[i] - c.data[i]);
  CHECK(mad / static_cast<double>(a.data.size()) > 0);
}

TEST_CASE("undefined label bits and bad shapes are rejected") {
  Generator g = build_generator(small_synth(), 3);
  GanPair p = phantom_pair(2);
  p.labels.data[100] = 0x40;
  CHECK_THROWS_AS(synthesize(g, p.labels, 0), ValidationError);
  LabelVolume odd({18, 16, 16}, {1, 1, 1});
  CHECK_THROWS_AS(synthesize(g, odd, 0), ShapeError);
  SynthConfig c;
  c.scales = 1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.label_channels = 5;
  CHECK_THROWS_AS(build_generator(c, 0), ValidationError);
}

TEST_CASE("shifting labels and noise by one coarse stride shifts the output") {
  const SynthConfig cfg = small_synth();
  Generator g = build_generator(cfg, 4);
  g->eval();
  const GanPair p = phantom_pair(3);
  const auto lab = label_tensor(p.labels);
  std::mt19937_64 rng(1);
  const auto noise = noise_tensor(p.labels.shape, cfg, rng);
  const std::int64_t st = cfg.stride();
  torch::NoGradGuard guard;
  const auto out = g->forward(lab, noise);
  for (int axis = 2; axis <= 4; ++axis) {
    const auto shifted = g->forward(torch::roll(lab, {st}, {axis}), torch::roll(noise, {1}, {axis}));
    const auto expect = torch::roll(out, {st}, {axis});
    CHECK((shifted - expect).abs().max().item<float>() < 1e-5f);
  }
}

TEST_CASE("discriminator: patch score map, batch independence, zero-init hinge loss") {
  const SynthConfig cfg;
  Discriminator d = build_discriminator(cfg, 5);
  torch::NoGradGuard guard;
  const auto labels = torch::rand({2, 6, 64, 64, 64}), img = torch::rand({2, 1, 64, 64, 64});
  const auto s = d->forward(labels, img);
  REQUIRE(s.dim() == 5);
  CHECK(s.size(1) == 1);
  for (int a = 2; a <= 4; ++a) CHECK(s.size(a) < 64);

  SynthConfig live = small_synth();
  live.zero_init_disc_head = false;
  Discriminator d2 = build_discriminator(live, 6);
  const auto l = torch::rand({3, 6, 16, 16, 16}), x = torch::rand({3, 1, 16, 16, 16});
  const auto perm = torch::tensor({2, 0, 1}, torch::kLong);
  const auto s1 = d2->forward(l, x).index_select(0, perm);
  const auto s2 = d2->forward(l.index_select(0, perm), x.index_select(0, perm));
  CHECK((s1 - s2).abs().max().item<float>() < 1e-6f);
  CHECK(s1.abs().max().item<float>() > 0);

  torch::GradMode::set_enabled(true);
  GanModels m(small_synth(), 7);
  std::mt19937_64 rng(0);
  const GanLosses first = gan_train_step(m, {phantom_pair(4, {16, 16, 16})}, rng);
  CHECK(first.d_loss == 2.0);
  CHECK(first.d_real == 0.0);
  CHECK(first.d_fake == 0.0);
}

TEST_CASE("reconstruction-only training halves the L1 on a 5-pair fixture within 200 steps") {
  SynthConfig cfg = small_synth();
  cfg.adv_weight = 0;
  GanModels m(cfg, 8);
  std::vector<GanPair> pool;
  for (std::uint64_t s = 0; s < 5; ++s) pool.push_back(phantom_pair(20 + s, {16, 32, 32}));
  std::mt19937_64 rng(1);
  double first = 0, last = 0;
  for (int i = 0; i < 200; ++i) {
    const GanLosses l = gan_train_step(m, pool, rng);
    REQUIRE(std::isfinite(l.g_total));
    if (i == 0) first = l.g_l1;
    last = l.g_l1;
  }
  MESSAGE("L1 " << first << " -> " << last);
  CHECK(last <= 0.5 * first);
}

TEST_CASE("random training crops have the configured shape") {
  const SynthConfig cfg = small_synth();
  std::vector<GanPair> pool{phantom_pair(1), phantom_pair(2)};
  std::mt19937_64 a(3), b(3);
  const auto x = sample_gan_batch(pool, 3, cfg, a), y = sample_gan_batch(pool, 3, cfg, b);
  REQUIRE(x.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(x[i].image.shape == cfg.train_crop);
    CHECK(x[i].labels.shape == cfg.train_crop);
    CHECK(x[i].image.data == y[i].image.data);
  }
}

TEST_CASE("generator checkpoint round trip") {
  stagekit::testing::TempDir dir("gen_ckpt");
  Generator g = build_generator(small_synth(), 12);
  save_generator(g, dir.path() / "g.ckpt", 17);
  Generator h = load_generator(dir.path() / "g.ckpt");
  const GanPair p = phantom_pair(5);
  CHECK(synthesize(g, p.labels, 1).data == synthesize(h, p.labels, 1).data);
  CHECK(read_checkpoint_meta(dir.path() / "g.ckpt")["steps"] == 17);
  CHECK_THROWS_AS(load_generator(dir.path() / "nope.ckpt"), IoError);
}

TEST_CASE("synthesized images leave deformed labels staged OVER_T3") {
  PhantomConfig pc;
  pc.shape = {40, 40, 40};
  const Case t2 = generate_phantom(31, StageLabel::UnderT2, pc);
  std::mt19937_64 rng(5);
  const ProgressionResult pr = simulate_progression(t2, 1, rng);
  Generator g = build_generator(small_synth(), 1);
  const ImageVolume img = synthesize(g, *pr.output.labels, 2);
  CHECK(img.shape == pr.output.labels->shape);
  CHECK(classify_stage(*pr.output.labels) == StageLabel::OverT3);
}
