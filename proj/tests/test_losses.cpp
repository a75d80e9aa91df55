#include <doctest.h>

#include <cmath>
#include <functional>

#include "stagekit/losses.hpp"
#include "stagekit/staging.hpp"
#include "test_util.hpp"

using namespace stagekit;

namespace {

// ---- scalar oracles, written straight from the loss definitions -------------

double oracle_term1(double p, double g, double mu) {
  // -mu * log( p^g / (1-p)^(g-1) )
  return -mu * std::log(std::pow(p, g) / std::pow(1 - p, g - 1));
}

double oracle_pstg(const std::vector<double>& pc, const std::vector<double>& pr) {
  double m = -1;
  for (std::size_t i = 0; i < pc.size(); ++i) m = std::max(m, pc[i] * (1 - pr[i]));
  return m;
}

double oracle_staging_loss(const std::vector<std::vector<double>>& pcs, const std::vector<std::vector<double>>& prs,
                           const std::vector<double>& gs, double mu, double alpha) {
  double t1 = 0, a = 0, b = 0;
  for (std::size_t k = 0; k < pcs.size(); ++k) {
    double p = std::clamp(oracle_pstg(pcs[k], prs[k]), 1e-7, 1 - 1e-7);
    t1 += oracle_term1(p, gs[k], mu);
    for (std::size_t i = 0; i < pcs[k].size(); ++i) {
      a += pcs[k][i] * (1 - prs[k][i]) * (1 - gs[k]);
      b += pcs[k][i] * (1 - prs[k][i]) * (1 + gs[k]);
    }
  }
  return t1 / static_cast<double>(pcs.size()) + (a + alpha) / (a + b + alpha);
}

// ---- finite differences ------------------------------------------------------

struct GradCheck {
  double worst = 0;
  void compare(double analytic, double numeric) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale > 1e-7)
      worst = std::max(worst, std::abs(analytic - numeric) / scale);
    else
      worst = std::max(worst, std::abs(analytic - numeric) > 1e-9 ? 1.0 : 0.0);
  }
};

double central_difference(std::vector<double>& x, std::size_t i, const std::function<double()>& f, double h = 1e-4) {
  const double keep = x[i];
  x[i] = keep + h;
  const double up = f();
  x[i] = keep - h;
  const double down = f();
  x[i] = keep;
  return (up - down) / (2 * h);
}

ProbabilityMaps random_maps(Shape3 s, std::mt19937_64& rng, double lo = 0.02, double hi = 0.98) {
  std::uniform_real_distribution<double> u(lo, hi);
  ProbabilityMaps p(s);
  for (auto& ch : p.channels)
    for (auto& v : ch) v = u(rng);
  return p;
}

LabelVolume random_labels(Shape3 s, std::mt19937_64& rng) {
  LabelVolume l(s, {1, 1, 1});
  std::uniform_int_distribution<int> b(0, 7);
  for (auto& v : l.data) v = static_cast<std::uint8_t>(b(rng));
  return l;
}

}  // namespace

TEST_CASE("dice_loss examples") {
  SUBCASE("perfect overlap") {
    std::vector<double> p(64, 0.0);
    for (std::size_t i = 0; i < 20; ++i) p[i] = 1.0;
    CHECK(soft_dice_loss(p, p) < 1e-5);
  }
  SUBCASE("both empty") {
    std::vector<double> z(64, 0.0);
    CHECK(soft_dice_loss(z, z) == 0.0);
  }
  SUBCASE("p = 1 everywhere, g covers half of N = 64") {
    std::vector<double> p(64, 1.0), g(64, 0.0);
    for (std::size_t i = 0; i < 32; ++i) g[i] = 1.0;
    CHECK(soft_dice_loss(p, g) == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
  }
  SUBCASE("three-channel mean of perfect labels") {
    std::mt19937_64 rng(1);
    const auto l = random_labels({4, 4, 4}, rng);
    CHECK(dice_loss(probabilities_from_labels(l), l) < 1e-5);
  }
}

TEST_CASE("dice_loss on binary p equals 1 - dice_score") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const Mask a = stagekit::testing::random_mask({4, 4, 4}, 0.4, rng);
    const Mask b = stagekit::testing::random_mask({4, 4, 4}, 0.5, rng);
    std::vector<double> p(a.data.begin(), a.data.end()), g(b.data.begin(), b.data.end());
    CHECK(std::abs(soft_dice_loss(p, g) - (1.0 - dice_score(a, b))) < 1e-6);
  }
}

TEST_CASE("staging_probability examples") {
  std::vector<double> zeros(27, 0.0), ones(27, 1.0), half(27, 0.5);
  CHECK(staging_probability(zeros, half) == 0.0);
  CHECK(staging_probability(ones, ones) == 0.0);
  CHECK(staging_probability(half, ones, StagingMax::Smooth) == 0.0);
  std::vector<double> c{0.9}, r{0.8};
  CHECK(staging_probability(c, r) == doctest::Approx(0.9 * (1 - 0.8)).epsilon(1e-12));
  CHECK(staging_probability(c, r) == doctest::Approx(0.18));
  CHECK_THROWS_AS(staging_probability(std::vector<double>{}, std::vector<double>{}), ValidationError);
}

TEST_CASE("smooth staging probability stays within the range of voxel values") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> c(4096), r(4096);
    for (auto& v : c) v = u(rng);
    for (auto& v : r) v = u(rng);
    const double hard = staging_probability(c, r, StagingMax::Hard);
    const double smooth = staging_probability(c, r, StagingMax::Smooth);
    CHECK(smooth <= hard + 1e-15);
    CHECK(smooth > 0.5 * hard);
  }
}

TEST_CASE("invasion_probabilities") {
  std::vector<double> c{0.5, 0.2, 1.0}, r{0.5, 0.9, 0.0};
  SUBCASE("OVER_T3 zeroes the T2 map") {
    const auto inv = invasion_probabilities(c, r, StageLabel::OverT3);
    for (double v : inv.t2) CHECK(v == 0.0);
    CHECK(inv.t3[0] == doctest::Approx(0.5));
    CHECK(inv.t3[2] == doctest::Approx(2.0));
  }
  SUBCASE("UNDER_T2 makes both maps equal") {
    const auto inv = invasion_probabilities(c, r, StageLabel::UnderT2);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(inv.t3[i] == inv.t2[i]);
  }
}

TEST_CASE("staging_terms invariants") {
  std::mt19937_64 rng(4);
  const auto a = random_maps({4, 4, 4}, rng), b = random_maps({4, 4, 4}, rng);
  const auto t = staging_terms({{a, StageLabel::OverT3}, {b, StageLabel::UnderT2}});
  CHECK(t.g_stg == std::vector<double>{1.0, 0.0});
  for (double v : t.invasion[0].t2) CHECK(v == 0.0);
  for (std::size_t i = 0; i < t.invasion[1].t2.size(); ++i) {
    CHECK(t.invasion[1].t2[i] >= 0.0);
    CHECK(t.invasion[1].t3[i] == doctest::Approx(t.invasion[1].t2[i]));
  }
  for (double p : t.p_stg) {
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
}

TEST_CASE("staging_loss examples") {
  LossConfig cfg;
  cfg.max_mode = StagingMax::Hard;
  SUBCASE("UNDER_T2 with no cancer is exactly the ratio floor") {
    ProbabilityMaps p(Shape3{2, 2, 2}, 0.0);
    const auto v = staging_loss({{p, StageLabel::UnderT2}}, cfg);
    CHECK(v.bce == doctest::Approx(-0.1 * std::log(1 - 1e-7)).epsilon(1e-9));
    CHECK(v.bce < 1e-7);
    CHECK(v.ratio == 1.0);
    CHECK(std::abs(v.total() - 1.0) < 1e-7);
  }
  SUBCASE("OVER_T3 with one certain invasion voxel") {
    ProbabilityMaps p(Shape3{1, 1, 1}, 0.0);
    p[Channel::Cancer][0] = 1.0;
    const auto v = staging_loss({{p, StageLabel::OverT3}}, cfg);
    CHECK(v.bce < 1e-7);
    CHECK(v.ratio == doctest::Approx(500.0 / 502.0).epsilon(1e-12));
    CHECK(v.ratio == doctest::Approx(0.99602).epsilon(1e-5));
  }
  SUBCASE("mixed batch of 0.5 maps matches the scalar oracle") {
    ProbabilityMaps p(Shape3{2, 2, 2}, 0.5);
    for (StagingMax mode : {StagingMax::Hard, StagingMax::Smooth}) {
      cfg.max_mode = mode;
      const auto v = staging_loss({{p, StageLabel::OverT3}, {p, StageLabel::UnderT2}}, cfg);
      const std::vector<double> c(8, 0.5), r(8, 0.5);
      CHECK(std::abs(v.total() - oracle_staging_loss({c, c}, {r, r}, {1.0, 0.0}, 0.1, 500.0)) < 1e-12);
    }
  }
  SUBCASE("empty batch") { CHECK_THROWS_AS(staging_loss({}, cfg), ValidationError); }
}

TEST_CASE("term1 equals mu-scaled binary cross-entropy") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(1e-3, 1 - 1e-3);
  std::bernoulli_distribution coin(0.5);
  LossConfig cfg;
  cfg.max_mode = StagingMax::Hard;
  cfg.alpha = 0.0;
  for (int t = 0; t < 100; ++t) {
    const double p = u(rng);
    const double g = coin(rng) ? 1.0 : 0.0;
    ProbabilityMaps m(Shape3{1, 1, 1}, 0.0);
    m[Channel::Cancer][0] = p;
    const auto v = staging_loss({{m, g == 1.0 ? StageLabel::OverT3 : StageLabel::UnderT2}}, cfg);
    CHECK(std::abs(v.bce - oracle_term1(p, g, cfg.mu)) < 1e-10);
  }
}

TEST_CASE("staging quantities match brute force on random 4^3 volumes") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    const auto m = random_maps({4, 4, 4}, rng, 0.0, 1.0);
    const auto& c = m[Channel::Cancer];
    const auto& r = m[Channel::Rectum];
    CHECK(std::abs(staging_probability(c, r) - oracle_pstg(c, r)) < 1e-10);
    for (StageLabel s : {StageLabel::UnderT2, StageLabel::OverT3}) {
      const double g = s == StageLabel::OverT3 ? 1.0 : 0.0;
      const auto inv = invasion_probabilities(c, r, s);
      for (std::size_t i = 0; i < c.size(); ++i) {
        CHECK(std::abs(inv.t2[i] - c[i] * (1 - r[i]) * (1 - g)) < 1e-10);
        CHECK(std::abs(inv.t3[i] - c[i] * (1 - r[i]) * (1 + g)) < 1e-10);
      }
    }
  }
}

TEST_CASE("analytic gradients match central differences") {
  std::mt19937_64 rng(7);
  const Shape3 s{4, 4, 4};

  SUBCASE("dice_loss") {
    GradCheck check;
    for (int t = 0; t < 20; ++t) {
      auto p = random_maps(s, rng);
      const auto g = random_labels(s, rng);
      ProbabilityMaps grad;
      dice_loss(p, g, 1e-6, &grad);
      for (int c = 0; c < kOutputChannels; ++c)
        for (std::size_t i = 0; i < s.voxels(); ++i)
          check.compare(grad.channels[c][i], central_difference(p.channels[c], i, [&] { return dice_loss(p, g); }));
    }
    CHECK(check.worst < 1e-3);
  }
  SUBCASE("smooth staging_probability") {
    GradCheck check;
    for (int t = 0; t < 20; ++t) {
      auto p = random_maps(s, rng);
      auto& c = p[Channel::Cancer];
      auto& r = p[Channel::Rectum];
      std::vector<double> gc(c.size()), gr(c.size());
      staging_probability(c, r, StagingMax::Smooth, 50.0, gc, gr);
      auto f = [&] { return staging_probability(c, r, StagingMax::Smooth, 50.0); };
      for (std::size_t i = 0; i < c.size(); ++i) {
        check.compare(gc[i], central_difference(c, i, f));
        check.compare(gr[i], central_difference(r, i, f));
      }
    }
    CHECK(check.worst < 1e-3);
  }
  SUBCASE("staging_loss") {
    GradCheck check;
    for (int t = 0; t < 20; ++t) {
      LossConfig cfg;
      cfg.alpha = t % 2 ? 500.0 : 5.0;
      std::vector<ProbabilityMaps> maps{random_maps(s, rng), random_maps(s, rng), random_maps(s, rng)};
      const std::vector<StageLabel> stages{StageLabel::OverT3, StageLabel::UnderT2,
                                           t % 3 ? StageLabel::OverT3 : StageLabel::UnderT2};
      auto batch = [&] {
        std::vector<StagedSample> b;
        for (std::size_t k = 0; k < maps.size(); ++k) b.push_back({maps[k], stages[k]});
        return b;
      };
      std::vector<ProbabilityMaps> grads;
      staging_loss(batch(), cfg, &grads);
      auto f = [&] { return staging_loss(batch(), cfg).total(); };
      for (std::size_t k = 0; k < maps.size(); ++k)
        for (Channel ch : {Channel::Cancer, Channel::Rectum})
          for (std::size_t i = 0; i < s.voxels(); ++i)
            check.compare(grads[k][ch][i], central_difference(maps[k][ch], i, f));
      for (const auto& g : grads)
        for (double v : g[Channel::Mesorectum]) CHECK(v == 0.0);
    }
    CHECK(check.worst < 1e-3);
  }
  SUBCASE("total_loss") {
    GradCheck check;
    for (int t = 0; t < 5; ++t) {
      LossConfig cfg;
      cfg.alpha = 3.0;
      std::vector<ProbabilityMaps> lab{random_maps(s, rng), random_maps(s, rng)};
      std::vector<ProbabilityMaps> stg{random_maps(s, rng)};
      const std::vector<LabelVolume> gt{random_labels(s, rng), random_labels(s, rng)};
      auto run = [&](LossGradients* g) {
        std::vector<LabeledSample> l{{lab[0], gt[0], StageLabel::OverT3}, {lab[1], gt[1], std::nullopt}};
        std::vector<StagedSample> so{{stg[0], StageLabel::UnderT2}};
        return total_loss(l, so, cfg, g).total;
      };
      LossGradients grads;
      run(&grads);
      auto f = [&] { return run(nullptr); };
      for (std::size_t k = 0; k < lab.size(); ++k)
        for (int c = 0; c < kOutputChannels; ++c)
          for (std::size_t i = 0; i < s.voxels(); ++i)
            check.compare(grads.labeled[k].channels[c][i], central_difference(lab[k].channels[c], i, f));
      for (int c = 0; c < kOutputChannels; ++c)
        for (std::size_t i = 0; i < s.voxels(); ++i)
          check.compare(grads.stage_only[0].channels[c][i], central_difference(stg[0].channels[c], i, f));
    }
    CHECK(check.worst < 1e-3);
  }
}

TEST_CASE("ratio term direction") {
  LossConfig cfg;  // alpha = 500
  const Shape3 s{8, 8, 8};
  auto fill = [&](double cancer) {
    ProbabilityMaps p(s, 0.0);
    std::fill(p[Channel::Cancer].begin(), p[Channel::Cancer].end(), cancer);
    return p;
  };
  auto ratio = [&](const ProbabilityMaps& t3, const ProbabilityMaps& t2) {
    return staging_loss({{t3, StageLabel::OverT3}, {t2, StageLabel::UnderT2}}, cfg).ratio;
  };
  auto bump = [](ProbabilityMaps p, double h) {
    p[Channel::Cancer][0] += h;
    return p;
  };

  for (double t3_level : {0.05, 0.9}) {
    const ProbabilityMaps t3 = fill(t3_level), t2 = fill(0.1);
    const double h = 1e-4;
    // more invasion in an OVER_T3 case always lowers the ratio
    CHECK(ratio(bump(t3, h), t2) - ratio(bump(t3, -h), t2) < 0);
    {
      // more invasion in an UNDER_T2 case raises the ratio iff sum_t3 - sum_t2 > alpha
      const auto terms = staging_terms({{t3, StageLabel::OverT3}, {t2, StageLabel::UnderT2}}, cfg);
      double a = 0, b = 0;
      for (const auto& inv : terms.invasion) {
        for (double v : inv.t2) a += v;
        for (double v : inv.t3) b += v;
      }
      const double diff = ratio(t3, bump(t2, h)) - ratio(t3, bump(t2, -h));
      CHECK((diff > 0) == (b - a > cfg.alpha));
      if (t3_level > 0.5) CHECK(b - a > cfg.alpha);
      else CHECK(b - a < cfg.alpha);
    }
  }
}

TEST_CASE("total_loss composition") {
  std::mt19937_64 rng(9);
  const Shape3 s{4, 4, 4};
  const auto gt = random_labels(s, rng);
  const auto perfect = probabilities_from_labels(gt);
  const auto other = random_maps(s, rng);
  LossConfig cfg;

  SUBCASE("labeled only with p = g adds lambda times the staging loss of the labeled stages") {
    const auto b = total_loss({{perfect, gt, StageLabel::OverT3}}, {}, cfg);
    const auto stg = staging_loss({{perfect, StageLabel::OverT3}}, cfg);
    CHECK(b.seg_loss < 1e-5);
    CHECK(b.total == doctest::Approx(b.seg_loss + cfg.lambda * stg.total()).epsilon(1e-12));
  }
  SUBCASE("stage-only batch is lambda times the staging loss") {
    const auto b = total_loss({}, {{other, StageLabel::UnderT2}}, cfg);
    const auto stg = staging_loss({{other, StageLabel::UnderT2}}, cfg);
    CHECK(b.seg_loss == 0.0);
    CHECK(b.total == doctest::Approx(cfg.lambda * stg.total()).epsilon(1e-12));
  }
  SUBCASE("lambda = 0 reduces to the segmentation loss exactly") {
    cfg.lambda = 0.0;
    const auto b = total_loss({{other, gt, StageLabel::OverT3}}, {{other, StageLabel::UnderT2}}, cfg);
    CHECK(b.total == b.seg_loss);
    CHECK(b.total == dice_loss(other, gt));
  }
  SUBCASE("no supervision") { CHECK_THROWS_AS(total_loss({}, {}, cfg), ValidationError); }
}
