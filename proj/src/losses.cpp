#include "stagekit/losses.hpp"

#include <algorithm>
#include <cmath>

namespace stagekit {

double soft_dice_loss(std::span<const double> p, std::span<const double> g, double eps, std::span<double> grad) {
  if (p.size() != g.size()) throw ShapeError("soft_dice_loss: p and g sizes differ");
  double inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * g[i];
    sp += p[i];
    sg += g[i];
  }
  const double num = 2 * inter + eps;
  const double den = sp + sg + eps;
  if (!grad.empty()) {
    if (grad.size() != p.size()) throw ShapeError("soft_dice_loss: gradient buffer size differs");
    // d/dp_i [-(num/den)] = -(2 g_i den - num) / den^2
    const double inv_den2 = 1.0 / (den * den);
    for (std::size_t i = 0; i < p.size(); ++i) grad[i] = -(2 * g[i] * den - num) * inv_den2;
  }
  return 1.0 - num / den;
}

double dice_loss(const ProbabilityMaps& p, const LabelVolume& g, double eps, ProbabilityMaps* grad) {
  if (!(p.shape == g.shape)) throw ShapeError("dice_loss: prediction and label shapes differ");
  static constexpr LabelBit bits[kOutputChannels] = {LabelBit::Mesorectum, LabelBit::Rectum, LabelBit::Cancer};
  if (grad) *grad = ProbabilityMaps(p.shape);
  double total = 0;
  std::vector<double> gt(p.shape.voxels());
  for (int c = 0; c < kOutputChannels; ++c) {
    const std::uint8_t v = bit_value(bits[c]);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = (g.data[i] & v) ? 1.0 : 0.0;
    std::span<double> gc;
    if (grad) gc = grad->channels[c];
    total += soft_dice_loss(p.channels[c], gt, eps, gc);
  }
  if (grad)
    for (auto& ch : grad->channels)
      for (auto& x : ch) x /= kOutputChannels;
  return total / kOutputChannels;
}

double staging_probability(std::span<const double> p_cancer, std::span<const double> p_rectum, StagingMax mode,
                           double tau, std::span<double> grad_cancer, std::span<double> grad_rectum) {
  if (p_cancer.size() != p_rectum.size()) throw ShapeError("staging_probability: input sizes differ");
  if (p_cancer.empty()) throw ValidationError("staging_probability: empty volume");
  const std::size_t n = p_cancer.size();
  const bool want_grad = !grad_cancer.empty() || !grad_rectum.empty();
  if (want_grad && (grad_cancer.size() != n || grad_rectum.size() != n))
    throw ShapeError("staging_probability: gradient buffer sizes differ");

  double qmax = -1.0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = p_cancer[i] * (1 - p_rectum[i]);
    if (q > qmax) {
      qmax = q;
      arg = i;
    }
  }

  if (mode == StagingMax::Hard) {
    if (want_grad) {
      std::fill(grad_cancer.begin(), grad_cancer.end(), 0.0);
      std::fill(grad_rectum.begin(), grad_rectum.end(), 0.0);
      grad_cancer[arg] = 1 - p_rectum[arg];
      grad_rectum[arg] = -p_cancer[arg];
    }
    return qmax;
  }

  // Boltzmann operator: S = sum q_i w_i / sum w_i, w_i = exp(tau (q_i - qmax)).
  double z = 0, s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = p_cancer[i] * (1 - p_rectum[i]);
    const double w = std::exp(tau * (q - qmax));
    z += w;
    s += q * w;
  }
  s /= z;
  if (want_grad) {
    for (std::size_t i = 0; i < n; ++i) {
      const double q = p_cancer[i] * (1 - p_rectum[i]);
      const double dq = std::exp(tau * (q - qmax)) / z * (1 + tau * (q - s));
      grad_cancer[i] = dq * (1 - p_rectum[i]);
      grad_rectum[i] = -dq * p_cancer[i];
    }
  }
  return s;
}

InvasionProbabilities invasion_probabilities(std::span<const double> p_cancer, std::span<const double> p_rectum,
                                             StageLabel stage) {
  if (p_cancer.size() != p_rectum.size()) throw ShapeError("invasion_probabilities: input sizes differ");
  const double g = stage_indicator(stage);
  InvasionProbabilities out;
  out.t2.resize(p_cancer.size());
  out.t3.resize(p_cancer.size());
  for (std::size_t i = 0; i < p_cancer.size(); ++i) {
    const double q = p_cancer[i] * (1 - p_rectum[i]);
    out.t2[i] = q * (1 - g);
    out.t3[i] = q * (1 + g);
  }
  return out;
}

StagingTerms staging_terms(const std::vector<StagedSample>& batch, const LossConfig& cfg) {
  StagingTerms t;
  t.mu = cfg.mu;
  t.alpha = cfg.alpha;
  for (const auto& s : batch) {
    const auto& pc = s.probs[Channel::Cancer];
    const auto& pr = s.probs[Channel::Rectum];
    t.p_stg.push_back(staging_probability(pc, pr, cfg.max_mode, cfg.tau));
    t.g_stg.push_back(stage_indicator(s.stage));
    t.invasion.push_back(invasion_probabilities(pc, pr, s.stage));
  }
  return t;
}

StagingLossValue staging_loss(const std::vector<StagedSample>& batch, const LossConfig& cfg,
                              std::vector<ProbabilityMaps>* grads) {
  if (batch.empty()) throw ValidationError("staging_loss: batch has no stage-labelled case");
  const double k = static_cast<double>(batch.size());
  const double lo = cfg.prob_clamp, hi = 1 - cfg.prob_clamp;

  StagingLossValue v;
  double sum_t2 = 0, sum_t3 = 0;
  std::vector<double> p_stg(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& pc = batch[b].probs[Channel::Cancer];
    const auto& pr = batch[b].probs[Channel::Rectum];
    if (pc.size() != pr.size()) throw ShapeError("staging_loss: channel sizes differ");
    const double g = stage_indicator(batch[b].stage);
    p_stg[b] = staging_probability(pc, pr, cfg.max_mode, cfg.tau);
    const double p = std::clamp(p_stg[b], lo, hi);
    v.bce += -cfg.mu * (g * std::log(p) + (1 - g) * std::log(1 - p)) / k;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      const double q = pc[i] * (1 - pr[i]);
      sum_t2 += q * (1 - g);
      sum_t3 += q * (1 + g);
    }
  }
  const double den = sum_t2 + sum_t3 + cfg.alpha;
  v.ratio = (sum_t2 + cfg.alpha) / den;

  if (grads) {
    grads->clear();
    grads->reserve(batch.size());
    // d ratio / d sum_t2 = sum_t3 / den^2 ; d ratio / d sum_t3 = -(sum_t2 + alpha) / den^2
    const double d_t2 = sum_t3 / (den * den);
    const double d_t3 = -(sum_t2 + cfg.alpha) / (den * den);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& probs = batch[b].probs;
      const auto& pc = probs[Channel::Cancer];
      const auto& pr = probs[Channel::Rectum];
      const double g = stage_indicator(batch[b].stage);
      ProbabilityMaps grad(probs.shape);
      auto& gc = grad[Channel::Cancer];
      auto& gr = grad[Channel::Rectum];

      // BCE on the clamped staging probability; zero slope where clamped.
      double d_bce = 0;
      if (p_stg[b] > lo && p_stg[b] < hi) d_bce = -cfg.mu * (g / p_stg[b] - (1 - g) / (1 - p_stg[b])) / k;
      if (d_bce != 0) {
        staging_probability(pc, pr, cfg.max_mode, cfg.tau, gc, gr);
        for (std::size_t i = 0; i < gc.size(); ++i) {
          gc[i] *= d_bce;
          gr[i] *= d_bce;
        }
      }
      const double d_q = (1 - g) * d_t2 + (1 + g) * d_t3;
      for (std::size_t i = 0; i < pc.size(); ++i) {
        gc[i] += d_q * (1 - pr[i]);
        gr[i] += -d_q * pc[i];
      }
      grads->push_back(std::move(grad));
    }
  }
  return v;
}

LossBreakdown total_loss(const std::vector<LabeledSample>& labeled, const std::vector<StagedSample>& stage_only,
                         const LossConfig& cfg, LossGradients* grads) {
  if (labeled.empty() && stage_only.empty()) throw ValidationError("total_loss: no supervision in batch");
  LossBreakdown out;
  out.lambda = cfg.lambda;
  if (grads) {
    grads->labeled.clear();
    grads->stage_only.clear();
  }

  const double n_lab = static_cast<double>(labeled.size());
  for (const auto& s : labeled) {
    ProbabilityMaps g;
    out.seg_loss += dice_loss(s.probs, s.labels, cfg.dice_eps, grads ? &g : nullptr) / n_lab;
    if (grads) {
      for (auto& ch : g.channels)
        for (auto& x : ch) x /= n_lab;
      grads->labeled.push_back(std::move(g));
    }
  }
  if (grads)
    for (const auto& s : stage_only) grads->stage_only.emplace_back(s.probs.shape);

  // Staging supervision covers stage-only samples and labeled samples with a known stage.
  std::vector<StagedSample> staged;
  std::vector<std::pair<bool, std::size_t>> origin;  // (is_labeled, index)
  for (std::size_t i = 0; i < labeled.size(); ++i)
    if (labeled[i].stage) {
      staged.push_back({labeled[i].probs, *labeled[i].stage});
      origin.emplace_back(true, i);
    }
  for (std::size_t i = 0; i < stage_only.size(); ++i) {
    staged.push_back(stage_only[i]);
    origin.emplace_back(false, i);
  }

  if (!staged.empty() && cfg.lambda != 0) {
    std::vector<ProbabilityMaps> sg;
    const auto v = staging_loss(staged, cfg, grads ? &sg : nullptr);
    out.stg_bce = v.bce;
    out.stg_ratio = v.ratio;
    if (grads) {
      for (std::size_t j = 0; j < staged.size(); ++j) {
        auto& dst = origin[j].first ? grads->labeled[origin[j].second] : grads->stage_only[origin[j].second];
        for (int c = 0; c < kOutputChannels; ++c)
          for (std::size_t i = 0; i < dst.channels[c].size(); ++i)
            dst.channels[c][i] += cfg.lambda * sg[j].channels[c][i];
      }
    }
  }
  out.total = out.seg_loss + cfg.lambda * (out.stg_bce + out.stg_ratio);
  return out;
}

}  // namespace stagekit
