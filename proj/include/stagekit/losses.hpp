#pragma once

#include <optional>
#include <span>
#include <vector>

#include "stagekit/volume.hpp"

namespace stagekit {

/// How the per-case staging probability reduces over voxels.
enum class StagingMax {
  /// max_i q_i; the gradient reaches only the arg-max voxel.
  Hard,
  /// Boltzmann-weighted mean sum_i q_i w_i with w = softmax(tau * q). Stays
  /// inside [min q, max q], unlike a raw log-sum-exp whose log(N)/tau bias
  /// would push p_STG past 1 on large volumes.
  Smooth,
};

struct LossConfig {
  double lambda = 0.1;
  double mu = 0.1;
  double alpha = 500.0;
  double dice_eps = 1e-6;
  /// log arguments are clamped to [prob_clamp, 1 - prob_clamp].
  double prob_clamp = 1e-7;
  StagingMax max_mode = StagingMax::Smooth;
  double tau = 50.0;
};

/// Soft Dice loss of one channel: 1 - (2 sum p g + eps) / (sum p + sum g + eps).
/// Writes dL/dp into `grad` when it is non-empty.
double soft_dice_loss(std::span<const double> p, std::span<const double> g, double eps = 1e-6,
                      std::span<double> grad = {});

/// Mean soft Dice loss over the mesorectum, rectum and cancer channels.
double dice_loss(const ProbabilityMaps& p, const LabelVolume& g, double eps = 1e-6, ProbabilityMaps* grad = nullptr);

/// p_STG = max_i p_cancer,i * (1 - p_rectum,i), hard or smooth. Gradients w.r.t.
/// both inputs are written when the spans are non-empty.
double staging_probability(std::span<const double> p_cancer, std::span<const double> p_rectum,
                           StagingMax mode = StagingMax::Hard, double tau = 50.0,
                           std::span<double> grad_cancer = {}, std::span<double> grad_rectum = {});

struct InvasionProbabilities {
  std::vector<double> t2;  ///< p_cancer (1 - p_rectum) (1 - g)
  std::vector<double> t3;  ///< p_cancer (1 - p_rectum) (1 + g)
};

InvasionProbabilities invasion_probabilities(std::span<const double> p_cancer, std::span<const double> p_rectum,
                                             StageLabel stage);

struct StagedSample {
  const ProbabilityMaps& probs;
  StageLabel stage;
};

struct LabeledSample {
  const ProbabilityMaps& probs;
  const LabelVolume& labels;
  std::optional<StageLabel> stage;
};

/// Every intermediate of the staging loss for one batch.
struct StagingTerms {
  std::vector<double> p_stg;  ///< per case
  std::vector<double> g_stg;  ///< per case, 0 or 1
  std::vector<InvasionProbabilities> invasion;  ///< per case
  double mu = 0, alpha = 0;
};

StagingTerms staging_terms(const std::vector<StagedSample>& batch, const LossConfig& cfg = {});

struct StagingLossValue {
  double bce = 0;    ///< mean over cases of -mu [g log p + (1-g) log(1-p)]
  double ratio = 0;  ///< (sum t2 + alpha) / (sum t2 + sum t3 + alpha), pooled over the batch
  double total() const { return bce + ratio; }
};

/// T-staging loss over a batch. Invasion sums are pooled over every voxel of
/// every case in the batch. When `grads` is given it is resized to the batch
/// and receives dLoss/dp for the rectum and cancer channels of each case.
StagingLossValue staging_loss(const std::vector<StagedSample>& batch, const LossConfig& cfg = {},
                              std::vector<ProbabilityMaps>* grads = nullptr);

struct LossBreakdown {
  double seg_loss = 0;
  double stg_bce = 0;
  double stg_ratio = 0;
  double total = 0;
  double lambda = 0;
};

struct LossGradients {
  std::vector<ProbabilityMaps> labeled;
  std::vector<ProbabilityMaps> stage_only;
};

/// seg_loss is the mean Dice loss over labeled samples; the staging loss runs
/// over every sample with a stage (labeled ones included). Either part is zero
/// when its sample set is empty.
LossBreakdown total_loss(const std::vector<LabeledSample>& labeled, const std::vector<StagedSample>& stage_only,
                         const LossConfig& cfg = {}, LossGradients* grads = nullptr);

}  // namespace stagekit
