#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stagekit/volume.hpp"

namespace stagekit {

struct StagingRule {
  /// Probabilities strictly above this are foreground.
  double threshold = 0.5;
  /// OVER_T3 iff at least this many voxels are cancer and not rectum.
  std::size_t min_invasion_voxels = 1;
};

/// Voxelwise cancer AND NOT rectum.
Mask invasion_mask(const Mask& cancer, const Mask& rectum);

StageLabel classify_stage(const ProbabilityMaps& pred, const StagingRule& rule = {});
StageLabel classify_stage(const LabelVolume& labels, const StagingRule& rule = {});

/// 2|P∩G| / (|P|+|G|); two empty masks score 1.
double dice_score(const Mask& pred, const Mask& gt);

struct Confusion {
  std::optional<double> sensitivity;  ///< correct OVER_T3 / ground-truth OVER_T3
  std::optional<double> specificity;  ///< correct UNDER_T2 / ground-truth UNDER_T2
};

/// Pairs are (predicted, ground truth).
Confusion staging_confusion(const std::vector<std::pair<StageLabel, StageLabel>>& pairs);

struct DiceColumns {
  std::optional<double> mesorectum, rectum, cancer, invasion_area;
};

struct CaseStage {
  std::string id;
  StageLabel predicted;
  StageLabel ground_truth;
};

struct StagingReport {
  DiceColumns dice;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::vector<CaseStage> per_case_stages;
  std::size_t labeled_cases = 0;
};

/// Per-class Dice averaged over refs carrying labels (invasion area compares the
/// invasion masks of prediction and ground truth) and staging metrics over refs
/// with a known stage. A labeled ref without an explicit stage uses the stage of
/// its ground-truth labels.
StagingReport evaluate_cases(const std::vector<ProbabilityMaps>& preds, const std::vector<Case>& refs,
                             const StagingRule& rule = {});

nlohmann::json to_json(const StagingReport& r);
StagingReport report_from_json(const nlohmann::json& j);

}  // namespace stagekit
