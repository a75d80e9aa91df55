#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "stagekit/losses.hpp"
#include "stagekit/phantom.hpp"
#include "stagekit/preprocess.hpp"
#include "stagekit/segnet.hpp"
#include "stagekit/staging.hpp"

namespace stagekit {

struct TrainConfig {
  double lr = 0.003;  ///< Adam
  double lambda = 0.1;
  double mu = 0.1;
  double alpha = 500;
  int batch_labeled = 4;
  int batch_stage_only = 2;
  int max_iterations = 2000;
  int validation_interval = 100;
  std::uint64_t seed = 0;
  CropConfig crops = CropConfig::phantom();
  double target_spacing_mm = 0.5;
  LossConfig loss_base;  ///< smooth-max settings and clamps; lambda/mu/alpha come from above

  /// Full-resolution settings: 80000 iterations and the large crops.
  static TrainConfig full_scale();
  LossConfig loss() const;
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Records which case ids were read, by whom and for what.
struct AuditEntry {
  std::int64_t iteration = 0;
  std::string pool;
  std::string case_id;
  std::string purpose;  ///< "train", "validation" or "test"
  std::string run;      ///< ablation row / fold tag
};

class AuditLog {
 public:
  void record(AuditEntry e) { entries_.push_back(std::move(e)); }
  /// Repeated identical events are kept once.
  void note(std::string event) {
    if (std::find(events_.begin(), events_.end(), event) == events_.end()) events_.push_back(std::move(event));
  }
  const std::vector<AuditEntry>& entries() const { return entries_; }
  const std::vector<std::string>& events() const { return events_; }
  /// Pools touched by entries whose run tag starts with `run_prefix`.
  std::vector<std::string> pools_used(const std::string& run_prefix = "") const;
  void write_jsonl(const std::filesystem::path& path) const;

 private:
  std::vector<AuditEntry> entries_;
  std::vector<std::string> events_;
};

/// A raw case together with the pool it came from.
struct PoolCase {
  std::string pool;
  Case data;
};

/// Resample, crop and normalize. Training crops centre on the cancer label when
/// there is one and on the volume centre otherwise; evaluation crops always use
/// the volume centre.
Case prepare_case(const Case& c, Phase phase, const TrainConfig& cfg);

/// Thresholded prediction for a raw case on its isotropic (resampled) grid:
/// the evaluation crop is predicted and pasted back, voxels outside it stay background.
LabelVolume predict_labels(SegNet& net, const Case& c, const TrainConfig& cfg, double threshold = 0.5);

struct FoldPlan {
  int k = 5;
  std::map<std::string, int> assignments;  ///< case id -> fold
  std::vector<std::vector<std::string>> folds;

  int validation_fold(int test_fold) const { return (test_fold + 1) % k; }
  std::vector<int> training_folds(int test_fold) const;
};

FoldPlan kfold_split(const std::vector<std::string>& case_ids, int k, std::uint64_t seed);

struct TrainBatch {
  std::vector<Case> labeled;     ///< preprocessed
  std::vector<Case> stage_only;  ///< preprocessed
  bool stage_only_fallback = false;
  std::vector<std::string> ids() const;
};

/// Samples batch_labeled labeled and batch_stage_only stage-only cases without
/// replacement and preprocesses them. An empty stage-only pool yields a
/// labeled-only batch and is noted in the audit log.
TrainBatch compose_batch(const std::vector<const PoolCase*>& labeled_pool,
                         const std::vector<const PoolCase*>& stage_only_pool, const TrainConfig& cfg,
                         std::mt19937_64& rng, AuditLog* audit = nullptr, std::int64_t iteration = 0,
                         const std::string& run = "");

/// One Adam update from the combined loss. Throws TrainingError naming the
/// batch ids when the loss is not finite.
LossBreakdown train_step(SegNet& net, torch::optim::Adam& opt, const TrainBatch& batch, const TrainConfig& cfg);

struct ValidationScore {
  std::int64_t iteration = 0;
  std::array<double, 3> dice{};  ///< mesorectum, rectum, cancer
  double mean() const { return (dice[0] + dice[1] + dice[2]) / 3.0; }
};

/// Mean per-class Dice of thresholded predictions over preprocessed labeled cases.
ValidationScore validate_model(SegNet& net, const std::vector<Case>& prepared);

struct MetricsRow {
  std::int64_t iteration = 0;
  LossBreakdown loss;
  std::optional<ValidationScore> validation;
};

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

struct FitData {
  std::vector<const PoolCase*> labeled_train;
  std::vector<const PoolCase*> stage_only;
  std::vector<const PoolCase*> validation;
};

struct FitOptions {
  std::optional<std::filesystem::path> checkpoint_dir;  ///< saves every validated iteration plus best.ckpt
  std::optional<std::filesystem::path> metrics_csv;
  AuditLog* audit = nullptr;
  std::string run;
  bool verbose = false;
};

struct FitResult {
  SegNet net{nullptr};  ///< holds the best weights
  std::int64_t best_iteration = 0;
  double best_validation_dice = 0;
  std::vector<ValidationScore> history;
  std::vector<MetricsRow> metrics;
  std::vector<std::filesystem::path> saved_checkpoints;
};

FitResult fit(const FitData& data, const TrainConfig& cfg, const SegNetConfig& net_cfg, const FitOptions& opt = {});

/// Pools each dataset role reads; used by the ablation rows.
struct AblationRowSpec {
  std::string name;
  bool stage_loss = false;
  bool augmentation = false;
  std::vector<std::string> pools() const;
};

std::vector<AblationRowSpec> ablation_rows();

struct AblationRow {
  AblationRowSpec spec;
  StagingReport report;
  std::vector<std::int64_t> best_iterations;  ///< per fold
};

struct AblationResult {
  std::vector<AblationRow> rows;
  AuditLog audit;
  nlohmann::json to_json() const;
};

struct AblationOptions {
  int k = 5;
  int max_folds = -1;  ///< run only the first folds, for quick checks
  std::vector<std::string> rows;  ///< subset by name; empty means all three
  std::optional<std::filesystem::path> out_dir;
  bool verbose = false;
};

/// Loads every pool of the manifest (pool C without labels).
std::map<std::string, std::vector<PoolCase>> load_pools(const Manifest& m);

/// Cross-validates the baseline, +semi-supervised and +augmentation rows over
/// pools B and C. Each case is tested exactly once; its prediction feeds the row report.
AblationResult run_ablation(const Manifest& manifest, const TrainConfig& cfg, const SegNetConfig& net_cfg,
                            const AblationOptions& opt = {});

}  // namespace stagekit
