#include "stagekit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include "stagekit/checkpoint.hpp"
#include "stagekit/error.hpp"
#include "stagekit/volume_pack.hpp"

namespace stagekit {

namespace fs = std::filesystem;
using nlohmann::json;

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.max_iterations = 80000;
  c.crops = CropConfig{};
  return c;
}

LossConfig TrainConfig::loss() const {
  LossConfig l = loss_base;
  l.lambda = lambda;
  l.mu = mu;
  l.alpha = alpha;
  return l;
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ValidationError("TrainConfig: lr must be positive");
  if (lambda < 0 || mu < 0 || alpha < 0) throw ValidationError("TrainConfig: lambda, mu and alpha must be non-negative");
  if (batch_labeled < 1) throw ValidationError("TrainConfig: batch_labeled must be at least 1");
  if (batch_stage_only < 0) throw ValidationError("TrainConfig: batch_stage_only must be non-negative");
  if (max_iterations < 0) throw ValidationError("TrainConfig: max_iterations must be non-negative");
  if (validation_interval < 1) throw ValidationError("TrainConfig: validation_interval must be positive");
  if (!(target_spacing_mm > 0)) throw ValidationError("TrainConfig: target_spacing_mm must be positive");
}

namespace {

json shape_json(Shape3 s) { return json::array({s.z, s.y, s.x}); }

Shape3 shape_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("crop shape must be a [z, y, x] array");
  return {j[0].get<std::int64_t>(), j[1].get<std::int64_t>(), j[2].get<std::int64_t>()};
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + std::uniform_int_distribution<std::size_t>(0, n - 1 - i)(rng);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace

json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"lambda", lambda},
          {"mu", mu},
          {"alpha", alpha},
          {"batch_labeled", batch_labeled},
          {"batch_stage_only", batch_stage_only},
          {"max_iterations", max_iterations},
          {"validation_interval", validation_interval},
          {"seed", seed},
          {"crop_train", shape_json(crops.train)},
          {"crop_eval", shape_json(crops.eval)},
          {"target_spacing_mm", target_spacing_mm},
          {"staging_max", loss_base.max_mode == StagingMax::Smooth ? "smooth" : "hard"},
          {"tau", loss_base.tau}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.lambda = j.value("lambda", c.lambda);
    c.mu = j.value("mu", c.mu);
    c.alpha = j.value("alpha", c.alpha);
    c.batch_labeled = j.value("batch_labeled", c.batch_labeled);
    c.batch_stage_only = j.value("batch_stage_only", c.batch_stage_only);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.validation_interval = j.value("validation_interval", c.validation_interval);
    c.seed = j.value("seed", c.seed);
    if (j.contains("crop_train")) c.crops.train = shape_from(j["crop_train"]);
    if (j.contains("crop_eval")) c.crops.eval = shape_from(j["crop_eval"]);
    c.target_spacing_mm = j.value("target_spacing_mm", c.target_spacing_mm);
    const std::string mode = j.value("staging_max", std::string("smooth"));
    if (mode != "smooth" && mode != "hard") throw FormatError("staging_max must be 'smooth' or 'hard'");
    c.loss_base.max_mode = mode == "smooth" ? StagingMax::Smooth : StagingMax::Hard;
    c.loss_base.tau = j.value("tau", c.loss_base.tau);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed training config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::string> AuditLog::pools_used(const std::string& run_prefix) const {
  std::set<std::string> pools;
  for (const auto& e : entries_)
    if (e.purpose != "test" && e.run.rfind(run_prefix, 0) == 0) pools.insert(e.pool);
  return {pools.begin(), pools.end()};
}

void AuditLog::write_jsonl(const fs::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write audit log " + path.string());
  for (const auto& e : entries_)
    out << json{{"iteration", e.iteration}, {"pool", e.pool}, {"case", e.case_id}, {"purpose", e.purpose}, {"run", e.run}}
               .dump()
        << "\n";
  for (const auto& ev : events_) out << json{{"event", ev}}.dump() << "\n";
}

Case prepare_case(const Case& c, Phase phase, const TrainConfig& cfg) {
  Case out = c;
  out.image = resample_isotropic(c.image, cfg.target_spacing_mm);
  if (c.labels) out.labels = resample_isotropic(*c.labels, cfg.target_spacing_mm);
  // Intensity statistics come from the whole volume so that train and eval crops share one mapping.
  out.image = percentile_normalize(out.image);
  const bool has_cancer = out.labels && count_nonzero(extract_bit(*out.labels, LabelBit::Cancer)) > 0;
  if (phase == Phase::Train && has_cancer) return crop_around_label(out, Phase::Train, cfg.crops);
  return crop_at(out, volume_center(out.image.shape), cfg.crops.for_phase(phase));
}

LabelVolume predict_labels(SegNet& net, const Case& c, const TrainConfig& cfg, double threshold) {
  const Case prepared = prepare_case(c, Phase::Eval, cfg);
  const ImageVolume grid = resample_isotropic(c.image, cfg.target_spacing_mm);
  const LabelVolume crop_pred = labels_from_probabilities(predict(net, prepared.image), threshold, grid.spacing_mm);
  // Same window placement as crop_at with the volume centre.
  const auto centre = volume_center(grid.shape);
  const Shape3 w = cfg.crops.eval;
  const std::int64_t start[3] = {std::llround(centre[0]) - w.z / 2, std::llround(centre[1]) - w.y / 2,
                                 std::llround(centre[2]) - w.x / 2};
  LabelVolume out(grid.shape, grid.spacing_mm, 0);
  for (std::int64_t z = 0; z < w.z; ++z)
    for (std::int64_t y = 0; y < w.y; ++y)
      for (std::int64_t x = 0; x < w.x; ++x)
        if (grid.shape.contains(start[0] + z, start[1] + y, start[2] + x))
          out.at(start[0] + z, start[1] + y, start[2] + x) = crop_pred.at(z, y, x);
  return out;
}

std::vector<int> FoldPlan::training_folds(int test_fold) const {
  std::vector<int> out;
  for (int f = 0; f < k; ++f)
    if (f != test_fold && f != validation_fold(test_fold)) out.push_back(f);
  return out;
}

FoldPlan kfold_split(const std::vector<std::string>& case_ids, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("kfold_split: k must be at least 2");
  if (case_ids.size() < static_cast<std::size_t>(k))
    throw ValidationError("kfold_split: " + std::to_string(case_ids.size()) + " cases cannot fill " + std::to_string(k) +
                          " folds");
  std::vector<std::string> ids = case_ids;
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ValidationError("kfold_split: duplicate case ids");
  std::mt19937_64 rng(seed);
  const auto order = sample_indices(ids.size(), ids.size(), rng);
  FoldPlan plan;
  plan.k = k;
  plan.folds.assign(static_cast<std::size_t>(k), {});
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int f = static_cast<int>(i % static_cast<std::size_t>(k));
    plan.assignments[ids[order[i]]] = f;
    plan.folds[static_cast<std::size_t>(f)].push_back(ids[order[i]]);
  }
  return plan;
}

std::vector<std::string> TrainBatch::ids() const {
  std::vector<std::string> out;
  for (const auto& c : labeled) out.push_back(c.id);
  for (const auto& c : stage_only) out.push_back(c.id);
  return out;
}

TrainBatch compose_batch(const std::vector<const PoolCase*>& labeled_pool,
                         const std::vector<const PoolCase*>& stage_only_pool, const TrainConfig& cfg,
                         std::mt19937_64& rng, AuditLog* audit, std::int64_t iteration, const std::string& run) {
  if (labeled_pool.size() < static_cast<std::size_t>(cfg.batch_labeled))
    throw ValidationError("compose_batch: labeled pool has " + std::to_string(labeled_pool.size()) +
                          " cases, batch needs " + std::to_string(cfg.batch_labeled));
  TrainBatch b;
  for (auto i : sample_indices(labeled_pool.size(), static_cast<std::size_t>(cfg.batch_labeled), rng)) {
    const PoolCase& pc = *labeled_pool[i];
    if (!pc.data.labels) throw ValidationError("compose_batch: case " + pc.data.id + " in the labeled pool has no labels");
    if (audit) audit->record({iteration, pc.pool, pc.data.id, "train", run});
    b.labeled.push_back(prepare_case(pc.data, Phase::Train, cfg));
  }
  if (cfg.batch_stage_only > 0) {
    if (stage_only_pool.empty()) {
      b.stage_only_fallback = true;
      if (audit) audit->note(run + ": stage-only pool empty, labeled-only batches");
    } else {
      const std::size_t n = std::min(stage_only_pool.size(), static_cast<std::size_t>(cfg.batch_stage_only));
      for (auto i : sample_indices(stage_only_pool.size(), n, rng)) {
        const PoolCase& pc = *stage_only_pool[i];
        if (!pc.data.stage) throw ValidationError("compose_batch: stage-only case " + pc.data.id + " has no stage");
        if (audit) audit->record({iteration, pc.pool, pc.data.id, "train", run});
        Case prepared = prepare_case(pc.data, Phase::Train, cfg);
        prepared.labels.reset();
        b.stage_only.push_back(std::move(prepared));
      }
    }
  }
  return b;
}

LossBreakdown train_step(SegNet& net, torch::optim::Adam& opt, const TrainBatch& batch, const TrainConfig& cfg) {
  std::vector<const ImageVolume*> images;
  for (const auto& c : batch.labeled) images.push_back(&c.image);
  for (const auto& c : batch.stage_only) images.push_back(&c.image);
  if (images.empty()) throw ValidationError("train_step: empty batch");

  net->train();
  torch::Tensor probs = net->forward(image_batch(images));
  const std::vector<ProbabilityMaps> maps = to_probability_maps(probs);

  std::vector<StageLabel> derived;
  derived.reserve(batch.labeled.size());
  for (const auto& c : batch.labeled) derived.push_back(c.stage ? *c.stage : classify_stage(*c.labels));
  std::vector<LabeledSample> labeled;
  for (std::size_t i = 0; i < batch.labeled.size(); ++i)
    labeled.push_back({maps[i], *batch.labeled[i].labels, derived[i]});
  std::vector<StagedSample> staged;
  for (std::size_t j = 0; j < batch.stage_only.size(); ++j)
    staged.push_back({maps[batch.labeled.size() + j], *batch.stage_only[j].stage});

  LossGradients grads;
  const LossBreakdown br = total_loss(labeled, staged, cfg.loss(), &grads);
  if (!std::isfinite(br.total)) {
    std::string ids;
    for (const auto& id : batch.ids()) ids += (ids.empty() ? "" : ",") + id;
    throw TrainingError("non-finite loss (seg " + fmt(br.seg_loss) + ", bce " + fmt(br.stg_bce) + ", ratio " +
                        fmt(br.stg_ratio) + ") on batch [" + ids + "]");
  }
  std::vector<ProbabilityMaps> all = std::move(grads.labeled);
  for (auto& g : grads.stage_only) all.push_back(std::move(g));
  const torch::Tensor g = from_probability_maps(all).to(torch::kFloat32);

  opt.zero_grad();
  probs.backward(g);
  opt.step();
  return br;
}

ValidationScore validate_model(SegNet& net, const std::vector<Case>& prepared) {
  if (prepared.empty()) throw ValidationError("validate_model: no validation cases");
  ValidationScore s;
  static constexpr LabelBit bits[3] = {LabelBit::Mesorectum, LabelBit::Rectum, LabelBit::Cancer};
  for (const auto& c : prepared) {
    if (!c.labels) throw ValidationError("validate_model: validation case " + c.id + " has no labels");
    const ProbabilityMaps p = predict(net, c.image);
    const LabelVolume pred = labels_from_probabilities(p, 0.5, c.image.spacing_mm);
    for (int k = 0; k < 3; ++k)
      s.dice[static_cast<std::size_t>(k)] += dice_score(extract_bit(pred, bits[k]), extract_bit(*c.labels, bits[k]));
  }
  for (auto& d : s.dice) d /= static_cast<double>(prepared.size());
  return s;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write metrics " + path.string());
  out << "iteration,seg_loss,stg_bce,stg_ratio,total,val_dice_mesorectum,val_dice_rectum,val_dice_cancer,val_dice_mean\n";
  for (const auto& r : rows) {
    out << r.iteration << ',' << fmt(r.loss.seg_loss) << ',' << fmt(r.loss.stg_bce) << ',' << fmt(r.loss.stg_ratio)
        << ',' << fmt(r.loss.total);
    if (r.validation)
      out << ',' << fmt(r.validation->dice[0]) << ',' << fmt(r.validation->dice[1]) << ',' << fmt(r.validation->dice[2])
          << ',' << fmt(r.validation->mean());
    else
      out << ",,,,";
    out << '\n';
  }
}

FitResult fit(const FitData& data, const TrainConfig& cfg, const SegNetConfig& net_cfg, const FitOptions& opt) {
  cfg.validate();
  if (data.labeled_train.empty()) throw ValidationError("fit: labeled training pool is empty");
  if (data.validation.empty()) throw ValidationError("fit: validation pool is empty");

  FitResult res;
  res.net = build_segnet(net_cfg, cfg.seed);
  torch::optim::Adam adam(res.net->parameters(), torch::optim::AdamOptions(cfg.lr));

  std::vector<Case> val;
  for (const auto* pc : data.validation) {
    if (!pc->data.labels) throw ValidationError("fit: validation case " + pc->data.id + " has no labels");
    val.push_back(prepare_case(pc->data, Phase::Eval, cfg));
  }
  auto run_validation = [&](std::int64_t it) {
    if (opt.audit)
      for (const auto* pc : data.validation) opt.audit->record({it, pc->pool, pc->data.id, "validation", opt.run});
    ValidationScore s = validate_model(res.net, val);
    s.iteration = it;
    res.history.push_back(s);
    return s;
  };
  auto save = [&](const std::string& name, std::int64_t it, double dice) {
    if (!opt.checkpoint_dir) return;
    const fs::path p = *opt.checkpoint_dir / name;
    save_segnet(res.net, p, it, dice);
    res.saved_checkpoints.push_back(p);
  };

  ValidationScore first = run_validation(0);
  res.best_iteration = 0;
  res.best_validation_dice = first.mean();
  WeightSnapshot best = snapshot_weights(*res.net);
  res.metrics.push_back({0, LossBreakdown{}, first});
  save("iter_000000.ckpt", 0, first.mean());

  std::mt19937_64 rng(derive_seed(cfg.seed, 0xba7c4));
  for (std::int64_t it = 1; it <= cfg.max_iterations; ++it) {
    const TrainBatch batch = compose_batch(data.labeled_train, data.stage_only, cfg, rng, opt.audit, it, opt.run);
    MetricsRow row{it, train_step(res.net, adam, batch, cfg), std::nullopt};
    if (it % cfg.validation_interval == 0 || it == cfg.max_iterations) {
      row.validation = run_validation(it);
      const double m = row.validation->mean();
      char name[32];
      std::snprintf(name, sizeof(name), "iter_%06lld.ckpt", static_cast<long long>(it));
      save(name, it, m);
      if (m > res.best_validation_dice) {
        res.best_validation_dice = m;
        res.best_iteration = it;
        best = snapshot_weights(*res.net);
      }
    }
    if (opt.verbose)
      std::cerr << opt.run << " it " << it << " total " << fmt(row.loss.total) << " seg " << fmt(row.loss.seg_loss)
                << (row.validation ? " val " + fmt(row.validation->mean()) : "") << "\n";
    res.metrics.push_back(row);
  }
  restore_weights(*res.net, best);
  if (opt.checkpoint_dir) save_segnet(res.net, *opt.checkpoint_dir / "best.ckpt", res.best_iteration, res.best_validation_dice);
  if (opt.metrics_csv) write_metrics_csv(res.metrics, *opt.metrics_csv);
  return res;
}

std::vector<std::string> AblationRowSpec::pools() const {
  std::vector<std::string> p{"A", "B"};
  if (stage_loss) p.push_back("C");
  if (augmentation) p.push_back("D");
  return p;
}

std::vector<AblationRowSpec> ablation_rows() {
  return {{"baseline", false, false}, {"+semi", true, false}, {"+aug", true, true}};
}

json AblationResult::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    json j = stagekit::to_json(r.report);
    j["configuration"] = r.spec.name;
    j["pools"] = r.spec.pools();
    j["best_iterations"] = r.best_iterations;
    rows_j.push_back(j);
  }
  json events = json::array();
  for (const auto& e : audit.events()) events.push_back(e);
  return {{"rows", rows_j}, {"events", events}};
}

std::map<std::string, std::vector<PoolCase>> load_pools(const Manifest& m) {
  std::map<std::string, std::vector<PoolCase>> out;
  for (const auto& [pool, paths] : m.pools) {
    auto& dst = out[pool];
    for (const auto& p : paths) dst.push_back({pool, load_volume_pack(p.is_absolute() ? p : m.root / p)});
  }
  return out;
}

AblationResult run_ablation(const Manifest& manifest, const TrainConfig& cfg, const SegNetConfig& net_cfg,
                            const AblationOptions& opt) {
  cfg.validate();
  const auto pools = load_pools(manifest);
  auto pool = [&](const std::string& name) -> const std::vector<PoolCase>& {
    static const std::vector<PoolCase> empty;
    const auto it = pools.find(name);
    return it == pools.end() ? empty : it->second;
  };

  std::vector<AblationRowSpec> rows;
  for (const auto& spec : ablation_rows())
    if (opt.rows.empty() || std::find(opt.rows.begin(), opt.rows.end(), spec.name) != opt.rows.end()) rows.push_back(spec);
  if (rows.empty()) throw ValidationError("run_ablation: no known rows selected");
  for (const auto& r : rows)
    if (r.augmentation && pool("D").empty())
      throw ValidationError("run_ablation: the augmentation row needs generated cases, but pool D is empty");

  // B and C form the cross-validation pool.
  std::map<std::string, const PoolCase*> eval_cases;
  for (const char* name : {"B", "C"})
    for (const auto& pc : pool(name)) eval_cases[pc.data.id] = &pc;
  std::vector<std::string> ids;
  for (const auto& [id, pc] : eval_cases) ids.push_back(id);
  const FoldPlan plan = kfold_split(ids, opt.k, cfg.seed);
  const int folds = opt.max_folds > 0 ? std::min(opt.max_folds, opt.k) : opt.k;

  AblationResult result;
  for (const auto& spec : rows) {
    AblationRow row{spec, {}, {}};
    std::vector<ProbabilityMaps> preds;
    std::vector<Case> refs;
    for (int f = 0; f < folds; ++f) {
      const std::string run = spec.name + "/fold" + std::to_string(f);
      FitData data;
      for (const auto& pc : pool("A")) data.labeled_train.push_back(&pc);
      for (int tf : plan.training_folds(f))
        for (const auto& id : plan.folds[static_cast<std::size_t>(tf)]) {
          const PoolCase* pc = eval_cases.at(id);
          if (pc->pool == "B") data.labeled_train.push_back(pc);
          else if (spec.stage_loss) data.stage_only.push_back(pc);
        }
      if (spec.augmentation)
        for (const auto& pc : pool("D")) data.labeled_train.push_back(&pc);
      for (const auto& id : plan.folds[static_cast<std::size_t>(plan.validation_fold(f))]) {
        const PoolCase* pc = eval_cases.at(id);
        if (pc->pool == "B") data.validation.push_back(pc);
      }
      if (data.validation.empty()) throw ValidationError("run_ablation: fold " + std::to_string(f) + " has no labeled validation case");

      TrainConfig rc = cfg;
      rc.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(f));
      if (!spec.stage_loss) rc.lambda = 0;
      FitOptions fo;
      fo.audit = &result.audit;
      fo.run = run;
      fo.verbose = opt.verbose;
      if (opt.out_dir) fo.metrics_csv = *opt.out_dir / (spec.name + "_fold" + std::to_string(f) + "_metrics.csv");
      FitResult fr = fit(data, rc, net_cfg, fo);
      row.best_iterations.push_back(fr.best_iteration);

      for (const auto& id : plan.folds[static_cast<std::size_t>(f)]) {
        const PoolCase* pc = eval_cases.at(id);
        result.audit.record({0, pc->pool, id, "test", run});
        Case ref = prepare_case(pc->data, Phase::Eval, cfg);
        preds.push_back(predict(fr.net, ref.image));
        refs.push_back(std::move(ref));
      }
    }
    row.report = evaluate_cases(preds, refs);
    result.rows.push_back(std::move(row));
  }
  return result;
}

}  // namespace stagekit
