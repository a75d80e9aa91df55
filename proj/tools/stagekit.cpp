#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "run_record.hpp"
#include "stagekit/defsim.hpp"
#include "stagekit/error.hpp"
#include "stagekit/phantom.hpp"
#include "stagekit/staging.hpp"
#include "stagekit/synthgan.hpp"
#include "stagekit/trainer.hpp"
#include "stagekit/volume_pack.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stagekit;
using stagekit::cli::RunRecord;

namespace {

const std::vector<std::string> kCommands = {"phantom-gen", "train",   "predict",   "eval",   "stage",
                                            "progress-sim", "synth",  "gan-train", "augment", "ablation"};

const char* kUsage =
    "usage: stagekit <command> [options]\n"
    "\n"
    "commands:\n"
    "  phantom-gen   --out <dir> --counts A=20:8/12,B=20:8/12,C=20:10/10 --seed N\n"
    "  train         --config <json> --manifest <json> --out <dir> [--seed N] [--iterations N]\n"
    "  predict       --ckpt <path> --in <pack> --out <pack> [--config <json>]\n"
    "  eval          --preds <dir> --refs <dir> [--out report.json]\n"
    "  stage         --pred <pack>\n"
    "  progress-sim  --in <pack> --out <pack> --seed N [--steps 3]\n"
    "  synth         --gen-ckpt <path> --labels <pack> --seed N --out <pack>\n"
    "  gan-train     --manifest <json> --out <dir> --steps N --seed N\n"
    "  augment       --manifest <json> --gen-ckpt <path> --count N --seed N\n"
    "  ablation      --manifest <json> --config <json> --out <dir> [--k 5]\n"
    "\n"
    "common: --single-thread (bit-reproducible mode); STAGEKIT_THREADS caps worker threads\n";

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& p) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

void configure_threads(bool single) {
  if (single) {
    torch::set_num_threads(1);
    at::set_num_interop_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
    return;
  }
  if (const char* env = std::getenv("STAGEKIT_THREADS")) {
    int n = 0;
    try {
      n = std::stoi(env);
    } catch (const std::exception&) {
      throw ValidationError(std::string("STAGEKIT_THREADS must be a positive integer, got '") + env + "'");
    }
    if (n < 1) throw ValidationError("STAGEKIT_THREADS must be a positive integer");
    torch::set_num_threads(n);
  }
}

struct TrainFile {
  TrainConfig train;
  SegNetConfig net;
  json raw;
};

TrainFile load_train_config(const std::optional<fs::path>& path) {
  TrainFile f;
  if (!path) return f;
  f.raw = read_json(*path);
  f.train = TrainConfig::from_json(f.raw);
  try {
    if (f.raw.contains("net")) f.net = SegNetConfig::from_json(f.raw["net"]);
  } catch (const json::exception& e) {
    throw FormatError("malformed net config: " + std::string(e.what()));
  }
  return f;
}

std::vector<const PoolCase*> pool_ptrs(const std::map<std::string, std::vector<PoolCase>>& pools, const std::string& name) {
  std::vector<const PoolCase*> out;
  if (const auto it = pools.find(name); it != pools.end())
    for (const auto& pc : it->second) out.push_back(&pc);
  return out;
}

// Pack directories directly under `dir`, sorted by name.
std::vector<fs::path> pack_dirs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "header.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

struct Options {
  std::uint64_t seed = 0;
  bool single_thread = false;
  fs::path out, manifest, ckpt, in, labels, preds, refs, gen_ckpt;
  std::optional<fs::path> config, report;
  std::string counts = "A=20:8/12,B=20:8/12,C=20:10/10";
  int shape = 64;
  double spacing = 0.5;
  std::optional<int> iterations;
  std::optional<std::uint64_t> seed_override;
  bool augment = false;
  bool verbose = false;
  int steps = 3;
  int gan_steps = 500;
  int batch = 2;
  int count = 0;
  int k = 5;
  int max_folds = -1;
  std::vector<std::string> rows;
};

RunRecord make_record(const std::vector<std::string>& argv, const Options& o) {
  RunRecord r;
  r.command_line = argv;
  r.seeds = {{"seed", o.seed}};
  return r;
}

void cmd_phantom_gen(const Options& o, RunRecord rec) {
  PhantomConfig pc;
  pc.shape = {o.shape, o.shape, o.shape};
  pc.spacing_mm = o.spacing;
  pc.validate();
  const Manifest m = generate_dataset(o.out, parse_pool_counts(o.counts), o.seed, pc);
  rec.config = {{"counts", o.counts}, {"shape", o.shape}, {"spacing_mm", o.spacing}};
  rec.outputs = {o.out / "manifest.json"};
  std::size_t n = 0;
  for (const auto& [pool, paths] : m.pools) n += paths.size();
  rec.write(o.out / "run_record.json");
  std::cout << "wrote " << n << " cases to " << o.out.string() << "\n";
}

void cmd_train(const Options& o, RunRecord rec) {
  TrainFile tf = load_train_config(o.config);
  if (o.seed_override) tf.train.seed = *o.seed_override;
  if (o.iterations) tf.train.max_iterations = *o.iterations;
  tf.train.validate();
  const Manifest m = load_manifest(o.manifest);
  const auto pools = load_pools(m);
  FitData data{pool_ptrs(pools, "A"), pool_ptrs(pools, "C"), pool_ptrs(pools, "B")};
  if (o.augment)
    for (const auto* pc : pool_ptrs(pools, "D")) data.labeled_train.push_back(pc);

  fs::create_directories(o.out / "checkpoints");
  AuditLog audit;
  FitOptions fo;
  fo.checkpoint_dir = o.out / "checkpoints";
  fo.metrics_csv = o.out / "metrics.csv";
  fo.audit = &audit;
  fo.run = "train";
  fo.verbose = o.verbose;
  const FitResult r = fit(data, tf.train, tf.net, fo);
  audit.write_jsonl(o.out / "audit.jsonl");

  rec.config = {{"train", tf.train.to_json()}, {"net", tf.net.to_json()}, {"augment", o.augment}};
  rec.seeds = {{"seed", tf.train.seed}};
  rec.inputs = {o.manifest};
  if (o.config) rec.inputs.push_back(*o.config);
  rec.outputs = r.saved_checkpoints;
  rec.outputs.push_back(o.out / "checkpoints" / "best.ckpt");
  rec.outputs.push_back(o.out / "metrics.csv");
  rec.outputs.push_back(o.out / "audit.jsonl");
  rec.write(o.out / "run_record.json");
  std::cout << "best iteration " << r.best_iteration << " validation dice " << r.best_validation_dice << "\n";
}

void cmd_predict(const Options& o, RunRecord rec) {
  const TrainFile tf = load_train_config(o.config);
  SegNetCheckpoint ck = load_segnet(o.ckpt);
  const Case c = load_volume_pack(o.in);
  Case out;
  out.id = c.id;
  out.image = resample_isotropic(c.image, tf.train.target_spacing_mm);
  out.labels = predict_labels(ck.net, c, tf.train);
  out.stage = classify_stage(*out.labels);
  out.role = CaseRole::Eval;
  save_volume_pack(out, o.out);
  rec.config = {{"train", tf.train.to_json()}, {"net", ck.config.to_json()}};
  rec.inputs = {o.ckpt, o.in};
  rec.outputs = {o.out};
  rec.write(o.out / "run_record.json");
  std::cout << stage_name(*out.stage) << "\n";
}

void cmd_eval(const Options& o, RunRecord rec) {
  std::map<std::string, fs::path> refs;
  for (const auto& p : pack_dirs(o.refs)) refs[p.filename().string()] = p;
  std::vector<ProbabilityMaps> preds;
  std::vector<Case> ref_cases;
  for (const auto& p : pack_dirs(o.preds)) {
    const auto it = refs.find(p.filename().string());
    if (it == refs.end()) throw ValidationError("prediction " + p.filename().string() + " has no reference pack");
    const Case pred = load_volume_pack(p);
    if (!pred.labels) throw ValidationError("prediction " + p.string() + " has no labels");
    Case ref = load_volume_pack(it->second);
    if (ref.labels && !(ref.labels->shape == pred.labels->shape))
      throw ShapeError("prediction " + p.filename().string() + " and its reference differ in shape");
    ref.id = p.filename().string();
    preds.push_back(probabilities_from_labels(*pred.labels));
    ref_cases.push_back(std::move(ref));
  }
  if (preds.empty()) throw ValidationError("no prediction packs in " + o.preds.string());
  const json report = to_json(evaluate_cases(preds, ref_cases));
  const fs::path out = o.report.value_or("report.json");
  write_json(report, out);
  rec.inputs = {o.preds, o.refs};
  rec.outputs = {out};
  rec.write(fs::path(out.string() + ".run_record.json"));
  std::cout << report["dice"].dump() << "\n";
}

void cmd_stage(const Options& o) {
  const Case c = load_volume_pack(o.preds);
  if (!c.labels) throw ValidationError(o.preds.string() + " has no labels to stage");
  std::cout << stage_name(classify_stage(*c.labels)) << "\n";
}

void cmd_progress_sim(const Options& o, RunRecord rec) {
  const Case c = load_volume_pack(o.in);
  std::mt19937_64 rng(o.seed);
  const ProgressionResult r = simulate_progression(c, o.steps, rng);
  save_volume_pack(r.output, o.out);
  rec.config = {{"steps", o.steps}, {"provenance", r.provenance()}};
  rec.inputs = {o.in};
  rec.outputs = {o.out};
  rec.write(o.out / "run_record.json");
  std::cout << stage_name(classify_stage(*r.output.labels)) << "\n";
}

Case synthesize_case(Generator& gen, const Case& labels_case, std::uint64_t seed, const std::string& id) {
  if (!labels_case.labels) throw ValidationError("case " + labels_case.id + " has no labels to synthesize from");
  Case out;
  out.id = id;
  out.labels = labels_case.labels;
  out.image = synthesize(gen, *out.labels, seed);
  out.stage = classify_stage(*out.labels);
  out.role = CaseRole::Generated;
  return out;
}

void cmd_synth(const Options& o, RunRecord rec) {
  Generator gen = load_generator(o.gen_ckpt);
  const Case c = load_volume_pack(o.labels);
  const Case out = synthesize_case(gen, c, o.seed, c.id);
  save_volume_pack(out, o.out);
  rec.config = {{"generator", gen->config().to_json()}};
  rec.inputs = {o.gen_ckpt, o.labels};
  rec.outputs = {o.out};
  rec.write(o.out / "run_record.json");
}

void cmd_gan_train(const Options& o, RunRecord rec) {
  SynthConfig cfg;
  if (o.config) cfg = SynthConfig::from_json(read_json(*o.config));
  const Manifest m = load_manifest(o.manifest);
  std::vector<GanPair> pairs;
  for (const auto& [pool, cases] : load_pools(m))
    if (pool == "A" || pool == "B")
      for (const auto& pc : cases) pairs.push_back(gan_pair_from_case(pc.data));
  if (pairs.empty()) throw ValidationError("gan-train: pools A and B hold no labeled cases");
  const GanTrainResult r = train_gan(pairs, cfg, o.gan_steps, static_cast<std::size_t>(o.batch), o.seed);

  fs::create_directories(o.out);
  std::ofstream csv(o.out / "gan_metrics.csv", std::ios::trunc);
  if (!csv) throw IoError("cannot write gan metrics");
  csv << "step,d_loss,d_real,d_fake,g_adv,g_l1,g_total\n";
  csv.precision(9);
  for (std::size_t i = 0; i < r.history.size(); ++i) {
    const auto& l = r.history[i];
    csv << i + 1 << ',' << l.d_loss << ',' << l.d_real << ',' << l.d_fake << ',' << l.g_adv << ',' << l.g_l1 << ','
        << l.g_total << '\n';
  }
  Generator gen = r.models.gen;
  save_generator(gen, o.out / "generator.ckpt", o.gan_steps);
  rec.config = {{"synth", cfg.to_json()}, {"steps", o.gan_steps}, {"batch", o.batch}};
  rec.inputs = {o.manifest};
  rec.outputs = {o.out / "generator.ckpt", o.out / "gan_metrics.csv"};
  rec.write(o.out / "run_record.json");
}

void cmd_augment(const Options& o, RunRecord rec) {
  if (o.count < 1) throw ValidationError("augment: --count must be positive");
  Manifest m = load_manifest(o.manifest);
  Generator gen = load_generator(o.gen_ckpt);
  std::vector<Case> sources;
  const auto pools = load_pools(m);
  for (const auto* pc : pool_ptrs(pools, "A"))
    if (pc->data.labels && classify_stage(*pc->data.labels) == StageLabel::UnderT2) sources.push_back(pc->data);
  if (sources.empty()) throw ValidationError("augment: pool A has no labeled UNDER_T2 case to progress");

  auto& d = m.pools["D"];
  const std::size_t base = d.size();
  for (int i = 0; i < o.count; ++i) {
    const Case& src = sources[static_cast<std::size_t>(i) % sources.size()];
    std::mt19937_64 rng(derive_seed(o.seed, static_cast<std::uint64_t>(i)));
    const ProgressionResult pr = simulate_progression(src, o.steps, rng);
    char id[32];
    std::snprintf(id, sizeof(id), "D_%04zu", base + static_cast<std::size_t>(i));
    const Case out = synthesize_case(gen, pr.output, derive_seed(o.seed, 0x5e0000 + static_cast<std::uint64_t>(i)), id);
    const fs::path rel = fs::path("D") / id;
    save_volume_pack(out, m.root / rel);
    d.push_back(rel);
    rec.outputs.push_back(m.root / rel);
  }
  save_manifest(m, o.manifest);
  rec.config = {{"count", o.count}, {"steps", o.steps}};
  rec.inputs = {o.gen_ckpt};
  for (const auto& s : sources) rec.seeds["source_" + s.id] = s.id;
  rec.write(m.root / "D" / "run_record.json");
  std::cout << "pool D now holds " << d.size() << " cases\n";
}

void cmd_ablation(const Options& o, RunRecord rec) {
  const TrainFile tf = load_train_config(o.config);
  const Manifest m = load_manifest(o.manifest);
  fs::create_directories(o.out);
  AblationOptions ao;
  ao.k = o.k;
  ao.max_folds = o.max_folds;
  ao.rows = o.rows;
  ao.out_dir = o.out;
  ao.verbose = o.verbose;
  const AblationResult r = run_ablation(m, tf.train, tf.net, ao);
  write_json(r.to_json(), o.out / "report.json");
  r.audit.write_jsonl(o.out / "audit.jsonl");
  rec.config = {{"train", tf.train.to_json()}, {"net", tf.net.to_json()}, {"k", o.k}, {"max_folds", o.max_folds}};
  rec.seeds = {{"seed", tf.train.seed}};
  rec.inputs = {o.manifest};
  if (o.config) rec.inputs.push_back(*o.config);
  rec.outputs = {o.out / "report.json", o.out / "audit.jsonl"};
  rec.write(o.out / "run_record.json");
  for (const auto& row : r.rows) {
    const json j = to_json(row.report);
    std::cout << row.spec.name << " " << j["dice"].dump() << " sens " << j["sensitivity"] << " spec "
              << j["specificity"] << "\n";
  }
}

void print_error(const std::string& kind, const std::string& message, const std::string& command) {
  std::cerr << json{{"error", kind}, {"message", message}, {"command", command}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  if (argc < 2) {
    std::cerr << kUsage;
    return 2;
  }
  const std::string first = args[1];
  if (first == "-h" || first == "--help") {
    std::cout << kUsage;
    return 0;
  }
  if (std::find(kCommands.begin(), kCommands.end(), first) == kCommands.end()) {
    std::cerr << "unknown command '" << first << "'\n\n" << kUsage;
    return 2;
  }

  CLI::App app{"stagekit"};
  app.require_subcommand(1, 1);
  Options o;
  std::function<void(RunRecord)> action;

  auto common = [&](CLI::App* c) {
    c->add_option("--seed", o.seed, "random seed");
    c->add_flag("--single-thread", o.single_thread, "one thread, deterministic kernels");
  };

  auto* pg = app.add_subcommand("phantom-gen", "generate a phantom dataset");
  common(pg);
  pg->add_option("--out", o.out)->required();
  pg->add_option("--counts", o.counts);
  pg->add_option("--shape", o.shape, "cubic grid extent");
  pg->add_option("--spacing", o.spacing, "voxel spacing in mm");
  pg->callback([&] { action = [&](RunRecord r) { cmd_phantom_gen(o, std::move(r)); }; });

  auto* tr = app.add_subcommand("train", "train a segmentation network on pools A (+D), C and B");
  tr->add_flag("--single-thread", o.single_thread);
  tr->add_option("--seed", o.seed_override, "overrides the config seed");
  tr->add_option("--config", o.config)->required();
  tr->add_option("--manifest", o.manifest)->required();
  tr->add_option("--out", o.out)->required();
  tr->add_option("--iterations", o.iterations);
  tr->add_flag("--augment", o.augment, "add pool D to the labeled training set");
  tr->add_flag("--verbose", o.verbose);
  tr->callback([&] { action = [&](RunRecord r) { cmd_train(o, std::move(r)); }; });

  auto* pr = app.add_subcommand("predict", "predict labels for one pack");
  common(pr);
  pr->add_option("--ckpt", o.ckpt)->required();
  pr->add_option("--in", o.in)->required();
  pr->add_option("--out", o.out)->required();
  pr->add_option("--config", o.config);
  pr->callback([&] { action = [&](RunRecord r) { cmd_predict(o, std::move(r)); }; });

  auto* ev = app.add_subcommand("eval", "score prediction packs against reference packs");
  common(ev);
  ev->add_option("--preds", o.preds)->required();
  ev->add_option("--refs", o.refs)->required();
  ev->add_option("--out", o.report);
  ev->callback([&] { action = [&](RunRecord r) { cmd_eval(o, std::move(r)); }; });

  auto* st = app.add_subcommand("stage", "print the T-stage of a label pack");
  common(st);
  st->add_option("--pred", o.preds)->required();
  st->callback([&] { action = [&](RunRecord) { cmd_stage(o); }; });

  auto* ps = app.add_subcommand("progress-sim", "grow a cancer label to OVER_T3");
  common(ps);
  ps->add_option("--in", o.in)->required();
  ps->add_option("--out", o.out)->required();
  ps->add_option("--steps", o.steps);
  ps->callback([&] { action = [&](RunRecord r) { cmd_progress_sim(o, std::move(r)); }; });

  auto* sy = app.add_subcommand("synth", "synthesize an image for a label pack");
  common(sy);
  sy->add_option("--gen-ckpt", o.gen_ckpt)->required();
  sy->add_option("--labels", o.labels)->required();
  sy->add_option("--out", o.out)->required();
  sy->callback([&] { action = [&](RunRecord r) { cmd_synth(o, std::move(r)); }; });

  auto* gt = app.add_subcommand("gan-train", "train the label-to-image generator on pools A and B");
  common(gt);
  gt->add_option("--manifest", o.manifest)->required();
  gt->add_option("--out", o.out)->required();
  gt->add_option("--steps", o.gan_steps);
  gt->add_option("--batch", o.batch);
  gt->add_option("--config", o.config, "synthesis config json");
  gt->callback([&] { action = [&](RunRecord r) { cmd_gan_train(o, std::move(r)); }; });

  auto* au = app.add_subcommand("augment", "fill pool D with progressed, synthesized cases");
  common(au);
  au->add_option("--manifest", o.manifest)->required();
  au->add_option("--gen-ckpt", o.gen_ckpt)->required();
  au->add_option("--count", o.count)->required();
  au->add_option("--steps", o.steps);
  au->callback([&] { action = [&](RunRecord r) { cmd_augment(o, std::move(r)); }; });

  auto* ab = app.add_subcommand("ablation", "cross-validate the baseline, +semi and +aug rows");
  common(ab);
  ab->add_option("--manifest", o.manifest)->required();
  ab->add_option("--config", o.config);
  ab->add_option("--out", o.out)->required();
  ab->add_option("--k", o.k);
  ab->add_option("--max-folds", o.max_folds);
  ab->add_option("--rows", o.rows);
  ab->add_flag("--verbose", o.verbose);
  ab->callback([&] { action = [&](RunRecord r) { cmd_ablation(o, std::move(r)); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what(), first);
    return 2;
  }

  try {
    configure_threads(o.single_thread);
    action(make_record(args, o));
    return 0;
  } catch (const stagekit::Error& e) {
    print_error(e.kind(), e.what(), first);
  } catch (const c10::Error& e) {
    print_error("torch", e.what_without_backtrace(), first);
  } catch (const std::exception& e) {
    print_error("internal", e.what(), first);
  }
  return 1;
}
