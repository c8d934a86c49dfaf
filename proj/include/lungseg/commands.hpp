// Copyright 2026 The lungseg Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lungseg/config.hpp"
#include "lungseg/data.hpp"
#include "lungseg/eval.hpp"
#include "lungseg/hpo.hpp"
#include "lungseg/model.hpp"
#include "lungseg/report.hpp"
#include "lungseg/study.hpp"
#include "lungseg/training.hpp"
#include "lungseg/unet.hpp"

namespace lungseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline bool dir_has_entries(const fs::path& p) { return fs::exists(p) && !fs::is_empty(p); }

/// Creates `dir`, refusing to reuse a populated one unless allowed.
inline void prepare_output_dir(const fs::path& dir, bool allow_existing) {
  if (dir_has_entries(dir) && !allow_existing) {
    throw std::runtime_error("output directory " + dir.string() + " is not empty (use --force)");
  }
  fs::create_directories(dir);
}

inline void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace detail

/// Loads and combines every configured dataset root, preprocessing to the
/// model input size when enabled.
inline Dataset load_configured_data(const RunConfig& cfg, int input_size) {
  if (cfg.data.empty()) throw std::invalid_argument("no data given (use --data or the config 'data' key)");
  std::vector<Dataset> parts;
  for (const auto& root : cfg.data) {
    if (!fs::is_directory(root)) throw std::runtime_error("data directory not found: " + root);
    parts.push_back(load_dataset(root));
  }
  Dataset all = parts.size() == 1 ? std::move(parts.front()) : combine_datasets(parts, "combined");
  if (all.name.empty()) all.name = "data";
  if (cfg.preprocess) all = prepare_dataset(all, input_size);
  return all;
}

inline nlohmann::ordered_json split_json(const SplitDataset& split, const std::optional<SourceDb>& test_source) {
  auto ids = [](const Dataset& d) {
    std::vector<std::string> out;
    for (const auto& s : d.samples) out.push_back(s.id);
    return out;
  };
  nlohmann::ordered_json j;
  j["seed"] = split.seed;
  j["test_source"] =
      test_source ? nlohmann::ordered_json(std::string(to_string(*test_source))) : nlohmann::ordered_json(nullptr);
  j["train"] = ids(split.train);
  j["validation"] = ids(split.validation);
  j["test"] = ids(split.test);
  return j;
}

/// Test-part sample ids recorded by a training or optimization run.
inline std::vector<std::string> read_split_test_ids(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open split file " + path.string());
  try {
    return nlohmann::json::parse(in).at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("split file " + path.string() + ": " + e.what());
  }
}

inline Dataset select_ids(const Dataset& ds, const std::vector<std::string>& ids) {
  std::map<std::string, const SampleRecord*> by_id;
  for (const auto& s : ds.samples) by_id[s.id] = &s;
  Dataset out;
  out.name = ds.name;
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw std::runtime_error("split sample '" + id + "' not found in the data");
    out.samples.push_back(*it->second);
  }
  return out;
}

inline std::string database_label(const Dataset& test, const std::optional<SourceDb>& test_source) {
  if (test_source) return std::string(to_string(*test_source));
  std::set<std::string> names;
  for (const auto& s : test.samples) names.insert(std::string(to_string(s.source_db)));
  if (names.size() == 1) return *names.begin();
  return "MIXED";
}

inline EvaluationSummary summarize(const std::string& model, const std::string& database,
                                   const DatasetEvaluation& ev) {
  return {model, database, ev.per_image.size(), ev.mean};
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

struct PhantomArgs {
  int n = 60;
  int size = 64;
  double severe_fraction = 0.2;
  std::uint64_t seed = 0;
  fs::path out;
  bool force = false;
  SourceDb source = SourceDb::phantom;
  std::string id_prefix = "phantom";
};

inline void cmd_phantom(const PhantomArgs& a, std::ostream& log) {
  if (a.out.empty()) throw std::invalid_argument("phantom: --out is required");
  if (detail::dir_has_entries(a.out) && !a.force) {
    throw std::runtime_error("output directory " + a.out.string() + " is not empty (use --force)");
  }
  PhantomOptions opts;
  opts.id_prefix = a.id_prefix;
  opts.source = a.source;
  opts.name = a.out.filename().string();
  const Dataset ds = generate_phantom_dataset(a.n, a.size, a.severe_fraction, a.seed, opts);
  save_dataset(ds, a.out, a.force);
  nlohmann::ordered_json cfg;
  cfg["command"] = "phantom";
  cfg["n"] = a.n;
  cfg["size"] = a.size;
  cfg["severe_fraction"] = a.severe_fraction;
  cfg["seed"] = a.seed;
  cfg["source"] = std::string(to_string(a.source));
  cfg["id_prefix"] = a.id_prefix;
  detail::write_json(a.out / "config.json", cfg);
  log << "wrote " << ds.size() << " samples to " << a.out.string() << '\n';
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

struct PrepareArgs {
  fs::path data;
  fs::path out;
  int size = 256;
  bool force = false;
};

/// Histogram-equalizes and resizes a dataset directory into a new one.
inline void cmd_prepare(const PrepareArgs& a, std::ostream& log) {
  if (!fs::is_directory(a.data)) throw std::runtime_error("data directory not found: " + a.data.string());
  if (a.out.empty()) throw std::invalid_argument("prepare: --out is required");
  const Dataset ds = prepare_dataset(load_dataset(a.data), a.size);
  save_dataset(ds, a.out, a.force);
  nlohmann::ordered_json cfg;
  cfg["command"] = "prepare";
  cfg["data"] = a.data.string();
  cfg["size"] = a.size;
  detail::write_json(a.out / "config.json", cfg);
  log << "prepared " << ds.size() << " samples at " << a.size << "x" << a.size << " in " << a.out.string() << '\n';
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  RunConfig config;
  std::optional<std::string> preset;  // baseline | optimized
  std::optional<std::string> hp;      // "B=4,OP=2,..."
  std::string name = "train";
  std::string model_name;             // defaults to the preset name or "custom"
  bool force = false;
};

inline HyperParams resolve_hyperparams(const TrainArgs& a) {
  if (a.preset && a.hp) throw std::invalid_argument("train: give either --preset or --hp, not both");
  HyperParams hp = a.hp ? parse_hyperparams(*a.hp) : presets::by_name(a.preset.value_or("baseline"));
  require_valid(hp);
  return hp;
}

/// Trains one model and evaluates it on the test part. Returns the run dir.
inline fs::path cmd_train(const TrainArgs& a, std::ostream& log) {
  const RunConfig& cfg = a.config;
  cfg.validate();
  const HyperParams hp = resolve_hyperparams(a);
  const ArchitectureSpec spec = build_architecture(hp, cfg.input_size);
  const fs::path dir = fs::path(cfg.output_root) / a.name;
  const Dataset data = load_configured_data(cfg, cfg.input_size);
  const SplitDataset split = split_dataset(data, cfg.seed, cfg.test_source);
  detail::prepare_output_dir(dir, a.force);
  save_run_config(dir / "config.json", cfg);
  detail::write_json(dir / "architecture.json", architecture_json(spec));
  detail::write_json(dir / "split.json", split_json(split, cfg.test_source));

  StudySetup setup;
  setup.split = &split;
  setup.input_size = cfg.input_size;
  setup.epochs = cfg.epochs;
  setup.augment = cfg.augment;
  setup.checkpoint_policy = cfg.checkpoint_policy;
  setup.threshold = cfg.threshold;
  setup.max_params = cfg.max_params;
  log << "training " << to_string(hp) << " (" << parameter_count(spec) << " parameters) on " << split.train.size()
      << "/" << split.validation.size() << "/" << split.test.size() << " samples\n";
  auto outcome = run_trial(hp, setup, cfg.seed, [&](const EpochRecord& r) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "epoch %d/%d train %.4f val %.4f\n", r.epoch, cfg.epochs, r.train_loss, r.val_loss);
    log << buf << std::flush;
  });

  write_history(dir / "history.csv", outcome.result.history);
  save_checkpoint(dir / "model.ckpt", outcome.result.model);
  TrialRecord rec;
  rec.trial = 1;
  rec.loss = outcome.test_loss;
  rec.hp = hp;
  rec.state = TrialState::complete;
  rec.seed = cfg.seed;
  const std::vector<TrialRecord> ledger{rec};
  save_ledger(dir / "ledger.csv", ledger);
  write_per_image_metrics(dir / "per_image_metrics.csv", outcome.test_eval);
  const std::string model = a.model_name.empty() ? (a.hp ? "custom" : a.preset.value_or("baseline")) : a.model_name;
  const std::vector<EvaluationSummary> summary{
      summarize(model, database_label(split.test, cfg.test_source), outcome.test_eval)};
  write_summaries(dir / "metrics_summary.csv", summary);
  nlohmann::ordered_json res;
  res["best_epoch"] = outcome.result.best_epoch;
  res["checkpoint_policy"] = to_string(cfg.checkpoint_policy);
  res["test_loss"] = outcome.test_loss;
  res["seed"] = cfg.seed;
  detail::write_json(dir / "result.json", res);

  char buf[160];
  std::snprintf(buf, sizeof(buf), "test loss %.4f  DSC %.4f  JI %.4f  SE %.4f  SP %.4f\n", outcome.test_loss,
                outcome.test_eval.mean.dsc, outcome.test_eval.mean.ji, outcome.test_eval.mean.se,
                outcome.test_eval.mean.sp);
  log << buf << "wrote " << dir.string() << '\n';
  return dir;
}

// ---------------------------------------------------------------------------
// optimize
// ---------------------------------------------------------------------------

struct OptimizeArgs {
  RunConfig config;
  std::string name = "study";
  std::optional<fs::path> resume;  // ledger of an interrupted study
  bool keep_checkpoints = false;
  bool force = false;
};

inline constexpr std::string_view kTrialMetricsHeader = "trial,dsc,ji,se,sp";

inline std::string trial_dir_name(int trial, std::uint64_t seed) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "trial_%04d_seed%llu", trial, static_cast<unsigned long long>(seed));
  return buf;
}

/// Runs the TPE study; the ledger is flushed after every trial. Returns the study dir.
inline fs::path cmd_optimize(const OptimizeArgs& a, std::ostream& log) {
  const RunConfig& cfg = a.config;
  cfg.validate();
  const fs::path dir = fs::path(cfg.output_root) / a.name;
  std::vector<TrialRecord> resumed;
  if (a.resume) {
    if (!fs::exists(*a.resume)) throw std::runtime_error("resume ledger not found: " + a.resume->string());
    resumed = read_ledger(*a.resume);
  }
  const Dataset data = load_configured_data(cfg, cfg.input_size);
  const SplitDataset split = split_dataset(data, cfg.seed, cfg.test_source);
  detail::prepare_output_dir(dir, a.force || a.resume.has_value());
  save_run_config(dir / "config.json", cfg);
  detail::write_json(dir / "split.json", split_json(split, cfg.test_source));
  fs::create_directories(dir / "trials");

  // Keep per-trial metrics of the resumed trials, drop anything newer.
  std::vector<std::string> kept_metrics;
  if (!resumed.empty() && fs::exists(dir / "trial_metrics.csv")) {
    std::ifstream in(dir / "trial_metrics.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (detail::trim(line).empty()) continue;
      const int t = std::stoi(detail::split_csv_line(line).at(0));
      if (t >= 1 && t <= static_cast<int>(resumed.size())) kept_metrics.push_back(line);
    }
  }
  std::ofstream metrics_out(dir / "trial_metrics.csv", std::ios::trunc);
  metrics_out << kTrialMetricsHeader << '\n';
  for (const auto& l : kept_metrics) metrics_out << l << '\n';
  metrics_out.flush();
  std::ofstream timings_out(dir / "timings.csv", resumed.empty() ? std::ios::trunc : std::ios::app);
  if (resumed.empty()) timings_out << "trial,wall_time_s\n";

  StudySetup setup;
  setup.split = &split;
  setup.input_size = cfg.input_size;
  setup.epochs = cfg.epochs;
  setup.augment = cfg.augment;
  setup.checkpoint_policy = cfg.checkpoint_policy;
  setup.threshold = cfg.threshold;
  setup.max_params = cfg.max_params;

  double best_loss = std::numeric_limits<double>::infinity();
  for (const auto& r : resumed) {
    if (r.state == TrialState::complete) best_loss = std::min(best_loss, r.loss);
  }

  auto objective = [&](const HyperParams& hp, const TrialContext& ctx) {
    const fs::path tdir = dir / "trials" / trial_dir_name(ctx.trial, ctx.seed);
    fs::create_directories(tdir);
    auto outcome = run_trial(hp, setup, ctx.seed);
    write_history(tdir / "history.csv", outcome.result.history);
    if (a.keep_checkpoints) save_checkpoint(tdir / "model.ckpt", outcome.result.model);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f", ctx.trial, outcome.test_eval.mean.dsc,
                  outcome.test_eval.mean.ji, outcome.test_eval.mean.se, outcome.test_eval.mean.sp);
    metrics_out << buf << '\n';
    metrics_out.flush();
    if (outcome.test_loss < best_loss) {
      best_loss = outcome.test_loss;
      save_checkpoint(dir / "best.ckpt", outcome.result.model);
      detail::write_json(dir / "best_architecture.json", architecture_json(outcome.result.model.spec()));
    }
    return outcome.test_loss;
  };

  StudyOptions opts;
  opts.ledger_path = dir / "ledger.csv";
  opts.resume = resumed;
  opts.on_trial = [&](const TrialRecord& r, const std::string& error) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "trial %d/%d loss %.4f %s (%.1f s) ", r.trial, cfg.n_trials, r.loss,
                  std::string(to_string(r.state)).c_str(), r.wall_time_s);
    log << buf << to_string(r.hp);
    if (!error.empty()) log << "  [" << error << "]";
    log << '\n' << std::flush;
    timings_out << r.trial << ',' << r.wall_time_s << '\n';
    timings_out.flush();
  };
  if (!resumed.empty()) log << "resuming after trial " << resumed.size() << '\n';
  const StudyResult result = optimize(objective, SearchSpace{}, cfg.n_trials, cfg.tpe, cfg.seed, opts);
  char buf[96];
  std::snprintf(buf, sizeof(buf), "best trial %d loss %.4f ", result.best.trial, result.best.loss);
  log << buf << to_string(result.best.hp) << "\nwrote " << dir.string() << '\n';
  return dir;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  RunConfig config;  // data roots, preprocess flag and threshold
  fs::path checkpoint;
  std::optional<fs::path> split;  // restrict to the recorded test part
  std::string model_name = "model";
  std::optional<std::string> database;
  fs::path out;
  bool force = false;
};

inline EvaluationSummary cmd_eval(const EvalArgs& a, std::ostream& log) {
  const RunConfig& cfg = a.config;
  if (!fs::exists(a.checkpoint)) throw std::runtime_error("checkpoint not found: " + a.checkpoint.string());
  if (a.split && !fs::exists(*a.split)) throw std::runtime_error("split file not found: " + a.split->string());
  if (a.out.empty()) throw std::invalid_argument("eval: --out is required");
  UNet<float> model = load_checkpoint(a.checkpoint);
  Dataset data = load_configured_data(cfg, model.input_size());
  if (a.split) data = select_ids(data, read_split_test_ids(*a.split));
  detail::prepare_output_dir(a.out, a.force);
  RunConfig resolved = cfg;
  resolved.input_size = model.input_size();
  save_run_config(a.out / "config.json", resolved);
  const DatasetEvaluation ev = evaluate_model(model, data, cfg.threshold, 4);
  write_per_image_metrics(a.out / "per_image_metrics.csv", ev);
  const EvaluationSummary s = summarize(a.model_name, a.database.value_or(database_label(data, std::nullopt)), ev);
  const std::vector<EvaluationSummary> rows{s};
  write_summaries(a.out / "metrics_summary.csv", rows);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu images  DSC %.4f  JI %.4f  SE %.4f  SP %.4f\n", s.n, s.mean.dsc, s.mean.ji,
                s.mean.se, s.mean.sp);
  log << buf;
  return s;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportArgs {
  std::vector<fs::path> evaluations;  // metrics_summary.csv files
  std::optional<fs::path> ledger;
  fs::path out;
  std::string name = "report";
  std::optional<std::string> stem;  // defaults to name + UTC timestamp
};

inline ReportFiles cmd_report(const ReportArgs& a, std::ostream& log) {
  if (a.evaluations.empty() && !a.ledger) throw std::invalid_argument("report: give --eval and/or --ledger");
  if (a.out.empty()) throw std::invalid_argument("report: --out is required");
  std::vector<EvaluationSummary> rows;
  for (const auto& p : a.evaluations) {
    if (!fs::exists(p)) throw std::runtime_error("evaluation file not found: " + p.string());
    for (auto& r : read_summaries(p)) rows.push_back(std::move(r));
  }
  std::optional<std::vector<TrialRecord>> ledger;
  if (a.ledger) {
    if (!fs::exists(*a.ledger)) throw std::runtime_error("ledger not found: " + a.ledger->string());
    ledger = read_ledger(*a.ledger);
  }
  const std::string stem = a.stem.value_or(report_stem(a.name, std::chrono::system_clock::now()));
  const ReportFiles files = render_report(rows, ledger, a.out, stem);
  for (const auto& p : {files.metrics_txt, files.metrics_csv, files.best_trials, files.loss_plot}) {
    if (p) log << "wrote " << p->string() << '\n';
  }
  return files;
}

}  // namespace lungseg
