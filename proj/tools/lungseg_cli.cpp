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

// Command-line front end: phantom, prepare, train, optimize, eval, report.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lungseg/commands.hpp"

namespace {

using namespace lungseg;

/// Flags shared by commands that take a RunConfig. Unset flags leave the
/// config file (or default) value alone.
struct RunFlags {
  std::optional<std::string> config;
  std::vector<std::string> data;
  std::optional<int> input_size, epochs, n_trials;
  std::optional<std::uint64_t> seed, max_params;
  std::optional<std::string> output_root, test_source, checkpoint_policy;
  std::optional<double> threshold;
  bool no_augment = false;
  bool no_preprocess = false;
  std::optional<int> n_startup, n_candidates;
  std::optional<double> gamma, prior_weight;
};

void add_run_flags(CLI::App* app, RunFlags& f, bool training, bool study) {
  app->add_option("--config", f.config, "JSON run config")->check(CLI::ExistingFile);
  app->add_option("--data", f.data, "Dataset directory (repeatable)");
  app->add_option("--output-root", f.output_root, "Output root (overrides $" + std::string(kOutputRootEnv) + ")");
  app->add_option("--threshold", f.threshold, "Binarization threshold");
  app->add_flag("--no-preprocess", f.no_preprocess, "Skip histogram equalization and resizing");
  if (!training) return;
  app->add_option("--input-size", f.input_size, "Model input size (divisible by 2^N)");
  app->add_option("--epochs", f.epochs, "Training epochs");
  app->add_option("--seed", f.seed, "Random seed");
  app->add_option("--test-source", f.test_source, "Draw the test part from one source (JSRT, MONTGOMERY, OWN, PHANTOM)");
  app->add_option("--checkpoint-policy", f.checkpoint_policy, "best_validation or last");
  app->add_option("--max-params", f.max_params, "Fail models above this parameter count (0 = unlimited)");
  app->add_flag("--no-augment", f.no_augment, "Disable training augmentation");
  if (!study) return;
  app->add_option("--n-trials", f.n_trials, "Total trials in the study");
  app->add_option("--n-startup", f.n_startup, "Random trials before TPE");
  app->add_option("--gamma", f.gamma, "Good-trial quantile");
  app->add_option("--n-candidates", f.n_candidates, "TPE candidates per suggestion");
  app->add_option("--prior-weight", f.prior_weight, "Pseudo-count per categorical value");
}

RunConfig resolve(const RunFlags& f) {
  RunConfig c = f.config ? load_run_config(*f.config) : RunConfig{};
  if (!f.data.empty()) c.data = f.data;
  if (f.input_size) c.input_size = *f.input_size;
  if (f.epochs) c.epochs = *f.epochs;
  if (f.n_trials) c.n_trials = *f.n_trials;
  if (f.seed) c.seed = *f.seed;
  if (f.max_params) c.max_params = *f.max_params;
  if (f.test_source) c.test_source = parse_source_db(*f.test_source);
  if (f.checkpoint_policy) c.checkpoint_policy = parse_checkpoint_policy(*f.checkpoint_policy);
  if (f.threshold) c.threshold = *f.threshold;
  if (f.no_augment) c.augment = false;
  if (f.no_preprocess) c.preprocess = false;
  if (f.n_startup) c.tpe.n_startup = *f.n_startup;
  if (f.n_candidates) c.tpe.n_candidates = *f.n_candidates;
  if (f.gamma) c.tpe.gamma = *f.gamma;
  if (f.prior_weight) c.tpe.prior_weight = *f.prior_weight;
  c.output_root = resolve_output_root(c, f.output_root);
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"U-net lung segmentation toolkit with TPE hyperparameter search", "lungseg"};
  app.require_subcommand(1);

  PhantomArgs phantom;
  std::string phantom_source = "PHANTOM";
  auto* ph = app.add_subcommand("phantom", "Generate a synthetic image/mask dataset");
  ph->add_option("--n", phantom.n, "Number of samples")->capture_default_str();
  ph->add_option("--size", phantom.size, "Image side length")->capture_default_str();
  ph->add_option("--severe", phantom.severe_fraction, "Fraction with severe opacities")->capture_default_str();
  ph->add_option("--seed", phantom.seed, "Random seed")->capture_default_str();
  ph->add_option("--out", phantom.out, "Output directory")->required();
  ph->add_option("--source", phantom_source, "Source tag written to the manifest")->capture_default_str();
  ph->add_option("--id-prefix", phantom.id_prefix, "Sample id prefix")->capture_default_str();
  ph->add_flag("--force", phantom.force, "Overwrite a populated directory");

  PrepareArgs prepare;
  auto* pr = app.add_subcommand("prepare", "Equalize and resize a dataset");
  pr->add_option("--data", prepare.data, "Input dataset directory")->required();
  pr->add_option("--out", prepare.out, "Output directory")->required();
  pr->add_option("--size", prepare.size, "Target side length")->capture_default_str();
  pr->add_flag("--force", prepare.force, "Overwrite a populated directory");

  TrainArgs train;
  RunFlags train_flags;
  std::optional<std::string> train_preset, train_hp;
  auto* tr = app.add_subcommand("train", "Train one model and evaluate it on the test part");
  add_run_flags(tr, train_flags, true, false);
  tr->add_option("--preset", train_preset, "baseline or optimized");
  tr->add_option("--hp", train_hp, "Explicit hyperparameters, e.g. B=4,OP=2,R=0.001,F=40,T=4,N=4,D=0.016,BN=1");
  tr->add_option("--name", train.name, "Run directory name under the output root")->capture_default_str();
  tr->add_option("--model-name", train.model_name, "Model label in the metrics summary");
  tr->add_flag("--force", train.force, "Reuse a populated run directory");

  OptimizeArgs opt;
  RunFlags opt_flags;
  std::optional<std::string> resume;
  auto* op = app.add_subcommand("optimize", "Run a TPE hyperparameter study");
  add_run_flags(op, opt_flags, true, true);
  op->add_option("--name", opt.name, "Study directory name under the output root")->capture_default_str();
  op->add_option("--resume", resume, "Ledger of an interrupted study")->check(CLI::ExistingFile);
  op->add_flag("--keep-checkpoints", opt.keep_checkpoints, "Save every trial's model");
  op->add_flag("--force", opt.force, "Reuse a populated study directory");

  EvalArgs ev;
  RunFlags eval_flags;
  std::optional<std::string> eval_split, eval_db;
  auto* evc = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_run_flags(evc, eval_flags, false, false);
  evc->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
  evc->add_option("--split", eval_split, "split.json; evaluate only its test part");
  evc->add_option("--model-name", ev.model_name, "Model label")->capture_default_str();
  evc->add_option("--database", eval_db, "Database label");
  evc->add_option("--out", ev.out, "Output directory")->required();
  evc->add_flag("--force", ev.force, "Overwrite a populated directory");

  ReportArgs rep;
  std::vector<std::string> rep_evals;
  std::optional<std::string> rep_ledger, rep_stem;
  auto* rp = app.add_subcommand("report", "Render metric tables, best trials and the loss plot");
  rp->add_option("--eval", rep_evals, "metrics_summary.csv (repeatable)");
  rp->add_option("--ledger", rep_ledger, "Trial ledger");
  rp->add_option("--out", rep.out, "Output directory")->required();
  rp->add_option("--name", rep.name, "Report name, used in file names")->capture_default_str();
  rp->add_option("--stem", rep_stem, "Exact file-name stem (default: name + UTC timestamp)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*ph) {
      phantom.source = parse_source_db(phantom_source);
      cmd_phantom(phantom, std::cout);
    } else if (*pr) {
      cmd_prepare(prepare, std::cout);
    } else if (*tr) {
      train.config = resolve(train_flags);
      train.preset = train_preset;
      train.hp = train_hp;
      cmd_train(train, std::cout);
    } else if (*op) {
      opt.config = resolve(opt_flags);
      if (resume) opt.resume = *resume;
      cmd_optimize(opt, std::cout);
    } else if (*evc) {
      ev.config = resolve(eval_flags);
      if (eval_split) ev.split = *eval_split;
      ev.database = eval_db;
      cmd_eval(ev, std::cout);
    } else if (*rp) {
      for (const auto& e : rep_evals) rep.evaluations.emplace_back(e);
      if (rep_ledger) rep.ledger = *rep_ledger;
      rep.stem = rep_stem;
      cmd_report(rep, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
