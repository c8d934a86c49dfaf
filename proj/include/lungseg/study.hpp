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

#include <cstdint>
#include <stdexcept>
#include <string>

#include "lungseg/data.hpp"
#include "lungseg/eval.hpp"
#include "lungseg/model.hpp"
#include "lungseg/training.hpp"
#include "lungseg/unet.hpp"

namespace lungseg {

/// Fixed per-study inputs shared by every trial.
struct StudySetup {
  const SplitDataset* split = nullptr;
  int input_size = 256;
  int epochs = 100;
  bool augment = true;
  CheckpointPolicy checkpoint_policy = CheckpointPolicy::best_validation;
  double threshold = kDefaultThreshold;
  std::uint64_t max_params = 0;  // 0 = unlimited
};

struct TrialOutcome {
  double test_loss = 1.0;  // batch-global Dice loss over the test part
  DatasetEvaluation test_eval;
  TrainResult<float> result;
};

/// Builds, trains and scores one model. Invalid hyperparameters, an
/// over-budget model or a diverged run throw, which the study records as a
/// FAILED trial.
inline TrialOutcome run_trial(const HyperParams& hp, const StudySetup& setup, std::uint64_t seed,
                              const EpochObserver& observer = {}) {
  if (setup.split == nullptr) throw std::invalid_argument("run_trial: no data split");
  if (setup.split->test.empty()) throw std::invalid_argument("run_trial: empty test split");
  const ArchitectureSpec spec = build_architecture(hp, setup.input_size);
  const std::uint64_t count = parameter_count(spec);
  if (setup.max_params != 0 && count > setup.max_params) {
    throw std::runtime_error("model has " + std::to_string(count) + " parameters, budget is " +
                             std::to_string(setup.max_params));
  }
  TrainConfig cfg = TrainConfig::from_hyperparams(hp, setup.epochs, seed);
  cfg.augment = setup.augment;
  cfg.checkpoint_policy = setup.checkpoint_policy;
  TrialOutcome out{1.0, {}, train(instantiate<float>(spec, seed), *setup.split, cfg, observer)};
  out.test_loss = dataset_dice_loss(out.result.model, setup.split->test, hp.batch_size);
  out.test_eval = evaluate_model(out.result.model, setup.split->test, setup.threshold, hp.batch_size);
  return out;
}

}  // namespace lungseg
