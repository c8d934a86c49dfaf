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

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <gtest/gtest.h>

#include "lungseg/data.hpp"
#include "lungseg/model.hpp"
#include "lungseg/optim.hpp"
#include "lungseg/training.hpp"
#include "lungseg/unet.hpp"

namespace {

using namespace lungseg;

double loss_of(const std::vector<double>& p, const std::vector<std::uint8_t>& t) {
  return dice_loss(std::span<const double>(p), std::span<const std::uint8_t>(t));
}

// --- Dice loss ------------------------------------------------------------

TEST(DiceLoss, PerfectOverlapIsZero) {
  std::vector<std::uint8_t> t(16, 0);
  for (int i = 0; i < 5; ++i) t[i * 3] = 1;
  const std::vector<double> p(t.begin(), t.end());
  EXPECT_DOUBLE_EQ(loss_of(p, t), 0.0);
}

TEST(DiceLoss, EmptyPredictionApproachesOne) {
  const std::vector<std::uint8_t> t(10000, 1);
  const std::vector<double> p(10000, 0.0);
  EXPECT_DOUBLE_EQ(loss_of(p, t), 1.0 - 1.0 / 10001.0);
  // At test-split scale (hundreds of thousands of lung pixels) the ledger
  // prints the ceiling as 1.0000.
  const std::vector<std::uint8_t> big(200000, 1);
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%.4f", loss_of(std::vector<double>(200000, 0.0), big));
  EXPECT_STREQ(buf, "1.0000");
}

TEST(DiceLoss, HalfPredictionHandValue) {
  std::vector<std::uint8_t> t(16, 0);
  std::fill(t.begin(), t.begin() + 8, 1);
  const std::vector<double> p(16, 0.5);
  EXPECT_NEAR(loss_of(p, t), 1.0 - 9.0 / 17.0, 1e-15);
}

TEST(DiceLoss, RejectsMismatchAndNonBinaryTargets) {
  const std::vector<double> p(4, 0.5);
  EXPECT_THROW(loss_of(p, std::vector<std::uint8_t>(5, 0)), std::invalid_argument);
  EXPECT_THROW(loss_of(p, std::vector<std::uint8_t>{0, 1, 2, 0}), std::invalid_argument);
  EXPECT_THROW(dice_loss(Image(4, 4), Mask(4, 5)), std::invalid_argument);
}

TEST(DiceLoss, RangeAndPixelOrderInvariance) {
  Rng rng(31);
  for (int k = 0; k < 200; ++k) {
    std::vector<double> p(64);
    std::vector<std::uint8_t> t(64);
    for (int i = 0; i < 64; ++i) {
      p[i] = rng.uniform();
      t[i] = rng.bernoulli(0.3);
    }
    const double l = loss_of(p, t);
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, 1.0);
    std::vector<int> perm(64);
    for (int i = 0; i < 64; ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<double> p2(64);
    std::vector<std::uint8_t> t2(64);
    for (int i = 0; i < 64; ++i) {
      p2[i] = p[perm[i]];
      t2[i] = t[perm[i]];
    }
    EXPECT_NEAR(loss_of(p2, t2), l, 1e-14);
  }
}

TEST(DiceLoss, GradientMatchesCentralDifferences) {
  Rng rng(4);
  const double h = 1e-4;
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    std::vector<double> p(64), g(64);
    std::vector<std::uint8_t> t(64);
    for (int i = 0; i < 64; ++i) {
      p[i] = rng.uniform(0.01, 0.99);
      t[i] = rng.bernoulli(0.4);
    }
    dice_loss_gradient(std::span<const double>(p), std::span<const std::uint8_t>(t), std::span<double>(g));
    for (int i = 0; i < 64; ++i) {
      auto q = p;
      q[i] = p[i] + h;
      const double up = loss_of(q, t);
      q[i] = p[i] - h;
      const double down = loss_of(q, t);
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(std::abs(fd), std::abs(g[i])));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

// --- optimizers -----------------------------------------------------------

TEST(MakeOptimizer, CodesAndErrors) {
  EXPECT_EQ(make_optimizer<float>(1, 0.001)->kind(), OptimizerKind::adam);
  const auto nadam = make_optimizer<float>(2, 0.001);
  EXPECT_EQ(nadam->kind(), OptimizerKind::nadam);
  EXPECT_DOUBLE_EQ(nadam->learning_rate(), 0.001);
  const auto rms = make_optimizer<float>(3, 0.005);
  EXPECT_EQ(rms->kind(), OptimizerKind::rmsprop);
  EXPECT_DOUBLE_EQ(rms->learning_rate(), 0.005);
  EXPECT_THROW(make_optimizer<float>(0, 0.001), std::invalid_argument);
  EXPECT_THROW(make_optimizer<float>(4, 0.001), std::invalid_argument);
  EXPECT_THROW(make_optimizer<float>(1, 0.0), std::invalid_argument);
}

/// Runs `steps` updates of one scalar parameter with gradient g(x) = 2 (x - 3).
std::vector<double> trajectory(int code, double lr, int steps) {
  std::vector<double> value{0.5}, grad{0.0};
  auto opt = make_optimizer<double>(code, lr);
  std::vector<ParamRef<double>> params{{"x", value, grad}};
  std::vector<double> out;
  for (int s = 0; s < steps; ++s) {
    grad[0] = 2 * (value[0] - 3);
    opt->step(params);
    out.push_back(value[0]);
  }
  return out;
}

TEST(Optimizers, AdamMatchesTextbookUpdate) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-7;
  double x = 0.5, m = 0, v = 0;
  const auto got = trajectory(1, lr, 50);
  for (int t = 1; t <= 50; ++t) {
    const double g = 2 * (x - 3);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(got[t - 1], x, 1e-6) << "step " << t;
  }
}

TEST(Optimizers, NadamMatchesScheduledNesterovUpdate) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-7, psi = 0.004;
  auto mu = [&](int t) { return b1 * (1 - 0.5 * std::pow(0.96, t * psi)); };
  double x = 0.5, m = 0, v = 0, prod = 1;
  const auto got = trajectory(2, lr, 50);
  for (int t = 1; t <= 50; ++t) {
    const double g = 2 * (x - 3);
    prod *= mu(t);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double m_hat = mu(t + 1) * m / (1 - prod * mu(t + 1)) + (1 - mu(t)) * g / (1 - prod);
    x -= lr * m_hat / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(got[t - 1], x, 1e-6) << "step " << t;
  }
}

TEST(Optimizers, RmsPropMatchesTextbookUpdate) {
  const double lr = 0.01, rho = 0.9, eps = 1e-7;
  double x = 0.5, v = 0;
  const auto got = trajectory(3, lr, 50);
  for (int t = 1; t <= 50; ++t) {
    const double g = 2 * (x - 3);
    v = rho * v + (1 - rho) * g * g;
    x -= lr * g / (std::sqrt(v) + eps);
    EXPECT_NEAR(got[t - 1], x, 1e-6) << "step " << t;
  }
}

TEST(Optimizers, AllConvergeOnAQuadratic) {
  for (int code : {1, 2, 3}) {
    const auto path = trajectory(code, 0.05, 2000);
    EXPECT_NEAR(path.back(), 3.0, 0.05) << "optimizer " << code;
  }
}

// --- training loop --------------------------------------------------------

HyperParams small_hp() {
  HyperParams hp = presets::optimized();
  hp.first_features = 4;
  hp.pool_levels = 3;
  hp.doublings = 1;
  return hp;
}

SplitDataset small_split(int n, std::uint64_t seed = 1) {
  return split_dataset(generate_phantom_dataset(n, 32, 0.2, seed), seed);
}

TEST(Train, OneEpochGivesOneHistoryRow) {
  const auto split = small_split(12);
  const auto hp = small_hp();
  auto r = train(instantiate<float>(build_architecture(hp, 32), 1), split, TrainConfig::from_hyperparams(hp, 1, 1));
  EXPECT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, 1);
  EXPECT_EQ(r.history[0].epoch, 1);
}

TEST(Train, SameSeedSameHistory) {
  const auto split = small_split(12);
  const auto hp = small_hp();
  const auto cfg = TrainConfig::from_hyperparams(hp, 3, 7);
  auto a = train(instantiate<float>(build_architecture(hp, 32), 7), split, cfg);
  auto b = train(instantiate<float>(build_architecture(hp, 32), 7), split, cfg);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
  }
  EXPECT_EQ(a.model.state(), b.model.state());
}

TEST(Train, BestValidationCheckpointIsNoWorseThanFinalEpoch) {
  const auto split = small_split(20, 3);
  const auto hp = small_hp();
  auto cfg = TrainConfig::from_hyperparams(hp, 6, 3);
  auto r = train(instantiate<float>(build_architecture(hp, 32), 3), split, cfg);
  ASSERT_GE(r.best_epoch, 1);
  ASSERT_LE(r.best_epoch, 6);
  EXPECT_LE(r.final_validation_loss, r.history.back().val_loss);
  double min_val = 1.0;
  for (const auto& e : r.history) min_val = std::min(min_val, e.val_loss);
  EXPECT_EQ(r.final_validation_loss, min_val);
  // The returned weights reproduce the recorded validation loss.
  EXPECT_NEAR(dataset_dice_loss(r.model, split.validation, hp.batch_size), r.final_validation_loss, 1e-6);

  cfg.checkpoint_policy = CheckpointPolicy::last;
  auto last = train(instantiate<float>(build_architecture(hp, 32), 3), split, cfg);
  EXPECT_EQ(last.best_epoch, 6);
  EXPECT_EQ(last.final_validation_loss, last.history.back().val_loss);
}

TEST(Train, SmallModelHalvesItsTrainingLossIn50Epochs) {
  Dataset ds = generate_phantom_dataset(8, 64, 0.0, 21);
  SplitDataset split;
  split.train = ds;
  HyperParams hp = small_hp();
  hp.first_features = 8;
  hp.doublings = 3;
  auto cfg = TrainConfig::from_hyperparams(hp, 50, 21);
  auto r = train(instantiate<float>(build_architecture(hp, 64), 21), split, cfg);
  EXPECT_LT(r.history.back().train_loss, 0.5 * r.history.front().train_loss);
}

TEST(Train, RejectsBadInputs) {
  const auto hp = small_hp();
  SplitDataset empty;
  EXPECT_THROW(train(instantiate<float>(build_architecture(hp, 32), 1), empty, TrainConfig{}), std::invalid_argument);
  const auto split = small_split(12);
  auto cfg = TrainConfig::from_hyperparams(hp, 0, 1);
  EXPECT_THROW(train(instantiate<float>(build_architecture(hp, 32), 1), split, cfg), std::invalid_argument);
  // Input size mismatch between model and data.
  cfg.epochs = 1;
  EXPECT_THROW(train(instantiate<float>(build_architecture(hp, 64), 1), split, cfg), std::invalid_argument);
}

TEST(Train, NonFiniteLossNamesTheEpoch) {
  const auto split = small_split(12);
  HyperParams hp = small_hp();
  hp.batch_norm = 0;
  auto cfg = TrainConfig::from_hyperparams(hp, 3, 1);
  cfg.learning_rate = 1e30;
  try {
    train(instantiate<float>(build_architecture(hp, 32), 1), split, cfg);
    FAIL() << "expected divergence";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
  }
}

TEST(History, WritesOneRowPerEpoch) {
  const auto path = std::filesystem::temp_directory_path() / "lungseg_history_test.csv";
  write_history(path, {{1, 0.5, 0.25}, {2, 0.125, 0.0625}});
  std::ifstream in(path);
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(all, "epoch,train_loss,val_loss\n1,0.500000,0.250000\n2,0.125000,0.062500\n");
  std::filesystem::remove(path);
}

}  // namespace
