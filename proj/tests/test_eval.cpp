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
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "lungseg/eval.hpp"
#include "lungseg/report.hpp"
#include "oracles/metrics_oracle.hpp"
#include "test_util.hpp"

namespace {

using namespace lungseg;
using lungseg::testing::read_file;
using lungseg::testing::TempDir;

const std::filesystem::path kFixtures = LUNGSEG_FIXTURES;

Mask mask_from(int h, int w, const std::vector<int>& ones) {
  Mask m(h, w, 0);
  for (int i : ones) m.data()[i] = 1;
  return m;
}

Mask random_mask(int h, int w, double p, Rng& rng) {
  Mask m(h, w, 0);
  for (auto& v : m) v = rng.bernoulli(p) ? 1 : 0;
  return m;
}

std::vector<int> flat(const Mask& m) { return {m.begin(), m.end()}; }

// --- binarize / counts / metrics -------------------------------------------

TEST(Binarize, InclusiveThreshold) {
  EXPECT_EQ(binarize(Image(3, 3, 0.5f)), Mask(3, 3, 1));
  EXPECT_EQ(binarize(Image(3, 3, 0.0f)), Mask(3, 3, 0));
  Image mixed(1, 4, std::vector<float>{0.49f, 0.51f, 0.51f, 0.49f});
  EXPECT_EQ(binarize(mixed), Mask(1, 4, std::vector<std::uint8_t>{0, 1, 1, 0}));
}

TEST(ConfusionCounts, Examples) {
  const Mask gt = mask_from(4, 4, {0, 1, 2, 3, 4});
  EXPECT_EQ(confusion_counts(gt, gt), (ConfusionCounts{5, 0, 0, 11}));

  Mask inv = gt;
  for (auto& v : inv) v = 1 - v;
  const auto c = confusion_counts(inv, gt);
  EXPECT_EQ(c.tp, 0u);
  EXPECT_EQ(c.tn, 0u);
  EXPECT_EQ(c.total(), 16u);

  const Mask gt4 = mask_from(4, 4, {0, 1, 2, 3});
  const Mask pred = mask_from(4, 4, {0, 1, 2, 9});
  EXPECT_EQ(confusion_counts(pred, gt4), (ConfusionCounts{3, 1, 1, 11}));
}

TEST(ConfusionCounts, Errors) {
  EXPECT_THROW(confusion_counts(Mask(2, 2), Mask(2, 3)), std::invalid_argument);
  EXPECT_THROW(confusion_counts(Mask(2, 2, 2), Mask(2, 2)), std::invalid_argument);
}

TEST(Metrics, Examples) {
  auto m = metrics({3, 1, 1, 11});
  EXPECT_DOUBLE_EQ(m.dsc, 0.75);
  EXPECT_DOUBLE_EQ(m.ji, 0.6);
  EXPECT_DOUBLE_EQ(m.se, 0.75);
  EXPECT_NEAR(m.sp, 0.9167, 5e-5);
  EXPECT_EQ(m.undefined, 0u);

  m = metrics({5, 0, 0, 11});
  EXPECT_EQ(m.dsc, 1.0);
  EXPECT_EQ(m.ji, 1.0);
  EXPECT_EQ(m.se, 1.0);
  EXPECT_EQ(m.sp, 1.0);

  m = metrics({0, 0, 4, 12});
  EXPECT_EQ(m.dsc, 0.0);
  EXPECT_EQ(m.ji, 0.0);
  EXPECT_EQ(m.se, 0.0);
  EXPECT_EQ(m.sp, 1.0);
}

TEST(Metrics, ZeroOverZeroIsOneAndFlagged) {
  auto m = metrics({0, 0, 0, 16});  // no foreground anywhere
  EXPECT_EQ(m.dsc, 1.0);
  EXPECT_EQ(m.ji, 1.0);
  EXPECT_EQ(m.se, 1.0);
  EXPECT_EQ(m.undefined, kDscUndefined | kJiUndefined | kSeUndefined);
  m = metrics({16, 0, 0, 0});  // no background
  EXPECT_EQ(m.sp, 1.0);
  EXPECT_EQ(m.undefined, static_cast<unsigned>(kSpUndefined));
}

TEST(Metrics, MatchBruteForceOracle) {
  Rng rng(1);
  for (int c = 0; c < 1000; ++c) {
    const double p = rng.uniform();
    const Mask pred = random_mask(32, 32, rng.uniform(), rng);
    const Mask gt = random_mask(32, 32, p, rng);
    const auto counts = confusion_counts(pred, gt);
    ASSERT_EQ(counts.total(), 1024u);
    const auto m = metrics(counts);
    const auto f = oracle::segmentation_fractions(flat(pred), flat(gt));
    ASSERT_EQ(m.dsc, oracle::value(f.dsc)) << "case " << c;
    ASSERT_EQ(m.ji, oracle::value(f.ji)) << "case " << c;
    ASSERT_EQ(m.se, oracle::value(f.se)) << "case " << c;
    ASSERT_EQ(m.sp, oracle::value(f.sp)) << "case " << c;
  }
}

TEST(Metrics, DiceJaccardIdentity) {
  Rng rng(2);
  for (int c = 0; c < 1000; ++c) {
    const Mask pred = random_mask(32, 32, rng.uniform(), rng);
    const Mask gt = random_mask(32, 32, rng.uniform(), rng);
    const auto counts = confusion_counts(pred, gt);
    if (counts.tp + counts.fp + counts.fn == 0) continue;
    const auto m = metrics(counts);
    ASSERT_NEAR(m.dsc, 2 * m.ji / (1 + m.ji), 1e-12);
    ASSERT_LE(m.se, 1.0);
    ASSERT_LE(m.sp, 1.0);
  }
}

TEST(Metrics, ThresholdMonotone) {
  Rng rng(3);
  for (int c = 0; c < 50; ++c) {
    Image prob(16, 16);
    for (auto& v : prob) v = static_cast<float>(rng.uniform());
    const Mask gt = random_mask(16, 16, 0.4, rng);
    double prev_se = 2.0, prev_sp = -1.0;
    for (int k = 0; k <= 20; ++k) {
      const auto m = metrics(confusion_counts(binarize(prob, k / 20.0), gt));
      ASSERT_LE(m.se, prev_se);
      ASSERT_GE(m.sp, prev_sp);
      prev_se = m.se;
      prev_sp = m.sp;
    }
  }
}

// --- dataset evaluation ----------------------------------------------------

Dataset random_dataset(int n, Rng& rng) {
  Dataset d;
  d.name = "test";
  for (int i = 0; i < n; ++i) {
    SampleRecord s;
    s.id = "s" + std::to_string(i);
    s.mask = random_mask(8, 8, 0.4, rng);
    s.image = Image(8, 8);
    for (std::size_t k = 0; k < s.image.size(); ++k) s.image.data()[k] = static_cast<float>(rng.uniform());
    d.samples.push_back(s);
  }
  return d;
}

std::vector<Image> pass_through(std::span<const Image> batch) { return {batch.begin(), batch.end()}; }

TEST(EvaluatePredictions, PerfectAndEmptyPredictors) {
  Rng rng(4);
  const auto d = random_dataset(6, rng);
  const auto perfect = evaluate_predictions(
      [&](std::span<const Image> batch) {
        std::vector<Image> out;
        for (const auto& im : batch) {
          for (const auto& s : d.samples) {
            if (&s.image == &im || s.image == im) {
              Image p(8, 8);
              for (std::size_t k = 0; k < p.size(); ++k) p.data()[k] = s.mask.data()[k];
              out.push_back(p);
              break;
            }
          }
        }
        return out;
      },
      d);
  EXPECT_EQ(perfect.per_image.size(), 6u);
  EXPECT_EQ(perfect.mean.dsc, 1.0);

  const auto zero = evaluate_predictions(
      [](std::span<const Image> batch) { return std::vector<Image>(batch.size(), Image(8, 8, 0.0f)); }, d);
  EXPECT_EQ(zero.mean.se, 0.0);
  EXPECT_EQ(zero.mean.sp, 1.0);

  EXPECT_THROW(evaluate_predictions(pass_through, Dataset{}), std::invalid_argument);
}

TEST(EvaluatePredictions, MeanIsUnweightedAndOrderFree) {
  Rng rng(5);
  auto d = random_dataset(11, rng);
  const auto a = evaluate_predictions(pass_through, d, 0.5, 3);
  double dsc = 0;
  for (const auto& e : a.per_image) dsc += e.metrics.dsc;
  EXPECT_NEAR(a.mean.dsc, dsc / 11, 1e-15);
  for (int rep = 0; rep < 5; ++rep) {
    rng.shuffle(d.samples);
    const auto b = evaluate_predictions(pass_through, d, 0.5, 4);
    EXPECT_NEAR(a.mean.dsc, b.mean.dsc, 1e-12);
    EXPECT_NEAR(a.mean.ji, b.mean.ji, 1e-12);
    EXPECT_NEAR(a.mean.se, b.mean.se, 1e-12);
    EXPECT_NEAR(a.mean.sp, b.mean.sp, 1e-12);
  }
}

TEST(EvaluateModel, ConstantModelMatchesPredictorPath) {
  Rng rng(6);
  const auto d = random_dataset(5, rng);
  HyperParams hp;
  hp.pool_levels = 3;
  hp.doublings = 0;
  hp.first_features = 4;
  auto model = instantiate<float>(build_architecture(hp, 8), 3);
  const auto a = evaluate_model(model, d);
  const auto b = evaluate_predictions([&](std::span<const Image> batch) { return model.predict(batch, 4); }, d);
  EXPECT_EQ(a.mean.dsc, b.mean.dsc);
  EXPECT_EQ(a.per_image.size(), 5u);
}

TEST(EvaluatePredictions, PerImageCsv) {
  Rng rng(7);
  const auto d = random_dataset(2, rng);
  const auto ev = evaluate_predictions(pass_through, d);
  TempDir dir;
  write_per_image_metrics(dir / "m.csv", ev);
  const auto text = read_file(dir / "m.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), "id,tp,fp,fn,tn,dsc,ji,se,sp,undefined");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

// --- reports ---------------------------------------------------------------

EvaluationSummary summary(std::string model, std::string db, double dsc, double ji, double se, double sp) {
  EvaluationSummary s;
  s.model = std::move(model);
  s.database = std::move(db);
  s.n = 10;
  s.mean.dsc = dsc;
  s.mean.ji = ji;
  s.mean.se = se;
  s.mean.sp = sp;
  return s;
}

TEST(Report, SingleEvaluationTable) {
  const std::vector<EvaluationSummary> rows = {summary("Optimized model", "JSRT", 0.976, 0.954, 0.987, 0.985)};
  const auto text = format_metrics_table(rows);
  EXPECT_NE(text.find("Optimized model  JSRT      0.976  0.954  0.987  0.985\n"), std::string::npos) << text;
  EXPECT_NE(text.find(kPerImageMeanNote), std::string::npos);
  EXPECT_EQ(format_metrics_csv(rows), "model,database,dsc,ji,se,sp\nOptimized model,JSRT,0.976,0.954,0.987,0.985\n");
}

TEST(Report, SummariesRoundTrip) {
  TempDir dir;
  const std::vector<EvaluationSummary> rows = {summary("a", "OWN", 0.9, 0.8, 0.7, 0.6),
                                               summary("b", "MIXED", 0.123456, 0.5, 1.0, 0.0)};
  write_summaries(dir / "s.csv", rows);
  const auto back = read_summaries(dir / "s.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].model, "b");
  EXPECT_EQ(back[1].database, "MIXED");
  EXPECT_EQ(back[1].mean.dsc, 0.123456);
  EXPECT_EQ(back[0].n, 10u);
}

TEST(Report, BestTrialsFromFixture) {
  const auto ledger = read_ledger(kFixtures / "reference_ledger.csv");
  const auto text = format_best_trials(ledger);
  const std::string expected =
      "Rank  Trial  Loss    Hyperparameters\n"
      "1     95     0.0733  " + to_string(presets::optimized()) + "\n";
  EXPECT_EQ(text.substr(0, expected.size()), expected);
  const auto top = ranked_trials(ledger);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[1].trial, 66);
  EXPECT_EQ(top[2].trial, 68);
  EXPECT_NE(text.find("2     66     0.0744"), std::string::npos);
  EXPECT_NE(text.find("3     68     0.0744"), std::string::npos);
}

TEST(Report, TiesAtCutoffAreAllListed) {
  std::vector<TrialRecord> ledger(6);
  const double losses[] = {0.3, 0.1, 0.2, 0.2, 0.5, 0.2};
  for (int i = 0; i < 6; ++i) {
    ledger[i].trial = i + 1;
    ledger[i].loss = losses[i];
  }
  const auto top = ranked_trials(ledger, 2);
  ASSERT_EQ(top.size(), 4u);
  EXPECT_EQ(top[0].trial, 2);
  EXPECT_EQ(top[1].trial, 3);
  EXPECT_EQ(top[2].trial, 4);
  EXPECT_EQ(top[3].trial, 6);
}

TEST(Report, LossPlotSvg) {
  auto ledger = read_ledger(kFixtures / "reference_ledger.csv");
  ledger[4].state = TrialState::failed;
  const auto svg = loss_plot_svg(ledger);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  std::size_t circles = 0;
  for (std::size_t p = svg.find("<circle"); p != std::string::npos; p = svg.find("<circle", p + 1)) ++circles;
  EXPECT_EQ(circles, 100u);
  EXPECT_NE(svg.find("#999999"), std::string::npos);
  EXPECT_NE(svg.find("<path"), std::string::npos);
  EXPECT_THROW(loss_plot_svg({}), std::invalid_argument);
}

TEST(Report, RenderWritesFiles) {
  TempDir dir;
  const std::vector<EvaluationSummary> rows = {summary("m", "JSRT", 0.9, 0.8, 0.9, 0.95)};
  const auto ledger = read_ledger(kFixtures / "reference_ledger.csv");
  const auto all = render_report(rows, ledger, dir.path(), "study_20260101-000000");
  ASSERT_TRUE(all.metrics_txt && all.metrics_csv && all.best_trials && all.loss_plot);
  EXPECT_EQ(all.best_trials->filename(), "study_20260101-000000_best_trials.txt");
  EXPECT_TRUE(std::filesystem::exists(*all.loss_plot));

  const auto only_ledger = render_report({}, ledger, dir / "b", "s");
  EXPECT_FALSE(only_ledger.metrics_txt);
  EXPECT_TRUE(only_ledger.loss_plot);
  EXPECT_THROW(render_report({}, std::nullopt, dir.path(), "s"), std::invalid_argument);
}

TEST(Report, StemIsUtcTimestamp) {
  const auto t = std::chrono::system_clock::from_time_t(1'700'000'000);  // 2023-11-14 22:13:20 UTC
  EXPECT_EQ(report_stem("study", t), "study_20231114-221320");
}

}  // namespace
