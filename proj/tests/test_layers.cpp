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

#include <cmath>
#include <functional>
#include <vector>

#include <gtest/gtest.h>

#include "lungseg/layers.hpp"
#include "lungseg/model.hpp"
#include "lungseg/random.hpp"
#include "lungseg/unet.hpp"

namespace {

using lungseg::Rng;
using lungseg::Tensor;
using namespace lungseg::nn;

Tensor<double> random_tensor(int n, int c, int h, int w, Rng& rng) {
  Tensor<double> t(n, c, h, w);
  for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

// Relative error with an absolute floor so near-zero gradients do not blow up.
double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-3, std::abs(a) + std::abs(b)); }

constexpr double kStep = 1e-6;
constexpr double kTol = 1e-6;

/// Checks d<w, f(x)>/dx against central differences.
void check_input_grad(Tensor<double> x, const std::function<Tensor<double>(const Tensor<double>&)>& f,
                      const Tensor<double>& analytic, const Tensor<double>& w) {
  ASSERT_TRUE(analytic.same_shape(x));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x.data[i];
    x.data[i] = keep + kStep;
    const double up = dot(f(x), w);
    x.data[i] = keep - kStep;
    const double down = dot(f(x), w);
    x.data[i] = keep;
    EXPECT_LT(rel_err((up - down) / (2 * kStep), analytic.data[i]), kTol) << "input index " << i;
  }
}

class ConvGrad : public ::testing::TestWithParam<int> {};

TEST_P(ConvGrad, MatchesFiniteDifferences) {
  const int k = GetParam();
  Rng rng(11 + k);
  Conv2d<double> conv(3, 4, k, rng);
  for (auto& p : [&] { std::vector<lungseg::ParamRef<double>> v; conv.collect(v, "c"); return v; }()) {
    for (auto& b : p.value) b = rng.uniform(-0.5, 0.5);
  }
  const auto x = random_tensor(2, 3, 5, 6, rng);
  const auto w = random_tensor(2, 4, 5, 6, rng);
  const auto y = conv.forward(x, true);
  ASSERT_EQ(y.shape(), "2x4x5x6");
  conv.zero_grad();
  const auto dx = conv.backward(w, true);
  check_input_grad(x, [&](const Tensor<double>& in) { return conv.forward(in, false); }, dx, w);

  std::vector<lungseg::ParamRef<double>> params;
  conv.collect(params, "conv");
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + kStep;
      const double up = dot(conv.forward(x, false), w);
      p.value[i] = keep - kStep;
      const double down = dot(conv.forward(x, false), w);
      p.value[i] = keep;
      EXPECT_LT(rel_err((up - down) / (2 * kStep), p.grad[i]), kTol) << p.name << "[" << i << "]";
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Kernels, ConvGrad, ::testing::Values(1, 2, 3));

TEST(Conv2d, EvenKernelPadsBottomRight) {
  Rng rng(1);
  Conv2d<double> conv(1, 1, 2, rng);
  std::vector<lungseg::ParamRef<double>> params;
  conv.collect(params, "c");
  // weights [[1, 2], [3, 4]], bias 0
  for (int i = 0; i < 4; ++i) params[0].value[i] = i + 1;
  Tensor<double> x(1, 1, 2, 2);
  x.data = {1, 2, 3, 4};
  const auto y = conv.forward(x, false);
  // y(0,0) = 1*1 + 2*2 + 3*3 + 4*4; the last row/column see zero padding
  EXPECT_EQ(y.data, (lungseg::AlignedVector<double>{30, 2 * 1 + 4 * 3, 3 * 1 + 4 * 2, 4 * 1}));
}

TEST(Conv2d, RejectsWrongChannelCount) {
  Rng rng(1);
  Conv2d<double> conv(2, 3, 3, rng);
  EXPECT_THROW(conv.forward(Tensor<double>(1, 3, 4, 4), false), std::invalid_argument);
}

TEST(BatchNorm2d, TrainingGradMatchesFiniteDifferences) {
  Rng rng(5);
  BatchNorm2d<double> bn(3);
  std::vector<lungseg::ParamRef<double>> params;
  bn.collect(params, "bn");
  for (auto& p : params) {
    for (auto& v : p.value) v = rng.uniform(0.5, 1.5);
  }
  const auto x = random_tensor(2, 3, 3, 4, rng);
  const auto w = random_tensor(2, 3, 3, 4, rng);
  bn.forward(x, true);
  bn.zero_grad();
  const auto dx = bn.backward(w);
  check_input_grad(x, [&](const Tensor<double>& in) { return bn.forward(in, true); }, dx, w);
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + kStep;
      const double up = dot(bn.forward(x, true), w);
      p.value[i] = keep - kStep;
      const double down = dot(bn.forward(x, true), w);
      p.value[i] = keep;
      EXPECT_LT(rel_err((up - down) / (2 * kStep), p.grad[i]), kTol) << p.name << "[" << i << "]";
    }
  }
}

TEST(BatchNorm2d, TrainingOutputIsNormalizedPerChannel) {
  Rng rng(6);
  BatchNorm2d<double> bn(2);
  auto x = random_tensor(4, 2, 5, 5, rng);
  for (auto& v : x.data) v = 3.0 + 2.0 * v;
  const auto y = bn.forward(x, true);
  for (int ch = 0; ch < 2; ++ch) {
    double s = 0, s2 = 0;
    int m = 0;
    for (int i = 0; i < 4; ++i) {
      for (std::size_t k = 0; k < y.plane(); ++k, ++m) {
        s += y.channel(i, ch)[k];
        s2 += y.channel(i, ch)[k] * y.channel(i, ch)[k];
      }
    }
    EXPECT_NEAR(s / m, 0.0, 1e-12);
    EXPECT_NEAR(s2 / m, 1.0, 2e-2);  // eps keeps it slightly below one
  }
}

TEST(BatchNorm2d, InferenceUsesRunningStatistics) {
  BatchNorm2d<double> bn(1);
  Tensor<double> x(1, 1, 1, 2);
  x.data = {1.0, 3.0};
  bn.forward(x, true);  // batch mean 2, unbiased var 2
  std::vector<std::span<double>> buffers;
  bn.collect_buffers(buffers);
  ASSERT_EQ(buffers.size(), 2u);
  EXPECT_NEAR(buffers[0][0], 0.1 * 2.0, 1e-12);
  EXPECT_NEAR(buffers[1][0], 0.9 * 1.0 + 0.1 * 2.0, 1e-12);
  const auto y = bn.forward(x, false);
  const double sd = std::sqrt(buffers[1][0] + BatchNorm2d<double>::kEpsilon);
  EXPECT_NEAR(y.data[0], (1.0 - buffers[0][0]) / sd, 1e-12);
}

TEST(MaxPool2, RoutesGradientToArgmax) {
  Rng rng(8);
  MaxPool2<double> pool;
  const auto x = random_tensor(2, 2, 4, 6, rng);
  const auto w = random_tensor(2, 2, 2, 3, rng);
  const auto y = pool.forward(x, true);
  ASSERT_EQ(y.shape(), "2x2x2x3");
  const auto dx = pool.backward(w);
  check_input_grad(x, [&](const Tensor<double>& in) { return pool.forward(in, false); }, dx, w);
}

TEST(Relu, GradMatchesFiniteDifferences) {
  Rng rng(9);
  Relu<double> relu;
  const auto x = random_tensor(1, 2, 3, 3, rng);
  const auto w = random_tensor(1, 2, 3, 3, rng);
  relu.forward(x, true);
  const auto dx = relu.backward(w);
  check_input_grad(x, [&](const Tensor<double>& in) { return Relu<double>().forward(in, false); }, dx, w);
}

TEST(Dropout, InvertedScalingAndIdentityAtInference) {
  Dropout<double> drop(0.25);
  Rng rng(3);
  Tensor<double> x(1, 1, 100, 100, 1.0);
  const auto y = drop.forward(x, true, rng);
  int kept = 0;
  for (double v : y.data) {
    if (v != 0.0) {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
      ++kept;
    }
  }
  EXPECT_NEAR(kept / 10000.0, 0.75, 0.03);
  const auto g = drop.backward(Tensor<double>(1, 1, 100, 100, 1.0));
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g.data[i], y.data[i]);
  EXPECT_EQ(drop.forward(x, false, rng).data, x.data);
}

TEST(Upsample2, BackwardIsAdjoint) {
  Rng rng(4);
  const auto x = random_tensor(2, 3, 2, 3, rng);
  const auto w = random_tensor(2, 3, 4, 6, rng);
  const auto y = upsample2(x);
  EXPECT_NEAR(dot(y, w), dot(x, upsample2_backward(w)), 1e-12);
}

TEST(ConcatChannels, SplitInvertsConcat) {
  Rng rng(2);
  const auto a = random_tensor(2, 3, 2, 2, rng);
  const auto b = random_tensor(2, 1, 2, 2, rng);
  const auto [a2, b2] = split_channels(concat_channels(a, b), 3);
  EXPECT_EQ(a2.data, a.data);
  EXPECT_EQ(b2.data, b.data);
  EXPECT_THROW(concat_channels(a, Tensor<double>(2, 1, 3, 2)), std::invalid_argument);
}

// Whole-network gradient: d<w, p(x)>/dθ for every trainable parameter.
class UNetGrad : public ::testing::TestWithParam<int> {};

TEST_P(UNetGrad, MatchesFiniteDifferences) {
  lungseg::HyperParams hp;
  hp.first_features = 4;
  hp.pool_levels = 3;
  hp.doublings = 1;
  hp.dropout = 0.0;
  hp.batch_norm = GetParam();
  auto net = lungseg::instantiate<double>(lungseg::build_architecture(hp, 8), 21);
  Rng rng(17);
  // Zero biases put ReLU inputs over all-zero patches exactly on the kink.
  for (auto& p : net.parameters()) {
    if (p.name.ends_with(".bias")) {
      for (auto& v : p.value) v = rng.uniform(-0.1, 0.1);
    }
  }
  const auto x = random_tensor(2, 1, 8, 8, rng);
  const auto w = random_tensor(2, 1, 8, 8, rng);
  net.zero_grad();
  net.forward(x, true);
  net.backward(w);
  auto params = net.parameters();
  int checked = 0;
  for (auto& p : params) {
    // Every parameter of small arrays, a stride through large ones.
    const std::size_t stride = std::max<std::size_t>(1, p.value.size() / 12);
    for (std::size_t i = 0; i < p.value.size(); i += stride) {
      const double keep = p.value[i];
      p.value[i] = keep + kStep;
      const double up = dot(net.forward(x, true), w);
      p.value[i] = keep - kStep;
      const double down = dot(net.forward(x, true), w);
      p.value[i] = keep;
      EXPECT_LT(rel_err((up - down) / (2 * kStep), p.grad[i]), 1e-5) << p.name << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 100);
}

INSTANTIATE_TEST_SUITE_P(BatchNorm, UNetGrad, ::testing::Values(0, 1));

}  // namespace
