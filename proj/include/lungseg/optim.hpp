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

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "lungseg/tensor.hpp"

namespace lungseg {

enum class OptimizerKind { adam = 1, nadam = 2, rmsprop = 3 };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::adam: return "Adam";
    case OptimizerKind::nadam: return "Nadam";
    case OptimizerKind::rmsprop: return "RMSprop";
  }
  return "?";
}

inline OptimizerKind optimizer_from_code(int code) {
  if (code < 1 || code > 3) {
    throw std::invalid_argument("unknown optimizer code " + std::to_string(code) +
                                " (expected 1 Adam, 2 Nadam, 3 RMSprop)");
  }
  return static_cast<OptimizerKind>(code);
}

/// First-order optimizer over a fixed list of parameter arrays. State is
/// allocated on the first step and keyed by array position.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(double lr) : lr_(lr) {}
  virtual ~Optimizer() = default;

  virtual OptimizerKind kind() const = 0;
  double learning_rate() const { return lr_; }
  long long steps() const { return t_; }

  void step(const std::vector<ParamRef<T>>& params) {
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        slots_[i].first.assign(params[i].value.size(), 0.0f);
        slots_[i].second.assign(uses_first_moment() ? params[i].value.size() : 0, 0.0f);
      }
    }
    if (slots_.size() != params.size()) throw std::logic_error("optimizer parameter list changed");
    ++t_;
    begin_step();
    for (std::size_t i = 0; i < params.size(); ++i) update(params[i], slots_[i].first, slots_[i].second);
  }

 protected:
  virtual bool uses_first_moment() const { return true; }
  virtual void begin_step() {}
  /// `v` is the squared-gradient accumulator, `m` the first moment.
  virtual void update(const ParamRef<T>& p, std::vector<float>& v, std::vector<float>& m) = 0;

  double lr_;
  long long t_ = 0;

 private:
  std::vector<std::pair<std::vector<float>, std::vector<float>>> slots_;
};

template <typename T>
class Adam : public Optimizer<T> {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-7;

  using Optimizer<T>::Optimizer;
  OptimizerKind kind() const override { return OptimizerKind::adam; }

 protected:
  void update(const ParamRef<T>& p, std::vector<float>& v, std::vector<float>& m) override {
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(this->t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(this->t_));
    const double step = this->lr_ * std::sqrt(bc2) / bc1;
    const double eps = kEpsilon * std::sqrt(bc2);
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = static_cast<float>(kBeta1 * m[k] + (1.0 - kBeta1) * g);
      v[k] = static_cast<float>(kBeta2 * v[k] + (1.0 - kBeta2) * g * g);
      p.value[k] -= static_cast<T>(step * m[k] / (std::sqrt(static_cast<double>(v[k])) + eps));
    }
  }
};

/// Adam with Nesterov momentum and the usual momentum warm-up schedule
/// mu_t = beta1 * (1 - 0.5 * 0.96^(0.004 t)).
template <typename T>
class Nadam : public Optimizer<T> {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-7;
  static constexpr double kMomentumDecay = 0.004;

  using Optimizer<T>::Optimizer;
  OptimizerKind kind() const override { return OptimizerKind::nadam; }

 protected:
  void begin_step() override {
    const double t = static_cast<double>(this->t_);
    mu_t_ = kBeta1 * (1.0 - 0.5 * std::pow(0.96, t * kMomentumDecay));
    mu_next_ = kBeta1 * (1.0 - 0.5 * std::pow(0.96, (t + 1.0) * kMomentumDecay));
    mu_product_ *= mu_t_;
  }

  void update(const ParamRef<T>& p, std::vector<float>& v, std::vector<float>& m) override {
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(this->t_));
    const double c_m = mu_next_ / (1.0 - mu_product_ * mu_next_);
    const double c_g = (1.0 - mu_t_) / (1.0 - mu_product_);
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = static_cast<float>(kBeta1 * m[k] + (1.0 - kBeta1) * g);
      v[k] = static_cast<float>(kBeta2 * v[k] + (1.0 - kBeta2) * g * g);
      const double m_hat = c_m * m[k] + c_g * g;
      const double v_hat = v[k] / bc2;
      p.value[k] -= static_cast<T>(this->lr_ * m_hat / (std::sqrt(v_hat) + kEpsilon));
    }
  }

 private:
  double mu_t_ = 0.0;
  double mu_next_ = 0.0;
  double mu_product_ = 1.0;
};

template <typename T>
class RmsProp : public Optimizer<T> {
 public:
  static constexpr double kRho = 0.9;
  static constexpr double kEpsilon = 1e-7;

  using Optimizer<T>::Optimizer;
  OptimizerKind kind() const override { return OptimizerKind::rmsprop; }

 protected:
  bool uses_first_moment() const override { return false; }

  void update(const ParamRef<T>& p, std::vector<float>& v, std::vector<float>&) override {
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      v[k] = static_cast<float>(kRho * v[k] + (1.0 - kRho) * g * g);
      p.value[k] -= static_cast<T>(this->lr_ * g / (std::sqrt(static_cast<double>(v[k])) + kEpsilon));
    }
  }
};

/// 1 = Adam, 2 = Nadam, 3 = RMSprop.
template <typename T = float>
std::unique_ptr<Optimizer<T>> make_optimizer(int code, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  switch (optimizer_from_code(code)) {
    case OptimizerKind::adam: return std::make_unique<Adam<T>>(lr);
    case OptimizerKind::nadam: return std::make_unique<Nadam<T>>(lr);
    case OptimizerKind::rmsprop: return std::make_unique<RmsProp<T>>(lr);
  }
  return nullptr;
}

}  // namespace lungseg
