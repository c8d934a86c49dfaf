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

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "lungseg/random.hpp"
#include "lungseg/tensor.hpp"

namespace lungseg::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Stride-1 convolution with "same" output size. Even kernels pad one extra
/// row/column at the bottom/right.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, Rng& rng)
      : in_(in_channels), out_(out_channels), k_(kernel), pad_((kernel - 1) / 2) {
    const std::size_t fan_in = static_cast<std::size_t>(in_) * k_ * k_;
    weight_.resize(static_cast<std::size_t>(out_) * fan_in);
    bias_.assign(out_, T{0});
    dweight_.assign(weight_.size(), T{0});
    dbias_.assign(out_, T{0});
    // He-uniform.
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : weight_) v = static_cast<T>(rng.uniform(-limit, limit));
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    if (x.c != in_) {
      throw std::invalid_argument("Conv2d: expected " + std::to_string(in_) + " input channels, got " + x.shape());
    }
    Tensor<T> y(x.n, out_, x.h, x.w);
    const Eigen::Index hw = static_cast<Eigen::Index>(x.plane());
    const Eigen::Index kk = fan_in();
    Eigen::Map<const RowMatrix<T>> wmat(weight_.data(), out_, kk);
    for (int i = 0; i < x.n; ++i) {
      Eigen::Map<RowMatrix<T>> ymat(y.sample(i), out_, hw);
      if (k_ == 1) {
        ymat.noalias() = wmat * Eigen::Map<const RowMatrix<T>>(x.sample(i), in_, hw);
      } else {
        im2col(x, i);
        ymat.noalias() = wmat * Eigen::Map<const RowMatrix<T>>(col_.data(), kk, hw);
      }
      for (int o = 0; o < out_; ++o) ymat.row(o).array() += bias_[o];
    }
    if (training) input_ = x;
    return y;
  }

  /// Accumulates parameter gradients; returns the input gradient unless
  /// `need_input_grad` is false (first layer).
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true) {
    const Tensor<T>& x = input_;
    if (x.n != dy.n || x.h != dy.h || x.w != dy.w || dy.c != out_) {
      throw std::logic_error("Conv2d::backward without matching forward");
    }
    Tensor<T> dx;
    if (need_input_grad) dx = Tensor<T>(x.n, in_, x.h, x.w);
    const Eigen::Index hw = static_cast<Eigen::Index>(x.plane());
    const Eigen::Index kk = fan_in();
    Eigen::Map<const RowMatrix<T>> wmat(weight_.data(), out_, kk);
    Eigen::Map<RowMatrix<T>> dwmat(dweight_.data(), out_, kk);
    for (int i = 0; i < x.n; ++i) {
      Eigen::Map<const RowMatrix<T>> dymat(dy.sample(i), out_, hw);
      for (int o = 0; o < out_; ++o) dbias_[o] += dymat.row(o).sum();
      if (k_ == 1) {
        Eigen::Map<const RowMatrix<T>> xmat(x.sample(i), in_, hw);
        dwmat.noalias() += dymat * xmat.transpose();
        if (need_input_grad) {
          Eigen::Map<RowMatrix<T>>(dx.sample(i), in_, hw).noalias() = wmat.transpose() * dymat;
        }
      } else {
        im2col(x, i);
        Eigen::Map<const RowMatrix<T>> cmat(col_.data(), kk, hw);
        dwmat.noalias() += dymat * cmat.transpose();
        if (need_input_grad) {
          dcol_.resize(col_.size());
          Eigen::Map<RowMatrix<T>>(dcol_.data(), kk, hw).noalias() = wmat.transpose() * dymat;
          col2im(dx, i);
        }
      }
    }
    return dx;
  }

  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", weight_, dweight_});
    out.push_back({prefix + ".bias", bias_, dbias_});
  }

  void zero_grad() {
    std::fill(dweight_.begin(), dweight_.end(), T{0});
    std::fill(dbias_.begin(), dbias_.end(), T{0});
  }

  void release_cache() { input_ = Tensor<T>(); }

 private:
  Eigen::Index fan_in() const { return static_cast<Eigen::Index>(in_) * k_ * k_; }

  void im2col(const Tensor<T>& x, int i) {
    const int h = x.h;
    const int w = x.w;
    const std::size_t hw = x.plane();
    col_.resize(static_cast<std::size_t>(fan_in()) * hw);
    T* dst = col_.data();
    for (int ci = 0; ci < in_; ++ci) {
      const T* src = x.channel(i, ci);
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx, dst += hw) {
          const int oy = ky - pad_;
          const int ox = kx - pad_;
          for (int y = 0; y < h; ++y) {
            T* row = dst + static_cast<std::size_t>(y) * w;
            const int sy = y + oy;
            if (sy < 0 || sy >= h) {
              std::fill(row, row + w, T{0});
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(sy) * w;
            const int x_lo = std::max(0, -ox);
            const int x_hi = std::min(w, w - ox);
            std::fill(row, row + x_lo, T{0});
            for (int xx = x_lo; xx < x_hi; ++xx) row[xx] = srow[xx + ox];
            std::fill(row + std::max(x_hi, x_lo), row + w, T{0});
          }
        }
      }
    }
  }

  void col2im(Tensor<T>& dx, int i) const {
    const int h = dx.h;
    const int w = dx.w;
    const std::size_t hw = dx.plane();
    const T* src = dcol_.data();
    for (int ci = 0; ci < in_; ++ci) {
      T* dst = dx.channel(i, ci);
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx, src += hw) {
          const int oy = ky - pad_;
          const int ox = kx - pad_;
          const int x_lo = std::max(0, -ox);
          const int x_hi = std::min(w, w - ox);
          for (int y = 0; y < h; ++y) {
            const int sy = y + oy;
            if (sy < 0 || sy >= h) continue;
            const T* row = src + static_cast<std::size_t>(y) * w;
            T* drow = dst + static_cast<std::size_t>(sy) * w;
            for (int xx = x_lo; xx < x_hi; ++xx) drow[xx + ox] += row[xx];
          }
        }
      }
    }
  }

  int in_ = 0;
  int out_ = 0;
  int k_ = 1;
  int pad_ = 0;
  AlignedVector<T> weight_;
  AlignedVector<T> bias_;
  AlignedVector<T> dweight_;
  AlignedVector<T> dbias_;
  Tensor<T> input_;
  AlignedVector<T> col_;
  AlignedVector<T> dcol_;
};

/// Per-channel batch normalization with learned scale/shift and running
/// statistics for inference.
template <typename T>
class BatchNorm2d {
 public:
  static constexpr double kEpsilon = 1e-3;
  static constexpr double kMomentum = 0.9;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels)
      : channels_(channels),
        gamma_(channels, T{1}),
        beta_(channels, T{0}),
        dgamma_(channels, T{0}),
        dbeta_(channels, T{0}),
        running_mean_(channels, T{0}),
        running_var_(channels, T{1}) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> y(x.n, x.c, x.h, x.w);
    const std::size_t hw = x.plane();
    const double m = static_cast<double>(x.n) * static_cast<double>(hw);
    if (training) {
      xhat_ = Tensor<T>(x.n, x.c, x.h, x.w);
      inv_std_.assign(channels_, T{0});
    }
    for (int ch = 0; ch < channels_; ++ch) {
      double mean;
      double var;
      if (training) {
        double sum = 0.0;
        for (int i = 0; i < x.n; ++i) {
          const T* p = x.channel(i, ch);
          for (std::size_t k = 0; k < hw; ++k) sum += p[k];
        }
        mean = sum / m;
        double sq = 0.0;
        for (int i = 0; i < x.n; ++i) {
          const T* p = x.channel(i, ch);
          for (std::size_t k = 0; k < hw; ++k) {
            const double d = p[k] - mean;
            sq += d * d;
          }
        }
        var = sq / m;
        const double unbiased = m > 1 ? sq / (m - 1) : var;
        running_mean_[ch] = static_cast<T>(kMomentum * running_mean_[ch] + (1.0 - kMomentum) * mean);
        running_var_[ch] = static_cast<T>(kMomentum * running_var_[ch] + (1.0 - kMomentum) * unbiased);
      } else {
        mean = running_mean_[ch];
        var = running_var_[ch];
      }
      const double inv_std = 1.0 / std::sqrt(var + kEpsilon);
      if (training) inv_std_[ch] = static_cast<T>(inv_std);
      const T g = gamma_[ch];
      const T b = beta_[ch];
      for (int i = 0; i < x.n; ++i) {
        const T* p = x.channel(i, ch);
        T* q = y.channel(i, ch);
        T* xh = training ? xhat_.channel(i, ch) : nullptr;
        for (std::size_t k = 0; k < hw; ++k) {
          const T normalized = static_cast<T>((p[k] - mean) * inv_std);
          if (xh) xh[k] = normalized;
          q[k] = g * normalized + b;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    if (!dy.same_shape(xhat_)) throw std::logic_error("BatchNorm2d::backward without matching forward");
    Tensor<T> dx(dy.n, dy.c, dy.h, dy.w);
    const std::size_t hw = dy.plane();
    const double m = static_cast<double>(dy.n) * static_cast<double>(hw);
    for (int ch = 0; ch < channels_; ++ch) {
      double sum_dy = 0.0;
      double sum_dy_xhat = 0.0;
      for (int i = 0; i < dy.n; ++i) {
        const T* g = dy.channel(i, ch);
        const T* xh = xhat_.channel(i, ch);
        for (std::size_t k = 0; k < hw; ++k) {
          sum_dy += g[k];
          sum_dy_xhat += static_cast<double>(g[k]) * xh[k];
        }
      }
      dgamma_[ch] += static_cast<T>(sum_dy_xhat);
      dbeta_[ch] += static_cast<T>(sum_dy);
      const double scale = static_cast<double>(gamma_[ch]) * inv_std_[ch] / m;
      for (int i = 0; i < dy.n; ++i) {
        const T* g = dy.channel(i, ch);
        const T* xh = xhat_.channel(i, ch);
        T* d = dx.channel(i, ch);
        for (std::size_t k = 0; k < hw; ++k) {
          d[k] = static_cast<T>(scale * (m * g[k] - sum_dy - xh[k] * sum_dy_xhat));
        }
      }
    }
    return dx;
  }

  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", gamma_, dgamma_});
    out.push_back({prefix + ".beta", beta_, dbeta_});
  }

  void collect_buffers(std::vector<std::span<T>>& out) {
    out.push_back(running_mean_);
    out.push_back(running_var_);
  }

  void zero_grad() {
    std::fill(dgamma_.begin(), dgamma_.end(), T{0});
    std::fill(dbeta_.begin(), dbeta_.end(), T{0});
  }

  void release_cache() { xhat_ = Tensor<T>(); }

 private:
  int channels_ = 0;
  AlignedVector<T> gamma_, beta_, dgamma_, dbeta_;
  AlignedVector<T> running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class Relu {
 public:
  Tensor<T> forward(Tensor<T> x, bool training) {
    for (auto& v : x.data) v = v > T{0} ? v : T{0};
    if (training) output_ = x;
    return x;
  }

  Tensor<T> backward(Tensor<T> dy) const {
    for (std::size_t k = 0; k < dy.size(); ++k) {
      if (!(output_.data[k] > T{0})) dy.data[k] = T{0};
    }
    return dy;
  }

  void release_cache() { output_ = Tensor<T>(); }

 private:
  Tensor<T> output_;
};

/// Inverted dropout; identity at inference.
template <typename T>
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double rate) : rate_(rate) {}

  double rate() const { return rate_; }

  Tensor<T> forward(Tensor<T> x, bool training, Rng& rng) {
    if (!training || rate_ <= 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
    keep_.resize(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
      keep_[k] = rng.uniform() >= rate_ ? 1 : 0;
      x.data[k] = keep_[k] ? x.data[k] * keep_scale : T{0};
    }
    return x;
  }

  Tensor<T> backward(Tensor<T> dy) const {
    if (rate_ <= 0.0) return dy;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
    for (std::size_t k = 0; k < dy.size(); ++k) dy.data[k] = keep_[k] ? dy.data[k] * keep_scale : T{0};
    return dy;
  }

  void release_cache() { keep_.clear(); }

 private:
  double rate_ = 0.0;
  std::vector<std::uint8_t> keep_;
};

template <typename T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    if (x.h % 2 != 0 || x.w % 2 != 0) throw std::invalid_argument("MaxPool2: odd spatial size " + x.shape());
    Tensor<T> y(x.n, x.c, x.h / 2, x.w / 2);
    if (training) {
      argmax_.resize(y.size());
      in_n_ = x.n, in_c_ = x.c, in_h_ = x.h, in_w_ = x.w;
    }
    std::size_t out_idx = 0;
    for (int i = 0; i < x.n; ++i) {
      for (int ch = 0; ch < x.c; ++ch) {
        const T* p = x.channel(i, ch);
        for (int y0 = 0; y0 < y.h; ++y0) {
          for (int x0 = 0; x0 < y.w; ++x0, ++out_idx) {
            const std::size_t base = static_cast<std::size_t>(2 * y0) * x.w + 2 * x0;
            std::size_t best = base;
            for (std::size_t cand : {base + 1, base + x.w, base + x.w + 1}) {
              if (p[cand] > p[best]) best = cand;
            }
            y.data[out_idx] = p[best];
            if (training) argmax_[out_idx] = static_cast<std::uint32_t>(best);
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(in_n_, in_c_, in_h_, in_w_);
    std::size_t idx = 0;
    for (int i = 0; i < dy.n; ++i) {
      for (int ch = 0; ch < dy.c; ++ch) {
        T* d = dx.channel(i, ch);
        for (std::size_t k = 0; k < dy.plane(); ++k, ++idx) d[argmax_[idx]] += dy.data[idx];
      }
    }
    return dx;
  }

  void release_cache() { argmax_.clear(); }

 private:
  std::vector<std::uint32_t> argmax_;
  int in_n_ = 0, in_c_ = 0, in_h_ = 0, in_w_ = 0;
};

/// Nearest-neighbor 2x up-sampling.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  Tensor<T> y(x.n, x.c, x.h * 2, x.w * 2);
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      const T* p = x.channel(i, ch);
      T* q = y.channel(i, ch);
      for (int yy = 0; yy < y.h; ++yy) {
        const T* prow = p + static_cast<std::size_t>(yy / 2) * x.w;
        T* qrow = q + static_cast<std::size_t>(yy) * y.w;
        for (int xx = 0; xx < y.w; ++xx) qrow[xx] = prow[xx / 2];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
  for (int i = 0; i < dy.n; ++i) {
    for (int ch = 0; ch < dy.c; ++ch) {
      const T* g = dy.channel(i, ch);
      T* d = dx.channel(i, ch);
      for (int yy = 0; yy < dy.h; ++yy) {
        const T* grow = g + static_cast<std::size_t>(yy) * dy.w;
        T* drow = d + static_cast<std::size_t>(yy / 2) * dx.w;
        for (int xx = 0; xx < dy.w; ++xx) drow[xx / 2] += grow[xx];
      }
    }
  }
  return dx;
}

/// Channel concatenation [a, b].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w) {
    throw std::invalid_argument("concat_channels: " + a.shape() + " vs " + b.shape());
  }
  Tensor<T> y(a.n, a.c + b.c, a.h, a.w);
  for (int i = 0; i < a.n; ++i) {
    std::copy(a.sample(i), a.sample(i) + a.sample_size(), y.sample(i));
    std::copy(b.sample(i), b.sample(i) + b.sample_size(), y.sample(i) + a.sample_size());
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& y, int first_channels) {
  Tensor<T> a(y.n, first_channels, y.h, y.w);
  Tensor<T> b(y.n, y.c - first_channels, y.h, y.w);
  for (int i = 0; i < y.n; ++i) {
    std::copy(y.sample(i), y.sample(i) + a.sample_size(), a.sample(i));
    std::copy(y.sample(i) + a.sample_size(), y.sample(i) + y.sample_size(), b.sample(i));
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
T sigmoid(T z) {
  return T{1} / (T{1} + std::exp(-z));
}

}  // namespace lungseg::nn
