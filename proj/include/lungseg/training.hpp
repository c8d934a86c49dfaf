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
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lungseg/data.hpp"
#include "lungseg/model.hpp"
#include "lungseg/optim.hpp"
#include "lungseg/random.hpp"
#include "lungseg/unet.hpp"

namespace lungseg {

inline constexpr double kDiceSmoothing = 1.0;

namespace detail {

template <typename P, typename G>
void check_dice_inputs(std::span<const P> pred, std::span<const G> target) {
  if (pred.size() != target.size()) {
    throw std::invalid_argument("dice_loss: prediction has " + std::to_string(pred.size()) + " values, target has " +
                                std::to_string(target.size()));
  }
  for (const G& t : target) {
    if (t != G{0} && t != G{1}) throw std::invalid_argument("dice_loss: target is not binary");
  }
}

}  // namespace detail

/// Soft Dice loss 1 - (2 sum(p t) + s) / (sum p + sum t + s), summed over
/// every pixel of the batch.
template <typename P, typename G>
double dice_loss(std::span<const P> pred, std::span<const G> target, double smooth = kDiceSmoothing) {
  detail::check_dice_inputs(pred, target);
  double inter = 0.0, psum = 0.0, tsum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += static_cast<double>(pred[i]) * static_cast<double>(target[i]);
    psum += pred[i];
    tsum += target[i];
  }
  return 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
}

/// Same loss; writes dLoss/dpred into `grad` and returns the loss.
template <typename P, typename G>
double dice_loss_gradient(std::span<const P> pred, std::span<const G> target, std::span<P> grad,
                          double smooth = kDiceSmoothing) {
  detail::check_dice_inputs(pred, target);
  if (grad.size() != pred.size()) throw std::invalid_argument("dice_loss_gradient: gradient buffer size mismatch");
  double inter = 0.0, psum = 0.0, tsum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += static_cast<double>(pred[i]) * static_cast<double>(target[i]);
    psum += pred[i];
    tsum += target[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = psum + tsum + smooth;
  // d/dp_i [num/den] = (2 t_i den - num) / den^2
  const double inv_den2 = 1.0 / (den * den);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    grad[i] = static_cast<P>(-(2.0 * static_cast<double>(target[i]) * den - num) * inv_den2);
  }
  return 1.0 - num / den;
}

inline double dice_loss(const Image& pred, const Mask& target, double smooth = kDiceSmoothing) {
  if (!same_shape(pred, target)) {
    throw std::invalid_argument("dice_loss: shape mismatch " + shape_string(pred) + " vs " + shape_string(target));
  }
  return dice_loss(pred.values(), target.values(), smooth);
}

enum class CheckpointPolicy { best_validation, last };

inline std::string to_string(CheckpointPolicy p) {
  return p == CheckpointPolicy::best_validation ? "best_validation" : "last";
}

inline CheckpointPolicy parse_checkpoint_policy(const std::string& s) {
  if (s == "best_validation" || s == "BEST_VALIDATION") return CheckpointPolicy::best_validation;
  if (s == "last" || s == "LAST") return CheckpointPolicy::last;
  throw std::invalid_argument("unknown checkpoint policy '" + s + "' (expected best_validation or last)");
}

struct TrainConfig {
  int epochs = 100;
  int batch_size = 4;
  double learning_rate = 0.001;
  OptimizerKind optimizer = OptimizerKind::adam;
  bool augment = true;
  std::uint64_t seed = 0;
  CheckpointPolicy checkpoint_policy = CheckpointPolicy::best_validation;

  static TrainConfig from_hyperparams(const HyperParams& hp, int epochs, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = hp.batch_size;
    cfg.learning_rate = hp.learning_rate;
    cfg.optimizer = optimizer_from_code(hp.optimizer);
    cfg.seed = seed;
    return cfg;
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

template <typename T>
struct TrainResult {
  UNet<T> model;
  std::vector<EpochRecord> history;
  int best_epoch = 0;                // 1-based
  double final_validation_loss = 0;  // validation loss of the returned model
};

namespace detail {

template <typename T>
void fill_batch(const Dataset& data, std::span<const std::size_t> indices, bool do_augment, Rng& rng, Tensor<T>& x,
                std::vector<T>& target) {
  const int size = data.samples[indices[0]].image.height();
  x = Tensor<T>(static_cast<int>(indices.size()), 1, size, size);
  target.assign(x.size(), T{0});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = data.samples[indices[b]];
    const Image* image = &s.image;
    const Mask* mask = &s.mask;
    std::pair<Image, Mask> augmented;
    if (do_augment) {
      augmented = augment(s.image, s.mask, sample_augment_params(rng));
      image = &augmented.first;
      mask = &augmented.second;
    }
    T* xs = x.sample(static_cast<int>(b));
    T* ts = target.data() + b * x.plane();
    for (std::size_t k = 0; k < x.plane(); ++k) {
      xs[k] = static_cast<T>(image->data()[k]);
      ts[k] = static_cast<T>(mask->data()[k]);
    }
  }
}

}  // namespace detail

/// Batch-global Dice loss of the model over a whole dataset (inference mode).
template <typename T>
double dataset_dice_loss(UNet<T>& model, const Dataset& data, int batch_size = 4) {
  if (data.empty()) throw std::invalid_argument("dataset_dice_loss: empty dataset");
  double inter = 0.0, psum = 0.0, tsum = 0.0;
  std::vector<Image> images;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    images.clear();
    for (std::size_t i = start; i < stop; ++i) images.push_back(data.samples[i].image);
    const auto probs = model.predict(images, batch_size);
    for (std::size_t i = start; i < stop; ++i) {
      const auto& p = probs[i - start];
      const auto& m = data.samples[i].mask;
      for (std::size_t k = 0; k < p.size(); ++k) {
        inter += static_cast<double>(p.data()[k]) * m.data()[k];
        psum += p.data()[k];
        tsum += m.data()[k];
      }
    }
  }
  return 1.0 - (2.0 * inter + kDiceSmoothing) / (psum + tsum + kDiceSmoothing);
}

using EpochObserver = std::function<void(const EpochRecord&)>;

/// Mini-batch Dice-loss training. Samples are reshuffled each epoch and, when
/// enabled, augmented with parameters drawn per sample per epoch. Validation
/// loss is monitored every epoch (training loss stands in when the
/// validation part is empty). Deterministic for a given seed.
template <typename T>
TrainResult<T> train(UNet<T> model, const SplitDataset& split, const TrainConfig& cfg,
                     const EpochObserver& observer = {}) {
  if (split.train.empty()) throw std::invalid_argument("train: empty training set");
  if (cfg.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  for (const Dataset* part : {&split.train, &split.validation}) {
    for (const auto& s : part->samples) {
      if (s.image.height() != model.input_size() || s.image.width() != model.input_size()) {
        throw std::invalid_argument("train: sample " + s.id + " is " + shape_string(s.image) +
                                    " but the model expects " + std::to_string(model.input_size()) + "x" +
                                    std::to_string(model.input_size()));
      }
    }
  }

  auto optimizer = make_optimizer<T>(static_cast<int>(cfg.optimizer), cfg.learning_rate);
  auto params = model.parameters();
  model.seed_dropout(mix_seed(cfg.seed, 0xd0));

  TrainResult<T> result{std::move(model), {}, 0, 0.0};
  UNet<T>& net = result.model;
  params = net.parameters();
  std::vector<std::vector<T>> best_state;
  double best_loss = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(split.train.size());
  Tensor<T> x;
  std::vector<T> target;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      detail::fill_batch(split.train, std::span<const std::size_t>(order).subspan(start, stop - start), cfg.augment,
                         rng, x, target);
      net.zero_grad();
      Tensor<T> prob = net.forward(x, true);
      Tensor<T> grad(prob.n, prob.c, prob.h, prob.w);
      const double loss = dice_loss_gradient<T, T>(prob.data, target, grad.data);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("non-finite training loss at epoch " + std::to_string(epoch));
      }
      net.backward(grad);
      optimizer->step(params);
      loss_sum += loss;
      ++batches;
    }
    net.release_caches();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / batches;
    rec.val_loss = split.validation.empty() ? rec.train_loss : dataset_dice_loss(net, split.validation, cfg.batch_size);
    if (!std::isfinite(rec.val_loss)) {
      throw std::runtime_error("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    for (const auto& p : params) {
      for (T v : p.value) {
        if (!std::isfinite(static_cast<double>(v))) {
          throw std::runtime_error("non-finite parameter in " + p.name + " at epoch " + std::to_string(epoch));
        }
      }
    }
    result.history.push_back(rec);
    if (observer) observer(rec);

    if (cfg.checkpoint_policy == CheckpointPolicy::best_validation && rec.val_loss < best_loss) {
      best_loss = rec.val_loss;
      result.best_epoch = epoch;
      if (epoch < cfg.epochs) best_state = net.state();
    }
  }

  if (cfg.checkpoint_policy == CheckpointPolicy::best_validation) {
    if (result.best_epoch != cfg.epochs) net.load_state(best_state);
    result.final_validation_loss = result.history[result.best_epoch - 1].val_loss;
  } else {
    result.best_epoch = cfg.epochs;
    result.final_validation_loss = result.history.back().val_loss;
  }
  return result;
}

inline void write_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write history " + path.string());
  out << "epoch,train_loss,val_loss\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f\n", r.epoch, r.train_loss, r.val_loss);
    out << buf;
  }
}

}  // namespace lungseg
