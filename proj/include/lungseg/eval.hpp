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
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lungseg/data.hpp"
#include "lungseg/grid.hpp"
#include "lungseg/unet.hpp"

namespace lungseg {

inline constexpr double kDefaultThreshold = 0.5;

/// Pixel -> 1 iff prob >= threshold.
inline Mask binarize(const Image& prob, double threshold = kDefaultThreshold) {
  Mask out(prob.height(), prob.width());
  for (std::size_t i = 0; i < prob.size(); ++i) out.data()[i] = prob.data()[i] >= threshold ? 1 : 0;
  return out;
}

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionCounts&) const = default;
};

inline ConfusionCounts confusion_counts(const Mask& pred, const Mask& gt) {
  if (!same_shape(pred, gt)) {
    throw std::invalid_argument("confusion_counts: shape mismatch " + shape_string(pred) + " vs " + shape_string(gt));
  }
  // Index by 2*pred + gt: 0 tn, 1 fn, 2 fp, 3 tp.
  std::uint64_t bins[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::uint8_t p = pred.data()[i];
    const std::uint8_t g = gt.data()[i];
    if (p > 1 || g > 1) throw std::invalid_argument("confusion_counts: non-binary input");
    ++bins[2 * p + g];
  }
  return ConfusionCounts{bins[3], bins[2], bins[1], bins[0]};
}

/// Bits set in SegmentationMetrics::undefined when a ratio was 0/0.
enum MetricFlag : unsigned { kDscUndefined = 1u, kJiUndefined = 2u, kSeUndefined = 4u, kSpUndefined = 8u };

struct SegmentationMetrics {
  double dsc = 0.0;
  double ji = 0.0;
  double se = 0.0;
  double sp = 0.0;
  unsigned undefined = 0;  // MetricFlag bits; the flagged values are 1.0
};

namespace detail {

inline double ratio_or_one(std::uint64_t num, std::uint64_t den, unsigned flag, unsigned& undefined) {
  if (den == 0) {
    undefined |= flag;
    return 1.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

/// DSC = 2tp/(2tp+fp+fn), JI = tp/(tp+fp+fn), SE = tp/(tp+fn),
/// SP = tn/(tn+fp); a 0/0 ratio is 1.0 and flagged.
inline SegmentationMetrics metrics(const ConfusionCounts& c) {
  SegmentationMetrics m;
  m.dsc = detail::ratio_or_one(2 * c.tp, 2 * c.tp + c.fp + c.fn, kDscUndefined, m.undefined);
  m.ji = detail::ratio_or_one(c.tp, c.tp + c.fp + c.fn, kJiUndefined, m.undefined);
  m.se = detail::ratio_or_one(c.tp, c.tp + c.fn, kSeUndefined, m.undefined);
  m.sp = detail::ratio_or_one(c.tn, c.tn + c.fp, kSpUndefined, m.undefined);
  return m;
}

struct ImageEvaluation {
  std::string id;
  ConfusionCounts counts;
  SegmentationMetrics metrics;
};

struct DatasetEvaluation {
  std::vector<ImageEvaluation> per_image;
  SegmentationMetrics mean;  // unweighted mean over images
};

inline SegmentationMetrics mean_metrics(std::span<const ImageEvaluation> items) {
  SegmentationMetrics m;
  if (items.empty()) return m;
  for (const auto& e : items) {
    m.dsc += e.metrics.dsc;
    m.ji += e.metrics.ji;
    m.se += e.metrics.se;
    m.sp += e.metrics.sp;
    m.undefined |= e.metrics.undefined;
  }
  const double n = static_cast<double>(items.size());
  m.dsc /= n;
  m.ji /= n;
  m.se /= n;
  m.sp /= n;
  return m;
}

/// Evaluates any predictor mapping a batch of images to probability maps.
inline DatasetEvaluation evaluate_predictions(
    const std::function<std::vector<Image>(std::span<const Image>)>& predict, const Dataset& test,
    double threshold = kDefaultThreshold, int batch_size = 4) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  DatasetEvaluation out;
  std::vector<Image> images;
  for (std::size_t start = 0; start < test.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(test.size(), start + static_cast<std::size_t>(batch_size));
    images.clear();
    for (std::size_t i = start; i < stop; ++i) images.push_back(test.samples[i].image);
    const auto probs = predict(images);
    if (probs.size() != images.size()) throw std::runtime_error("evaluate: predictor returned wrong batch size");
    for (std::size_t i = start; i < stop; ++i) {
      ImageEvaluation e;
      e.id = test.samples[i].id;
      e.counts = confusion_counts(binarize(probs[i - start], threshold), test.samples[i].mask);
      e.metrics = metrics(e.counts);
      out.per_image.push_back(std::move(e));
    }
  }
  out.mean = mean_metrics(out.per_image);
  return out;
}

template <typename T>
DatasetEvaluation evaluate_model(UNet<T>& model, const Dataset& test, double threshold = kDefaultThreshold,
                                 int batch_size = 4) {
  return evaluate_predictions([&](std::span<const Image> batch) { return model.predict(batch, batch_size); }, test,
                              threshold, batch_size);
}

inline void write_per_image_metrics(const std::filesystem::path& path, const DatasetEvaluation& ev) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "id,tp,fp,fn,tn,dsc,ji,se,sp,undefined\n";
  char buf[160];
  for (const auto& e : ev.per_image) {
    std::snprintf(buf, sizeof(buf), ",%llu,%llu,%llu,%llu,%.6f,%.6f,%.6f,%.6f,%u\n",
                  static_cast<unsigned long long>(e.counts.tp), static_cast<unsigned long long>(e.counts.fp),
                  static_cast<unsigned long long>(e.counts.fn), static_cast<unsigned long long>(e.counts.tn),
                  e.metrics.dsc, e.metrics.ji, e.metrics.se, e.metrics.sp, e.metrics.undefined);
    out << e.id << buf;
  }
}

}  // namespace lungseg
