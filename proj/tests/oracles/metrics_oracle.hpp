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
#include <vector>

namespace lungseg::oracle {

/// Metric as an exact fraction; den == 0 marks 0/0.
struct Fraction {
  std::int64_t num = 0;
  std::int64_t den = 0;
};

struct MetricFractions {
  Fraction dsc, ji, se, sp;
};

/// Pixel loop over two flat binary masks, written straight from the set
/// definitions: DSC = 2|P∩G|/(|P|+|G|), JI = |P∩G|/|P∪G|,
/// SE = |P∩G|/|G|, SP = |¬P∩¬G|/|¬G|.
inline MetricFractions segmentation_fractions(const std::vector<int>& pred, const std::vector<int>& gt) {
  std::int64_t inter = 0, uni = 0, p = 0, g = 0, neither = 0, not_g = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool in_p = pred[i] != 0;
    const bool in_g = gt[i] != 0;
    if (in_p && in_g) ++inter;
    if (in_p || in_g) ++uni;
    if (in_p) ++p;
    if (in_g) ++g;
    if (!in_p && !in_g) ++neither;
    if (!in_g) ++not_g;
  }
  return {{2 * inter, p + g}, {inter, uni}, {inter, g}, {neither, not_g}};
}

/// The double a correctly rounded num/den division gives; 1.0 for 0/0.
inline double value(const Fraction& f) {
  return f.den == 0 ? 1.0 : static_cast<double>(f.num) / static_cast<double>(f.den);
}

}  // namespace lungseg::oracle
