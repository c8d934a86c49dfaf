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

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lungseg {

/// Dense row-major 2-D grid.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(int height, int width, T fill = T{}) : height_(height), width_(width) {
    if (height < 0 || width < 0) throw std::invalid_argument("Grid: negative dimension");
    data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
  }
  Grid(int height, int width, std::vector<T> values) : height_(height), width_(width), data_(std::move(values)) {
    if (data_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
      throw std::invalid_argument("Grid: value count does not match " + std::to_string(height) + "x" +
                                  std::to_string(width));
    }
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  const T& operator()(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  bool operator==(const Grid&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

/// Grayscale intensities, nominally in [0, 1].
using Image = Grid<float>;
/// Binary label map: 1 = lung, 0 = background.
using Mask = Grid<std::uint8_t>;

template <typename A, typename B>
bool same_shape(const Grid<A>& a, const Grid<B>& b) {
  return a.height() == b.height() && a.width() == b.width();
}

template <typename T>
bool is_binary(const Grid<T>& g) {
  for (const T& v : g) {
    if (v != T{0} && v != T{1}) return false;
  }
  return true;
}

inline std::string shape_string(int height, int width) {
  return std::to_string(height) + "x" + std::to_string(width);
}

template <typename T>
std::string shape_string(const Grid<T>& g) {
  return shape_string(g.height(), g.width());
}

}  // namespace lungseg
