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
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lungseg/grid.hpp"
#include "lungseg/layers.hpp"
#include "lungseg/model.hpp"
#include "lungseg/random.hpp"
#include "lungseg/tensor.hpp"

namespace lungseg {

namespace detail {

/// conv -> [BN] -> activation -> [dropout]
template <typename T>
struct ConvUnit {
  nn::Conv2d<T> conv;
  std::optional<nn::BatchNorm2d<T>> bn;
  nn::Relu<T> relu;
  nn::Dropout<T> dropout;

  ConvUnit(const ConvSpec& spec, Rng& init)
      : conv(spec.in_channels, spec.out_channels, spec.kernel, init), dropout(spec.dropout) {
    if (spec.batch_norm) bn.emplace(spec.out_channels);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training, Rng& rng) {
    Tensor<T> h = conv.forward(x, training);
    if (bn) h = bn->forward(h, training);
    h = relu.forward(std::move(h), training);
    return dropout.forward(std::move(h), training, rng);
  }

  Tensor<T> backward(Tensor<T> dy, bool need_input_grad) {
    dy = dropout.backward(std::move(dy));
    dy = relu.backward(std::move(dy));
    if (bn) dy = bn->backward(dy);
    return conv.backward(dy, need_input_grad);
  }

  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    conv.collect(out, prefix + ".conv");
    if (bn) bn->collect(out, prefix + ".bn");
  }

  void release_cache() {
    conv.release_cache();
    if (bn) bn->release_cache();
    relu.release_cache();
    dropout.release_cache();
  }
};

template <typename T>
struct Level {
  std::optional<ConvUnit<T>> up;
  std::vector<ConvUnit<T>> units;
  nn::MaxPool2<T> pool;
  int skip_channels = 0;

  Level(const LevelSpec& spec, Rng& init) : skip_channels(spec.skip_channels) {
    if (spec.up_conv) up.emplace(*spec.up_conv, init);
    for (const auto& c : spec.convs) units.emplace_back(c, init);
  }

  Tensor<T> run_units(Tensor<T> h, bool training, Rng& rng) {
    for (auto& u : units) h = u.forward(h, training, rng);
    return h;
  }

  Tensor<T> back_units(Tensor<T> dy, bool need_input_grad) {
    for (std::size_t k = units.size(); k-- > 0;) dy = units[k].backward(std::move(dy), k > 0 || need_input_grad);
    return dy;
  }

  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    if (up) up->collect(out, prefix + ".up");
    for (std::size_t k = 0; k < units.size(); ++k) units[k].collect(out, prefix + ".conv" + std::to_string(k));
  }

  void release_cache() {
    if (up) up->release_cache();
    for (auto& u : units) u.release_cache();
    pool.release_cache();
  }
};

}  // namespace detail

/// Trainable U-net instantiated from an ArchitectureSpec. Inputs are
/// (batch, 1, size, size); outputs are per-pixel probabilities of the same
/// spatial size.
template <typename T>
class UNet {
 public:
  UNet(ArchitectureSpec spec, std::uint64_t seed) : spec_(std::move(spec)), dropout_rng_(mix_seed(seed, 0xd509)) {
    Rng init(mix_seed(seed, 0x1417));
    for (const auto& l : spec_.encoder) encoder_.emplace_back(l, init);
    bottleneck_.emplace(spec_.bottleneck, init);
    for (const auto& l : spec_.decoder) decoder_.emplace_back(l, init);
    head_ = nn::Conv2d<T>(spec_.head.in_channels, spec_.head.out_channels, spec_.head.kernel, init);
  }

  const ArchitectureSpec& spec() const { return spec_; }
  int input_size() const { return spec_.input_size; }

  void seed_dropout(std::uint64_t seed) { dropout_rng_ = Rng(seed); }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    if (x.c != spec_.input_channels || x.h % (1 << spec_.pool_levels()) != 0 || x.w % (1 << spec_.pool_levels()) != 0) {
      throw std::invalid_argument("UNet: input " + x.shape() + " incompatible with " +
                                  std::to_string(spec_.pool_levels()) + " pooling levels");
    }
    Tensor<T> h = x;
    std::vector<Tensor<T>> skips;
    skips.reserve(encoder_.size());
    for (auto& level : encoder_) {
      h = level.run_units(std::move(h), training, dropout_rng_);
      skips.push_back(h);
      h = level.pool.forward(h, training);
    }
    h = bottleneck_->run_units(std::move(h), training, dropout_rng_);
    for (std::size_t d = 0; d < decoder_.size(); ++d) {
      auto& level = decoder_[d];
      Tensor<T> up = level.up->forward(nn::upsample2(h), training, dropout_rng_);
      const Tensor<T>& skip = skips[skips.size() - 1 - d];
      h = level.run_units(nn::concat_channels(skip, up), training, dropout_rng_);
    }
    Tensor<T> z = head_.forward(h, training);
    for (auto& v : z.data) v = nn::sigmoid(v);
    if (training) output_ = z;
    return z;
  }

  /// Back-propagates dLoss/dProbability and accumulates parameter gradients.
  void backward(const Tensor<T>& dprob) {
    if (!dprob.same_shape(output_)) throw std::logic_error("UNet::backward without matching training forward");
    Tensor<T> dz = dprob;
    for (std::size_t k = 0; k < dz.size(); ++k) {
      const T p = output_.data[k];
      dz.data[k] *= p * (T{1} - p);
    }
    Tensor<T> dh = head_.backward(dz);
    std::vector<Tensor<T>> dskips(encoder_.size());
    for (std::size_t d = decoder_.size(); d-- > 0;) {
      auto& level = decoder_[d];
      Tensor<T> dcat = level.back_units(std::move(dh), true);
      auto [dskip, dup] = nn::split_channels(dcat, level.skip_channels);
      dskips[encoder_.size() - 1 - d] = std::move(dskip);
      dh = nn::upsample2_backward(level.up->backward(std::move(dup), true));
    }
    dh = bottleneck_->back_units(std::move(dh), true);
    for (std::size_t i = encoder_.size(); i-- > 0;) {
      dh = encoder_[i].pool.backward(dh);
      const Tensor<T>& ds = dskips[i];
      for (std::size_t k = 0; k < dh.size(); ++k) dh.data[k] += ds.data[k];
      dh = encoder_[i].back_units(std::move(dh), i > 0);
    }
  }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> out;
    for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect(out, "encoder" + std::to_string(i));
    bottleneck_->collect(out, "bottleneck");
    for (std::size_t d = 0; d < decoder_.size(); ++d) {
      decoder_[d].collect(out, "decoder" + std::to_string(spec_.decoder[d].index));
    }
    head_.collect(out, "head");
    return out;
  }

  /// Non-trainable state (BN running statistics).
  std::vector<std::span<T>> buffers() {
    std::vector<std::span<T>> out;
    auto visit = [&](detail::Level<T>& level) {
      if (level.up && level.up->bn) level.up->bn->collect_buffers(out);
      for (auto& u : level.units) {
        if (u.bn) u.bn->collect_buffers(out);
      }
    };
    for (auto& l : encoder_) visit(l);
    visit(*bottleneck_);
    for (auto& l : decoder_) visit(l);
    return out;
  }

  /// Runtime count of trainable scalars.
  std::uint64_t trainable_parameter_count() {
    std::uint64_t n = 0;
    for (const auto& p : parameters()) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) std::fill(p.grad.begin(), p.grad.end(), T{0});
  }

  void release_caches() {
    for (auto& l : encoder_) l.release_cache();
    bottleneck_->release_cache();
    for (auto& l : decoder_) l.release_cache();
    head_.release_cache();
    output_ = Tensor<T>();
  }

  /// Full state (parameters then buffers) as flat copies.
  std::vector<std::vector<T>> state() {
    std::vector<std::vector<T>> out;
    for (auto& p : parameters()) out.emplace_back(p.value.begin(), p.value.end());
    for (auto& b : buffers()) out.emplace_back(b.begin(), b.end());
    return out;
  }

  void load_state(const std::vector<std::vector<T>>& state) {
    auto params = parameters();
    auto bufs = buffers();
    if (state.size() != params.size() + bufs.size()) throw std::invalid_argument("UNet::load_state: array count mismatch");
    std::size_t k = 0;
    auto copy_into = [&](std::span<T> dst) {
      if (state[k].size() != dst.size()) throw std::invalid_argument("UNet::load_state: array size mismatch");
      std::copy(state[k].begin(), state[k].end(), dst.begin());
      ++k;
    };
    for (auto& p : params) copy_into(p.value);
    for (auto& b : bufs) copy_into(b);
  }

  /// Inference on single-channel images of the model's input size.
  std::vector<Image> predict(std::span<const Image> images, int batch_size = 4) {
    std::vector<Image> out;
    out.reserve(images.size());
    for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
      const std::size_t stop = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
      const int h = images[start].height();
      const int w = images[start].width();
      Tensor<T> x(static_cast<int>(stop - start), 1, h, w);
      for (std::size_t i = start; i < stop; ++i) {
        if (images[i].height() != h || images[i].width() != w) throw std::invalid_argument("predict: mixed image sizes");
        std::copy(images[i].begin(), images[i].end(), x.sample(static_cast<int>(i - start)));
      }
      const Tensor<T> y = forward(x, false);
      for (int i = 0; i < y.n; ++i) {
        Image p(h, w);
        std::copy(y.sample(i), y.sample(i) + y.plane(), p.begin());
        out.push_back(std::move(p));
      }
    }
    return out;
  }

  Image predict(const Image& image) { return predict(std::span<const Image>(&image, 1)).front(); }

 private:
  ArchitectureSpec spec_;
  std::vector<detail::Level<T>> encoder_;
  std::optional<detail::Level<T>> bottleneck_;
  std::vector<detail::Level<T>> decoder_;
  nn::Conv2d<T> head_;
  Rng dropout_rng_;
  Tensor<T> output_;
};

/// Builds a model from its spec with seeded fan-in-scaled initialization.
template <typename T = float>
UNet<T> instantiate(const ArchitectureSpec& spec, std::uint64_t seed = 0) {
  return UNet<T>(spec, seed);
}

// ---------------------------------------------------------------------------
// Checkpoints: "LSEGCKP1", u64 header length, JSON header, then every
// parameter and buffer array as little-endian float32 in parameters() /
// buffers() order.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'L', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

inline void save_checkpoint(const std::filesystem::path& path, UNet<float>& model) {
  auto state = model.state();
  nlohmann::json header;
  to_json(header["hyperparameters"], model.spec().hyper);
  header["input_size"] = model.input_size();
  header["arrays"] = nlohmann::json::array();
  for (const auto& a : state) header["arrays"].push_back(a.size());
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : state) {
    out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline UNet<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("not a lungseg checkpoint: " + path.string());
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 24)) throw std::runtime_error("corrupt checkpoint header: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(text);
  const HyperParams hp = header.at("hyperparameters").get<HyperParams>();
  UNet<float> model(build_architecture(hp, header.at("input_size").get<int>()), 0);
  const auto sizes = header.at("arrays").get<std::vector<std::size_t>>();
  std::vector<std::vector<float>> state;
  for (std::size_t n : sizes) {
    std::vector<float> a(n);
    in.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
    state.push_back(std::move(a));
  }
  model.load_state(state);
  return model;
}

}  // namespace lungseg
