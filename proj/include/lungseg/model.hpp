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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace lungseg {

/// One point of the search space. Learning rate and dropout live on a 0.001
/// grid; comparisons use their integer thousandths.
struct HyperParams {
  int batch_size = 4;            // B
  double learning_rate = 0.001;  // R
  int optimizer = 1;             // OP: 1 Adam, 2 Nadam, 3 RMSprop
  int pool_levels = 4;           // N
  int doublings = 4;             // T
  int first_features = 32;       // F
  double dropout = 0.0;          // D
  int batch_norm = 0;            // BN

  friend bool operator==(const HyperParams& a, const HyperParams& b);
};

inline long long to_milli(double v) { return std::llround(v * 1000.0); }
inline bool on_milli_grid(double v) { return std::abs(v * 1000.0 - static_cast<double>(to_milli(v))) < 1e-6; }

inline bool operator==(const HyperParams& a, const HyperParams& b) {
  return a.batch_size == b.batch_size && to_milli(a.learning_rate) == to_milli(b.learning_rate) &&
         a.optimizer == b.optimizer && a.pool_levels == b.pool_levels && a.doublings == b.doublings &&
         a.first_features == b.first_features && to_milli(a.dropout) == to_milli(b.dropout) &&
         a.batch_norm == b.batch_norm;
}

namespace detail {

inline std::string format_milli(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", static_cast<double>(to_milli(v)) / 1000.0);
  return buf;
}

}  // namespace detail

/// "B = 4, OP = 2, R = 0.001, F = 40, T = 4, N = 4, D = 0.016, BN = 1"
inline std::string to_string(const HyperParams& hp) {
  std::ostringstream os;
  os << "B = " << hp.batch_size << ", OP = " << hp.optimizer << ", R = " << detail::format_milli(hp.learning_rate)
     << ", F = " << hp.first_features << ", T = " << hp.doublings << ", N = " << hp.pool_levels
     << ", D = " << detail::format_milli(hp.dropout) << ", BN = " << hp.batch_norm;
  return os.str();
}

/// Parses "B=4,OP=2,R=0.001,F=40,T=4,N=4,D=0.016,BN=1" (any order, spaces
/// allowed). All eight keys are required.
inline HyperParams parse_hyperparams(std::string_view text) {
  HyperParams hp;
  std::map<std::string, std::string> kv;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    std::string clean;
    for (char c : item) {
      if (c != ' ' && c != '\t') clean += c;
    }
    if (clean.empty()) continue;
    const auto eq = clean.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("hyperparameter entry '" + clean + "' is not KEY=VALUE");
    const std::string key = clean.substr(0, eq);
    if (!kv.emplace(key, clean.substr(eq + 1)).second) throw std::invalid_argument("duplicate hyperparameter " + key);
  }
  auto take = [&](const char* key) -> std::string {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument(std::string("missing hyperparameter ") + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto as_int = [](const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    const int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("hyperparameter " + key + " is not an integer: " + v);
    return out;
  };
  auto as_real = [](const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("hyperparameter " + key + " is not a number: " + v);
    return out;
  };
  hp.batch_size = as_int("B", take("B"));
  hp.learning_rate = as_real("R", take("R"));
  hp.optimizer = as_int("OP", take("OP"));
  hp.pool_levels = as_int("N", take("N"));
  hp.doublings = as_int("T", take("T"));
  hp.first_features = as_int("F", take("F"));
  hp.dropout = as_real("D", take("D"));
  hp.batch_norm = as_int("BN", take("BN"));
  if (!kv.empty()) throw std::invalid_argument("unknown hyperparameter " + kv.begin()->first);
  return hp;
}

struct Violation {
  std::string field;
  std::string message;
};

/// Empty result means the vector lies in the search space.
inline std::vector<Violation> validate_hyperparams(const HyperParams& hp) {
  std::vector<Violation> out;
  auto bad = [&](std::string field, std::string value, std::string allowed) {
    out.push_back({field, field + " = " + value + " not in " + allowed});
  };
  if (hp.batch_size < 4 || hp.batch_size > 14 || hp.batch_size % 2 != 0) {
    bad("B", std::to_string(hp.batch_size), "{4, 6, 8, 10, 12, 14}");
  }
  if (!on_milli_grid(hp.learning_rate) || to_milli(hp.learning_rate) < 1 || to_milli(hp.learning_rate) > 10) {
    bad("R", std::to_string(hp.learning_rate), "{0.001, 0.002, ..., 0.010}");
  }
  if (hp.optimizer < 1 || hp.optimizer > 3) bad("OP", std::to_string(hp.optimizer), "{1, 2, 3}");
  if (hp.pool_levels < 3 || hp.pool_levels > 6) bad("N", std::to_string(hp.pool_levels), "{3, 4, 5, 6}");
  if (hp.doublings < 0 || hp.doublings > hp.pool_levels) {
    bad("T", std::to_string(hp.doublings), "{0, ..., N} with N = " + std::to_string(hp.pool_levels));
  }
  if (hp.first_features < 4 || hp.first_features > 40 || hp.first_features % 4 != 0) {
    bad("F", std::to_string(hp.first_features), "{4, 8, ..., 40}");
  }
  if (!on_milli_grid(hp.dropout) || to_milli(hp.dropout) < 0 || to_milli(hp.dropout) > 20) {
    bad("D", std::to_string(hp.dropout), "{0, 0.001, ..., 0.020}");
  }
  if (hp.batch_norm != 0 && hp.batch_norm != 1) bad("BN", std::to_string(hp.batch_norm), "{0, 1}");
  return out;
}

inline std::string describe(const std::vector<Violation>& violations) {
  std::string s;
  for (const auto& v : violations) {
    if (!s.empty()) s += "; ";
    s += v.message;
  }
  return s;
}

inline void require_valid(const HyperParams& hp) {
  const auto v = validate_hyperparams(hp);
  if (!v.empty()) throw std::invalid_argument("invalid hyperparameters: " + describe(v));
}

namespace presets {

/// Reference U-net: four poolings, 32 first-level features doubled at every
/// level, no batch normalization, no dropout. Training settings are not part
/// of the reference topology; Adam at 0.001 with batch 4 is used.
inline HyperParams baseline() {
  HyperParams hp;
  hp.batch_size = 4;
  hp.learning_rate = 0.001;
  hp.optimizer = 1;
  hp.pool_levels = 4;
  hp.doublings = 4;
  hp.first_features = 32;
  hp.dropout = 0.0;
  hp.batch_norm = 0;
  return hp;
}

/// Best trial of the reference 100-trial study (test Dice loss 0.0733).
inline HyperParams optimized() {
  HyperParams hp;
  hp.batch_size = 4;
  hp.learning_rate = 0.001;
  hp.optimizer = 2;
  hp.pool_levels = 4;
  hp.doublings = 4;
  hp.first_features = 40;
  hp.dropout = 0.016;
  hp.batch_norm = 1;
  return hp;
}

inline HyperParams by_name(std::string_view name) {
  if (name == "baseline") return baseline();
  if (name == "optimized") return optimized();
  throw std::invalid_argument("unknown preset '" + std::string(name) + "' (expected baseline or optimized)");
}

}  // namespace presets

/// Per-level feature counts: entry i = first_features * 2^min(i, doublings),
/// i = 0..pool_levels; the last entry is the bottleneck.
inline std::vector<int> feature_ladder(int first_features, int doublings, int pool_levels) {
  if (first_features < 1) throw std::invalid_argument("feature_ladder: first_features must be >= 1");
  if (pool_levels < 0) throw std::invalid_argument("feature_ladder: pool_levels must be >= 0");
  if (doublings < 0 || doublings > pool_levels) {
    throw std::invalid_argument("feature_ladder: doublings T = " + std::to_string(doublings) +
                                " must be in [0, N = " + std::to_string(pool_levels) + "]");
  }
  std::vector<int> ladder;
  for (int i = 0; i <= pool_levels; ++i) ladder.push_back(first_features << std::min(i, doublings));
  return ladder;
}

// ---------------------------------------------------------------------------
// Declarative architecture
// ---------------------------------------------------------------------------

enum class Activation { relu, sigmoid };

struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  bool batch_norm = false;
  double dropout = 0.0;
  Activation activation = Activation::relu;

  bool operator==(const ConvSpec&) const = default;
};

enum class Stage { encoder, bottleneck, decoder, head };

struct LevelSpec {
  Stage stage = Stage::encoder;
  int index = 0;       // resolution level; 0 = full resolution
  int resolution = 0;  // square side in pixels
  int features = 0;
  std::optional<ConvSpec> up_conv;  // decoder: 2x up-sampling then this conv
  int skip_channels = 0;            // decoder: channels concatenated from the encoder
  std::vector<ConvSpec> convs;

  bool operator==(const LevelSpec&) const = default;
};

struct ArchitectureSpec {
  HyperParams hyper;
  int input_size = 0;
  int input_channels = 1;
  std::vector<int> ladder;
  std::vector<LevelSpec> encoder;  // shallow to deep
  LevelSpec bottleneck;
  std::vector<LevelSpec> decoder;  // deep to shallow, mirroring the encoder
  ConvSpec head;

  int pool_levels() const { return static_cast<int>(encoder.size()); }
  bool operator==(const ArchitectureSpec&) const = default;
};

/// Expands a hyperparameter vector into the U-net topology. Every 3x3
/// convolution (encoder and decoder) is followed by BN (if enabled), ReLU and
/// dropout (if D > 0); decoder levels up-sample 2x, apply a 2x2 ReLU
/// convolution, concatenate the encoder output of the same resolution and
/// apply two 3x3 convolutions; the head is a 1x1 sigmoid convolution.
inline ArchitectureSpec build_architecture(const HyperParams& hp, int input_size) {
  require_valid(hp);
  const int n = hp.pool_levels;
  const int divisor = 1 << n;
  if (input_size < divisor || input_size % divisor != 0) {
    throw std::invalid_argument("input size " + std::to_string(input_size) + " must be divisible by 2^N = " +
                                std::to_string(divisor));
  }
  const bool bn = hp.batch_norm == 1;
  const double drop = static_cast<double>(to_milli(hp.dropout)) / 1000.0;
  auto conv3 = [&](int in, int out) { return ConvSpec{in, out, 3, bn, drop, Activation::relu}; };

  ArchitectureSpec spec;
  spec.hyper = hp;
  spec.input_size = input_size;
  spec.ladder = feature_ladder(hp.first_features, hp.doublings, n);
  int channels = spec.input_channels;
  for (int i = 0; i < n; ++i) {
    LevelSpec level;
    level.stage = Stage::encoder;
    level.index = i;
    level.resolution = input_size >> i;
    level.features = spec.ladder[i];
    level.convs = {conv3(channels, level.features), conv3(level.features, level.features)};
    channels = level.features;
    spec.encoder.push_back(level);
  }
  spec.bottleneck.stage = Stage::bottleneck;
  spec.bottleneck.index = n;
  spec.bottleneck.resolution = input_size >> n;
  spec.bottleneck.features = spec.ladder[n];
  spec.bottleneck.convs = {conv3(channels, spec.ladder[n]), conv3(spec.ladder[n], spec.ladder[n])};
  channels = spec.ladder[n];
  for (int i = n - 1; i >= 0; --i) {
    LevelSpec level;
    level.stage = Stage::decoder;
    level.index = i;
    level.resolution = input_size >> i;
    level.features = spec.ladder[i];
    level.up_conv = ConvSpec{channels, level.features, 2, false, 0.0, Activation::relu};
    level.skip_channels = spec.ladder[i];
    level.convs = {conv3(level.skip_channels + level.features, level.features),
                   conv3(level.features, level.features)};
    channels = level.features;
    spec.decoder.push_back(level);
  }
  spec.head = ConvSpec{channels, 1, 1, false, 0.0, Activation::sigmoid};
  return spec;
}

inline std::uint64_t parameter_count(const ConvSpec& c) {
  const std::uint64_t k = static_cast<std::uint64_t>(c.kernel);
  std::uint64_t count = k * k * static_cast<std::uint64_t>(c.in_channels) * c.out_channels + c.out_channels;
  if (c.batch_norm) count += 2ULL * c.out_channels;
  return count;
}

/// Trainable scalars: kernels, biases and BN scale/shift (running statistics
/// are not trainable).
inline std::uint64_t parameter_count(const ArchitectureSpec& spec) {
  std::uint64_t total = 0;
  auto level_count = [&](const LevelSpec& level) {
    if (level.up_conv) total += parameter_count(*level.up_conv);
    for (const auto& c : level.convs) total += parameter_count(c);
  };
  for (const auto& l : spec.encoder) level_count(l);
  level_count(spec.bottleneck);
  for (const auto& l : spec.decoder) level_count(l);
  total += parameter_count(spec.head);
  return total;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const HyperParams& hp) {
  j = nlohmann::json{{"B", hp.batch_size},
                     {"R", static_cast<double>(to_milli(hp.learning_rate)) / 1000.0},
                     {"OP", hp.optimizer},
                     {"N", hp.pool_levels},
                     {"T", hp.doublings},
                     {"F", hp.first_features},
                     {"D", static_cast<double>(to_milli(hp.dropout)) / 1000.0},
                     {"BN", hp.batch_norm}};
}

inline void from_json(const nlohmann::json& j, HyperParams& hp) {
  hp.batch_size = j.at("B").get<int>();
  hp.learning_rate = j.at("R").get<double>();
  hp.optimizer = j.at("OP").get<int>();
  hp.pool_levels = j.at("N").get<int>();
  hp.doublings = j.at("T").get<int>();
  hp.first_features = j.at("F").get<int>();
  hp.dropout = j.at("D").get<double>();
  hp.batch_norm = j.at("BN").get<int>();
}

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::encoder: return "encoder";
    case Stage::bottleneck: return "bottleneck";
    case Stage::decoder: return "decoder";
    case Stage::head: return "head";
  }
  return "?";
}

inline nlohmann::json conv_json(const ConvSpec& c) {
  return {{"kernel", c.kernel},
          {"in", c.in_channels},
          {"out", c.out_channels},
          {"batch_norm", c.batch_norm},
          {"dropout", c.dropout},
          {"activation", c.activation == Activation::relu ? "relu" : "sigmoid"},
          {"parameters", parameter_count(c)}};
}

/// Audit form of the architecture: one entry per level in forward order.
inline nlohmann::json architecture_json(const ArchitectureSpec& spec) {
  nlohmann::json levels = nlohmann::json::array();
  auto level_json = [](const LevelSpec& l) {
    nlohmann::json j{{"stage", to_string(l.stage)},
                     {"index", l.index},
                     {"resolution", l.resolution},
                     {"features", l.features}};
    if (l.up_conv) j["up_conv"] = conv_json(*l.up_conv);
    if (l.stage == Stage::decoder) j["skip_channels"] = l.skip_channels;
    j["convs"] = nlohmann::json::array();
    for (const auto& c : l.convs) j["convs"].push_back(conv_json(c));
    return j;
  };
  for (const auto& l : spec.encoder) levels.push_back(level_json(l));
  levels.push_back(level_json(spec.bottleneck));
  for (const auto& l : spec.decoder) levels.push_back(level_json(l));
  levels.push_back({{"stage", "head"},
                    {"index", 0},
                    {"resolution", spec.input_size},
                    {"features", spec.head.out_channels},
                    {"convs", nlohmann::json::array({conv_json(spec.head)})}});
  nlohmann::json hp;
  to_json(hp, spec.hyper);
  return {{"input_size", spec.input_size},
          {"input_channels", spec.input_channels},
          {"hyperparameters", hp},
          {"ladder", spec.ladder},
          {"parameter_count", parameter_count(spec)},
          {"levels", levels}};
}

}  // namespace lungseg
