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
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lungseg/data.hpp"
#include "lungseg/hpo.hpp"
#include "lungseg/training.hpp"

namespace lungseg {

inline constexpr const char* kOutputRootEnv = "LUNGSEG_OUTPUT_ROOT";

/// Fully resolved settings of one command invocation.
struct RunConfig {
  std::vector<std::string> data;  // dataset roots, each with its own manifest
  int input_size = 256;
  int epochs = 100;
  int n_trials = 100;
  std::uint64_t seed = 0;
  TpeConfig tpe;
  std::string output_root = "runs";
  std::optional<SourceDb> test_source;
  bool augment = true;
  bool preprocess = true;  // equalize + resize to input_size at load time
  CheckpointPolicy checkpoint_policy = CheckpointPolicy::best_validation;
  double threshold = 0.5;
  std::uint64_t max_params = 0;  // 0 = unlimited

  void validate() const {
    if (input_size < 8) throw std::invalid_argument("config: input_size must be >= 8");
    if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
    if (n_trials < 1) throw std::invalid_argument("config: n_trials must be >= 1");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("config: threshold must be in [0, 1]");
    tpe.validate();
  }
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["data"] = c.data;
  j["input_size"] = c.input_size;
  j["epochs"] = c.epochs;
  j["n_trials"] = c.n_trials;
  j["seed"] = c.seed;
  j["tpe"] = {{"n_startup", c.tpe.n_startup},
              {"gamma", c.tpe.gamma},
              {"n_candidates", c.tpe.n_candidates},
              {"prior_weight", c.tpe.prior_weight}};
  j["output_root"] = c.output_root;
  j["test_source"] = c.test_source ? nlohmann::ordered_json(std::string(to_string(*c.test_source)))
                                   : nlohmann::ordered_json(nullptr);
  j["augment"] = c.augment;
  j["preprocess"] = c.preprocess;
  j["checkpoint_policy"] = to_string(c.checkpoint_policy);
  j["threshold"] = c.threshold;
  j["max_params"] = c.max_params;
  return j;
}

/// Overlays the keys present in `j` onto `c`; unknown keys are an error.
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "data") {
        c.data = v.is_string() ? std::vector<std::string>{v.get<std::string>()} : v.get<std::vector<std::string>>();
      } else if (key == "input_size") {
        c.input_size = v.get<int>();
      } else if (key == "epochs") {
        c.epochs = v.get<int>();
      } else if (key == "n_trials") {
        c.n_trials = v.get<int>();
      } else if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "tpe") {
        for (const auto& [k, t] : v.items()) {
          if (k == "n_startup") c.tpe.n_startup = t.get<int>();
          else if (k == "gamma") c.tpe.gamma = t.get<double>();
          else if (k == "n_candidates") c.tpe.n_candidates = t.get<int>();
          else if (k == "prior_weight") c.tpe.prior_weight = t.get<double>();
          else throw std::invalid_argument("unknown key tpe." + k);
        }
      } else if (key == "output_root") {
        c.output_root = v.get<std::string>();
      } else if (key == "test_source") {
        if (v.is_null()) c.test_source.reset();
        else c.test_source = parse_source_db(v.get<std::string>());
      } else if (key == "augment") {
        c.augment = v.get<bool>();
      } else if (key == "preprocess") {
        c.preprocess = v.get<bool>();
      } else if (key == "checkpoint_policy") {
        c.checkpoint_policy = parse_checkpoint_policy(v.get<std::string>());
      } else if (key == "threshold") {
        c.threshold = v.get<double>();
      } else if (key == "max_params") {
        c.max_params = v.get<std::uint64_t>();
      } else {
        throw std::invalid_argument("unknown key '" + key + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config key '" + key + "': " + e.what());
    }
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  RunConfig c;
  try {
    apply_json(c, j);
  } catch (const std::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return c;
}

/// Output root precedence: explicit flag, then the environment, then config.
inline std::string resolve_output_root(const RunConfig& c, const std::optional<std::string>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') return env;
  return c.output_root;
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(c).dump(2) << '\n';
}

}  // namespace lungseg
