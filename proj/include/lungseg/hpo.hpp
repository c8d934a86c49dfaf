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
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "lungseg/data.hpp"
#include "lungseg/model.hpp"
#include "lungseg/random.hpp"

namespace lungseg {

// ---------------------------------------------------------------------------
// Search space
// ---------------------------------------------------------------------------

/// Unconditional categorical dimensions. The doubling count T is conditional
/// on N and handled separately.
enum class Dim : int { batch_size, learning_rate, optimizer, pool_levels, first_features, dropout, batch_norm };
inline constexpr int kDimCount = 7;
inline constexpr std::array<Dim, kDimCount> kAllDims = {Dim::batch_size, Dim::learning_rate, Dim::optimizer,
                                                       Dim::pool_levels, Dim::first_features, Dim::dropout,
                                                       Dim::batch_norm};

inline std::string_view dim_name(Dim d) {
  switch (d) {
    case Dim::batch_size: return "B";
    case Dim::learning_rate: return "R";
    case Dim::optimizer: return "OP";
    case Dim::pool_levels: return "N";
    case Dim::first_features: return "F";
    case Dim::dropout: return "D";
    case Dim::batch_norm: return "BN";
  }
  return "?";
}

/// Per-dimension value lists. R and D are stored in thousandths.
struct SearchSpace {
  std::vector<int> batch_sizes{4, 6, 8, 10, 12, 14};
  std::vector<int> learning_rates_milli{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<int> optimizers{1, 2, 3};
  std::vector<int> pool_levels{3, 4, 5, 6};
  std::vector<int> first_features{4, 8, 12, 16, 20, 24, 28, 32, 36, 40};
  std::vector<int> dropouts_milli{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20};
  std::vector<int> batch_norms{0, 1};

  const std::vector<int>& values(Dim d) const {
    switch (d) {
      case Dim::batch_size: return batch_sizes;
      case Dim::learning_rate: return learning_rates_milli;
      case Dim::optimizer: return optimizers;
      case Dim::pool_levels: return pool_levels;
      case Dim::first_features: return first_features;
      case Dim::dropout: return dropouts_milli;
      case Dim::batch_norm: return batch_norms;
    }
    throw std::logic_error("bad dimension");
  }

  /// T ranges over {0, ..., N}.
  static int doubling_choices(int pool_levels) { return pool_levels + 1; }

  std::uint64_t total_configurations() const {
    std::uint64_t n = 1;
    for (Dim d : kAllDims) {
      if (d != Dim::pool_levels) n *= values(d).size();
    }
    std::uint64_t joint = 0;
    for (int levels : pool_levels) joint += static_cast<std::uint64_t>(doubling_choices(levels));
    return n * joint;
  }
};

/// Integer code of a hyperparameter along a dimension (thousandths for R, D).
inline int dim_value(const HyperParams& hp, Dim d) {
  switch (d) {
    case Dim::batch_size: return hp.batch_size;
    case Dim::learning_rate: return static_cast<int>(to_milli(hp.learning_rate));
    case Dim::optimizer: return hp.optimizer;
    case Dim::pool_levels: return hp.pool_levels;
    case Dim::first_features: return hp.first_features;
    case Dim::dropout: return static_cast<int>(to_milli(hp.dropout));
    case Dim::batch_norm: return hp.batch_norm;
  }
  throw std::logic_error("bad dimension");
}

inline void set_dim_value(HyperParams& hp, Dim d, int v) {
  switch (d) {
    case Dim::batch_size: hp.batch_size = v; break;
    case Dim::learning_rate: hp.learning_rate = v / 1000.0; break;
    case Dim::optimizer: hp.optimizer = v; break;
    case Dim::pool_levels: hp.pool_levels = v; break;
    case Dim::first_features: hp.first_features = v; break;
    case Dim::dropout: hp.dropout = v / 1000.0; break;
    case Dim::batch_norm: hp.batch_norm = v; break;
  }
}

inline std::size_t value_index(const SearchSpace& space, Dim d, int v) {
  const auto& vals = space.values(d);
  const auto it = std::find(vals.begin(), vals.end(), v);
  if (it == vals.end()) {
    throw std::invalid_argument("value " + std::to_string(v) + " not in dimension " + std::string(dim_name(d)));
  }
  return static_cast<std::size_t>(it - vals.begin());
}

/// Draw order shared by random and TPE sampling: B, R, OP, N, T | N, F, D, BN.
inline HyperParams sample_random(const SearchSpace& space, Rng& rng) {
  HyperParams hp;
  auto pick = [&](Dim d) {
    const auto& vals = space.values(d);
    set_dim_value(hp, d, vals[rng.below(vals.size())]);
  };
  pick(Dim::batch_size);
  pick(Dim::learning_rate);
  pick(Dim::optimizer);
  pick(Dim::pool_levels);
  hp.doublings = static_cast<int>(rng.below(static_cast<std::uint64_t>(SearchSpace::doubling_choices(hp.pool_levels))));
  pick(Dim::first_features);
  pick(Dim::dropout);
  pick(Dim::batch_norm);
  return hp;
}

// ---------------------------------------------------------------------------
// Trial records and the ledger
// ---------------------------------------------------------------------------

enum class TrialState { complete, failed };

inline std::string_view to_string(TrialState s) { return s == TrialState::complete ? "COMPLETE" : "FAILED"; }

inline TrialState parse_trial_state(std::string_view s) {
  if (s == "COMPLETE") return TrialState::complete;
  if (s == "FAILED") return TrialState::failed;
  throw std::invalid_argument("unknown trial state '" + std::string(s) + "'");
}

/// Loss recorded for a trial whose objective failed: the Dice-loss ceiling.
inline constexpr double kFailedTrialLoss = 1.0;

struct TrialRecord {
  int trial = 0;
  double loss = kFailedTrialLoss;
  HyperParams hp;
  TrialState state = TrialState::complete;
  std::uint64_t seed = 0;
  double wall_time_s = 0.0;  // not part of the ledger
};

inline bool same_ledger_row(const TrialRecord& a, const TrialRecord& b) {
  return a.trial == b.trial && a.loss == b.loss && a.hp == b.hp && a.state == b.state && a.seed == b.seed;
}

inline constexpr std::string_view kLedgerHeader = "trial,loss,B,OP,R,F,T,N,D,BN,state,seed";

inline std::string format_ledger_row(const TrialRecord& r) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%d,%.4f,%d,%d,%.3f,%d,%d,%d,%.3f,%d,%s,%llu", r.trial, r.loss, r.hp.batch_size,
                r.hp.optimizer, static_cast<double>(to_milli(r.hp.learning_rate)) / 1000.0, r.hp.first_features,
                r.hp.doublings, r.hp.pool_levels, static_cast<double>(to_milli(r.hp.dropout)) / 1000.0,
                r.hp.batch_norm, std::string(to_string(r.state)).c_str(), static_cast<unsigned long long>(r.seed));
  return buf;
}

inline void write_ledger(std::ostream& out, std::span<const TrialRecord> records) {
  out << kLedgerHeader << '\n';
  for (const auto& r : records) out << format_ledger_row(r) << '\n';
}

inline TrialRecord parse_ledger_row(std::string_view line) {
  const auto f = detail::split_csv_line(line);
  if (f.size() != 12) throw std::invalid_argument("ledger row needs 12 fields, got " + std::to_string(f.size()));
  auto as_int = [](const std::string& s) {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("bad integer '" + s + "'");
    return static_cast<int>(v);
  };
  auto as_real = [](const std::string& s) {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("bad number '" + s + "'");
    return v;
  };
  TrialRecord r;
  r.trial = as_int(f[0]);
  r.loss = as_real(f[1]);
  r.hp.batch_size = as_int(f[2]);
  r.hp.optimizer = as_int(f[3]);
  r.hp.learning_rate = as_real(f[4]);
  r.hp.first_features = as_int(f[5]);
  r.hp.doublings = as_int(f[6]);
  r.hp.pool_levels = as_int(f[7]);
  r.hp.dropout = as_real(f[8]);
  r.hp.batch_norm = as_int(f[9]);
  r.state = parse_trial_state(f[10]);
  std::size_t pos = 0;
  r.seed = std::stoull(f[11], &pos);
  if (pos != f[11].size()) throw std::invalid_argument("bad seed '" + f[11] + "'");
  return r;
}

/// Parses a ledger; trial numbers must run 1, 2, 3, ... without gaps.
inline std::vector<TrialRecord> parse_ledger(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kLedgerHeader) {
    throw std::invalid_argument("ledger must start with header '" + std::string(kLedgerHeader) + "'");
  }
  std::vector<TrialRecord> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    TrialRecord r;
    try {
      r = parse_ledger_row(line);
    } catch (const std::exception& e) {
      throw std::invalid_argument("ledger line " + std::to_string(line_no) + ": " + e.what());
    }
    if (r.trial != static_cast<int>(out.size()) + 1) {
      throw std::invalid_argument("ledger line " + std::to_string(line_no) + ": expected trial " +
                                  std::to_string(out.size() + 1) + ", found " + std::to_string(r.trial));
    }
    out.push_back(r);
  }
  return out;
}

inline std::vector<TrialRecord> read_ledger(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open ledger " + path.string());
  return parse_ledger(in);
}

inline void save_ledger(const std::filesystem::path& path, std::span<const TrialRecord> records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write ledger " + path.string());
  write_ledger(out, records);
}

/// Best-so-far loss after each trial (COMPLETE trials only; +inf before the first).
inline std::vector<double> best_so_far(std::span<const TrialRecord> records) {
  std::vector<double> out;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : records) {
    if (r.state == TrialState::complete) best = std::min(best, r.loss);
    out.push_back(best);
  }
  return out;
}

/// Lowest-loss COMPLETE trials, ties by trial number.
inline std::vector<TrialRecord> best_trials(std::span<const TrialRecord> records, std::size_t k) {
  std::vector<TrialRecord> done;
  for (const auto& r : records) {
    if (r.state == TrialState::complete) done.push_back(r);
  }
  std::stable_sort(done.begin(), done.end(), [](const TrialRecord& a, const TrialRecord& b) {
    return a.loss < b.loss || (a.loss == b.loss && a.trial < b.trial);
  });
  if (done.size() > k) done.resize(k);
  return done;
}

// ---------------------------------------------------------------------------
// Tree-structured Parzen estimator over categorical dimensions
// ---------------------------------------------------------------------------

struct TpeConfig {
  int n_startup = 10;
  double gamma = 0.25;
  int n_candidates = 24;
  double prior_weight = 1.0;

  void validate() const {
    if (n_startup < 1) throw std::invalid_argument("tpe: n_startup must be >= 1");
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("tpe: gamma must be in (0, 1)");
    if (n_candidates < 1) throw std::invalid_argument("tpe: n_candidates must be >= 1");
    if (!(prior_weight > 0.0)) throw std::invalid_argument("tpe: prior_weight must be > 0");
  }
};

inline std::size_t good_count(std::size_t n, double gamma) {
  return static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(n) - 1e-9));
}

/// good = the ceil(gamma * n) lowest-loss trials (ties to the earlier trial),
/// bad = the rest.
inline std::pair<std::vector<TrialRecord>, std::vector<TrialRecord>> split_good_bad(
    std::span<const TrialRecord> history, double gamma) {
  if (history.empty()) throw std::invalid_argument("split_good_bad: empty history");
  std::vector<TrialRecord> sorted(history.begin(), history.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const TrialRecord& a, const TrialRecord& b) {
    return a.loss < b.loss || (a.loss == b.loss && a.trial < b.trial);
  });
  const std::size_t n_good = std::min(sorted.size(), good_count(sorted.size(), gamma));
  std::vector<TrialRecord> good(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n_good));
  std::vector<TrialRecord> bad(sorted.begin() + static_cast<std::ptrdiff_t>(n_good), sorted.end());
  return {std::move(good), std::move(bad)};
}

/// Smoothed categorical densities built from one group of trials.
class ParzenEstimator {
 public:
  ParzenEstimator(const SearchSpace& space, std::span<const TrialRecord> trials, double prior_weight)
      : space_(&space), prior_(prior_weight) {
    for (Dim d : kAllDims) {
      auto& w = weights_[static_cast<int>(d)];
      w.assign(space.values(d).size(), prior_weight);
      for (const auto& t : trials) w[value_index(space, d, dim_value(t.hp, d))] += 1.0;
    }
    for (int levels : space.pool_levels) {
      auto& w = doubling_weights_[levels];
      w.assign(static_cast<std::size_t>(SearchSpace::doubling_choices(levels)), prior_weight);
      for (const auto& t : trials) {
        if (t.hp.pool_levels == levels) w[static_cast<std::size_t>(t.hp.doublings)] += 1.0;
      }
    }
  }

  const std::vector<double>& weights(Dim d) const { return weights_[static_cast<int>(d)]; }
  const std::vector<double>& doubling_weights(int pool_levels) const { return doubling_weights_.at(pool_levels); }

  double log_density(const HyperParams& hp) const {
    double s = 0.0;
    for (Dim d : kAllDims) s += log_prob(weights(d), value_index(*space_, d, dim_value(hp, d)));
    s += log_prob(doubling_weights(hp.pool_levels), static_cast<std::size_t>(hp.doublings));
    return s;
  }

  HyperParams sample(Rng& rng) const {
    HyperParams hp;
    auto pick = [&](Dim d) { set_dim_value(hp, d, space_->values(d)[rng.categorical(weights(d))]); };
    pick(Dim::batch_size);
    pick(Dim::learning_rate);
    pick(Dim::optimizer);
    pick(Dim::pool_levels);
    hp.doublings = static_cast<int>(rng.categorical(doubling_weights(hp.pool_levels)));
    pick(Dim::first_features);
    pick(Dim::dropout);
    pick(Dim::batch_norm);
    return hp;
  }

 private:
  static double log_prob(const std::vector<double>& w, std::size_t i) {
    double total = 0.0;
    for (double v : w) total += v;
    return std::log(w[i] / total);
  }

  const SearchSpace* space_;
  double prior_;
  std::array<std::vector<double>, kDimCount> weights_;
  std::map<int, std::vector<double>> doubling_weights_;
};

struct TpeSuggestion {
  HyperParams params;
  bool startup = false;                // drawn by sample_random
  std::vector<HyperParams> candidates;  // pool drawn from l(x)
  std::vector<double> log_scores;       // log l(x) - log g(x) per candidate
  std::size_t chosen = 0;               // index into candidates
};

/// Relative tolerance under which two candidate scores count as tied; ties go
/// to the earlier candidate in the pool.
inline constexpr double kScoreTieTolerance = 1e-12;

/// Loss as the ledger stores it (4 decimals), so a study resumed from its
/// ledger sees the same history as one that never stopped.
inline double ledger_loss(double loss) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", loss);
  return std::strtod(buf, nullptr);
}

/// Trials that inform the estimators: COMPLETE ones, plus FAILED ones at the
/// failure sentinel loss.
inline std::vector<TrialRecord> observed_trials(std::span<const TrialRecord> history) {
  std::vector<TrialRecord> out;
  for (auto r : history) {
    r.loss = r.state == TrialState::failed ? kFailedTrialLoss : ledger_loss(r.loss);
    out.push_back(r);
  }
  return out;
}

inline TpeSuggestion tpe_suggest_detailed(std::span<const TrialRecord> history, const SearchSpace& space,
                                          const TpeConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto complete = static_cast<int>(std::count_if(
      history.begin(), history.end(), [](const TrialRecord& r) { return r.state == TrialState::complete; }));
  TpeSuggestion out;
  if (complete < cfg.n_startup) {
    out.startup = true;
    out.params = sample_random(space, rng);
    return out;
  }
  const auto observed = observed_trials(history);
  const auto [good, bad] = split_good_bad(observed, cfg.gamma);
  const ParzenEstimator l(space, good, cfg.prior_weight);
  const ParzenEstimator g(space, bad, cfg.prior_weight);

  double best = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < cfg.n_candidates; ++k) {
    HyperParams c = l.sample(rng);
    const double score = l.log_density(c) - g.log_density(c);
    if (k == 0 || score > best + kScoreTieTolerance * std::max(1.0, std::abs(best))) {
      best = score;
      out.chosen = static_cast<std::size_t>(k);
    }
    out.candidates.push_back(c);
    out.log_scores.push_back(score);
  }
  out.params = out.candidates[out.chosen];
  return out;
}

inline HyperParams tpe_suggest(std::span<const TrialRecord> history, const SearchSpace& space, const TpeConfig& cfg,
                               Rng& rng) {
  return tpe_suggest_detailed(history, space, cfg, rng).params;
}

// ---------------------------------------------------------------------------
// Study loop
// ---------------------------------------------------------------------------

struct TrialContext {
  int trial = 0;
  std::uint64_t seed = 0;
};

struct StudyOptions {
  std::optional<std::filesystem::path> ledger_path;  // rewritten at start, appended after every trial
  std::vector<TrialRecord> resume;                   // trials 1..k already run
  std::function<void(const TrialRecord&, const std::string& error)> on_trial;
};

struct StudyResult {
  TrialRecord best;
  std::vector<TrialRecord> ledger;
};

inline std::uint64_t trial_seed(std::uint64_t study_seed, int trial) {
  return mix_seed(study_seed, static_cast<std::uint64_t>(trial));
}

/// Runs trials until the ledger holds `n_trials` rows. The objective may take
/// (hp) or (hp, TrialContext); an exception or non-finite loss marks the trial
/// FAILED with loss 1.0 and the study goes on.
template <typename Objective>
StudyResult optimize(Objective&& objective, const SearchSpace& space, int n_trials, const TpeConfig& cfg,
                     std::uint64_t seed, const StudyOptions& options = {}) {
  if (n_trials < 1) throw std::invalid_argument("optimize: n_trials must be >= 1");
  cfg.validate();
  StudyResult result;
  result.ledger = options.resume;
  for (std::size_t i = 0; i < result.ledger.size(); ++i) {
    if (result.ledger[i].trial != static_cast<int>(i) + 1) {
      throw std::invalid_argument("optimize: resumed ledger is not contiguous at row " + std::to_string(i + 1));
    }
  }

  std::ofstream ledger_out;
  if (options.ledger_path) {
    ledger_out.open(*options.ledger_path, std::ios::trunc);
    if (!ledger_out) throw std::runtime_error("cannot write ledger " + options.ledger_path->string());
    write_ledger(ledger_out, result.ledger);
    ledger_out.flush();
  }

  for (int trial = static_cast<int>(result.ledger.size()) + 1; trial <= n_trials; ++trial) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(trial), 0x7e5));
    TrialRecord rec;
    rec.trial = trial;
    rec.seed = trial_seed(seed, trial);
    rec.hp = tpe_suggest(result.ledger, space, cfg, rng);
    const TrialContext ctx{trial, rec.seed};
    std::string error;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      double loss;
      if constexpr (std::is_invocable_v<Objective&, const HyperParams&, const TrialContext&>) {
        loss = objective(rec.hp, ctx);
      } else {
        loss = objective(rec.hp);
      }
      if (!std::isfinite(loss)) throw std::runtime_error("objective returned a non-finite loss");
      rec.loss = loss;
      rec.state = TrialState::complete;
    } catch (const std::exception& e) {
      rec.loss = kFailedTrialLoss;
      rec.state = TrialState::failed;
      error = e.what();
    }
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.ledger.push_back(rec);
    if (ledger_out.is_open()) {
      ledger_out << format_ledger_row(rec) << '\n';
      ledger_out.flush();
    }
    if (options.on_trial) options.on_trial(rec, error);
  }

  const auto top = best_trials(result.ledger, 1);
  if (top.empty()) throw std::runtime_error("all trials failed");
  result.best = top.front();
  return result;
}

}  // namespace lungseg
