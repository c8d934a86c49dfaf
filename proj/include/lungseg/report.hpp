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
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lungseg/data.hpp"
#include "lungseg/eval.hpp"
#include "lungseg/hpo.hpp"

namespace lungseg {

/// Mean metrics of one model on one database.
struct EvaluationSummary {
  std::string model;
  std::string database;
  std::size_t n = 0;
  SegmentationMetrics mean;
};

inline constexpr std::string_view kSummaryHeader = "model,database,n,dsc,ji,se,sp";

inline std::string format_summary_row(const EvaluationSummary& s) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), ",%zu,%.6f,%.6f,%.6f,%.6f", s.n, s.mean.dsc, s.mean.ji, s.mean.se, s.mean.sp);
  return s.model + "," + s.database + buf;
}

inline void write_summaries(const std::filesystem::path& path, std::span<const EvaluationSummary> rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kSummaryHeader << '\n';
  for (const auto& r : rows) out << format_summary_row(r) << '\n';
}

inline std::vector<EvaluationSummary> read_summaries(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kSummaryHeader) {
    throw std::invalid_argument(path.string() + ": expected header '" + std::string(kSummaryHeader) + "'");
  }
  std::vector<EvaluationSummary> out;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 7) throw std::invalid_argument(path.string() + ": summary row needs 7 fields");
    EvaluationSummary s;
    s.model = f[0];
    s.database = f[1];
    s.n = static_cast<std::size_t>(std::stoull(f[2]));
    s.mean.dsc = std::stod(f[3]);
    s.mean.ji = std::stod(f[4]);
    s.mean.se = std::stod(f[5]);
    s.mean.sp = std::stod(f[6]);
    out.push_back(s);
  }
  return out;
}

inline constexpr std::string_view kPerImageMeanNote =
    "Values are unweighted means of per-image metrics at threshold 0.5 (prob >= 0.5 is foreground).";

/// Plain-text grid, one row per evaluation, metrics to 3 decimal places.
inline std::string format_metrics_table(std::span<const EvaluationSummary> rows) {
  std::size_t wm = 5, wd = 8;
  for (const auto& r : rows) {
    wm = std::max(wm, r.model.size());
    wd = std::max(wd, r.database.size());
  }
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s  %-*s  %5s  %5s  %5s  %5s\n", static_cast<int>(wm), "Model",
                static_cast<int>(wd), "Database", "DSC", "JI", "SE", "SP");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-*s  %-*s  %5.3f  %5.3f  %5.3f  %5.3f\n", static_cast<int>(wm),
                  r.model.c_str(), static_cast<int>(wd), r.database.c_str(), r.mean.dsc, r.mean.ji, r.mean.se,
                  r.mean.sp);
    os << buf;
  }
  os << '\n' << kPerImageMeanNote << '\n';
  return os.str();
}

inline std::string format_metrics_csv(std::span<const EvaluationSummary> rows) {
  std::ostringstream os;
  os << "model,database,dsc,ji,se,sp\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), ",%.3f,%.3f,%.3f,%.3f\n", r.mean.dsc, r.mean.ji, r.mean.se, r.mean.sp);
    os << r.model << ',' << r.database << buf;
  }
  return os.str();
}

/// The k best COMPLETE trials, extended by any trials tied with the k-th loss.
inline std::vector<TrialRecord> ranked_trials(std::span<const TrialRecord> ledger, std::size_t k = 3) {
  auto all = best_trials(ledger, ledger.size());
  if (all.size() <= k) return all;
  std::size_t cut = k;
  while (cut < all.size() && all[cut].loss == all[k - 1].loss) ++cut;
  all.resize(cut);
  return all;
}

inline std::string format_best_trials(std::span<const TrialRecord> ledger, std::size_t k = 3) {
  const auto top = ranked_trials(ledger, k);
  std::ostringstream os;
  os << "Rank  Trial  Loss    Hyperparameters\n";
  char buf[64];
  for (std::size_t i = 0; i < top.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%-4zu  %-5d  %.4f  ", i + 1, top[i].trial, top[i].loss);
    os << buf << to_string(top[i].hp) << '\n';
  }
  return os.str();
}

/// Loss-vs-trial scatter with the best-so-far curve.
inline std::string loss_plot_svg(std::span<const TrialRecord> ledger, std::string_view title = "Test Dice loss per trial") {
  if (ledger.empty()) throw std::invalid_argument("loss plot: empty ledger");
  const double W = 640, H = 400, ml = 60, mr = 20, mt = 40, mb = 50;
  const double pw = W - ml - mr, ph = H - mt - mb;
  double ymax = 0.0;
  for (const auto& r : ledger) ymax = std::max(ymax, r.loss);
  ymax = ymax > 0 ? ymax * 1.05 : 1.0;
  const int n = ledger.back().trial;
  auto sx = [&](double t) { return ml + (n > 1 ? (t - 1) / (n - 1) : 0.5) * pw; };
  auto sy = [&](double v) { return mt + ph - v / ymax * ph; };

  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                W, H, W, H);
  os << buf << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
     << title << "</text>\n";
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n"
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                ml, mt + ph, ml + pw, mt + ph, ml, mt, ml, mt + ph);
  os << buf;
  for (int i = 0; i <= 4; ++i) {
    const double v = ymax * i / 4.0;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">%.3f</text>\n",
                  ml - 6, sy(v) + 4, v);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">Trial</text>\n"
                "<text x=\"14\" y=\"%.1f\" transform=\"rotate(-90 14 %.1f)\" text-anchor=\"middle\" "
                "font-family=\"sans-serif\" font-size=\"12\">Dice loss</text>\n",
                ml + pw / 2, H - 12, mt + ph / 2, mt + ph / 2);
  os << buf;

  const auto best = best_so_far(ledger);
  std::ostringstream path;
  bool started = false;
  for (std::size_t i = 0; i < ledger.size(); ++i) {
    if (!std::isfinite(best[i])) continue;
    std::snprintf(buf, sizeof(buf), "%s%.1f,%.1f ", started ? "L" : "M", sx(ledger[i].trial), sy(best[i]));
    path << buf;
    started = true;
  }
  if (started) os << "<path d=\"" << path.str() << "\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"1.5\"/>\n";
  for (const auto& r : ledger) {
    const bool ok = r.state == TrialState::complete;
    std::snprintf(buf, sizeof(buf), "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"%s\"/>\n", sx(r.trial), sy(r.loss),
                  ok ? "#2c6fbb" : "#999999");
    os << buf;
  }
  os << "</svg>\n";
  return os.str();
}

/// "<name>_YYYYMMDD-HHMMSS" in UTC.
inline std::string report_stem(std::string_view name, std::chrono::system_clock::time_point when) {
  const std::time_t t = std::chrono::system_clock::to_time_t(when);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return std::string(name) + "_" + buf;
}

struct ReportFiles {
  std::optional<std::filesystem::path> metrics_txt, metrics_csv, best_trials, loss_plot;
};

inline ReportFiles render_report(std::span<const EvaluationSummary> evaluations,
                                 const std::optional<std::vector<TrialRecord>>& ledger,
                                 const std::filesystem::path& out_dir, const std::string& stem) {
  const bool have_ledger = ledger && !ledger->empty();
  if (evaluations.empty() && !have_ledger) throw std::invalid_argument("report: no evaluations and no ledger");
  std::filesystem::create_directories(out_dir);
  auto emit = [&](const std::string& suffix, const std::string& text) {
    const auto p = out_dir / (stem + suffix);
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
    return p;
  };
  ReportFiles files;
  if (!evaluations.empty()) {
    files.metrics_txt = emit("_metrics.txt", format_metrics_table(evaluations));
    files.metrics_csv = emit("_metrics.csv", format_metrics_csv(evaluations));
  }
  if (have_ledger) {
    files.best_trials = emit("_best_trials.txt", format_best_trials(*ledger));
    files.loss_plot = emit("_loss.svg", loss_plot_svg(*ledger));
  }
  return files;
}

}  // namespace lungseg
