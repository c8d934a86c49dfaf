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
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lungseg/grid.hpp"
#include "lungseg/png_io.hpp"
#include "lungseg/random.hpp"

namespace lungseg {

enum class SourceDb { jsrt, montgomery, own, phantom };
enum class Severity { normal, mild, severe };

inline std::string_view to_string(SourceDb s) {
  switch (s) {
    case SourceDb::jsrt: return "JSRT";
    case SourceDb::montgomery: return "MONTGOMERY";
    case SourceDb::own: return "OWN";
    case SourceDb::phantom: return "PHANTOM";
  }
  return "?";
}

inline std::string_view to_string(Severity s) {
  switch (s) {
    case Severity::normal: return "NORMAL";
    case Severity::mild: return "MILD";
    case Severity::severe: return "SEVERE";
  }
  return "?";
}

namespace detail {

inline std::string upper(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    fields.emplace_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

}  // namespace detail

inline SourceDb parse_source_db(std::string_view text) {
  const std::string u = detail::upper(detail::trim(text));
  if (u == "JSRT") return SourceDb::jsrt;
  if (u == "MONTGOMERY") return SourceDb::montgomery;
  if (u == "OWN") return SourceDb::own;
  if (u == "PHANTOM") return SourceDb::phantom;
  throw std::invalid_argument("unknown source_db '" + std::string(text) + "' (expected JSRT, MONTGOMERY, OWN or PHANTOM)");
}

inline Severity parse_severity(std::string_view text) {
  const std::string u = detail::upper(detail::trim(text));
  if (u == "NORMAL") return Severity::normal;
  if (u == "MILD") return Severity::mild;
  if (u == "SEVERE") return Severity::severe;
  throw std::invalid_argument("unknown severity '" + std::string(text) + "' (expected NORMAL, MILD or SEVERE)");
}

struct SampleRecord {
  std::string id;
  Image image;
  Mask mask;
  SourceDb source_db = SourceDb::phantom;
  Severity severity = Severity::normal;
};

struct Dataset {
  std::string name;
  std::vector<SampleRecord> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

struct SplitDataset {
  Dataset train;
  Dataset validation;
  Dataset test;
  std::uint64_t seed = 0;
};

/// Checks the SampleRecord and Dataset invariants; throws on the first violation.
inline void validate_dataset(const Dataset& dataset) {
  std::set<std::string> ids;
  for (const auto& s : dataset.samples) {
    if (!ids.insert(s.id).second) throw std::invalid_argument("duplicate sample id: " + s.id);
    if (!same_shape(s.image, s.mask)) {
      throw std::invalid_argument("image/mask dimension mismatch for " + s.id + ": image " + shape_string(s.image) +
                                  ", mask " + shape_string(s.mask));
    }
    if (!is_binary(s.mask)) throw std::invalid_argument("mask is not binary: " + s.id);
  }
}

/// Concatenates datasets; ids must stay unique.
inline Dataset combine_datasets(const std::vector<Dataset>& parts, std::string name) {
  Dataset out;
  out.name = std::move(name);
  for (const auto& p : parts) out.samples.insert(out.samples.end(), p.samples.begin(), p.samples.end());
  validate_dataset(out);
  return out;
}

// ---------------------------------------------------------------------------
// Directory layout: <root>/images/<id>.png, <root>/masks/<id>.png and an
// optional <root>/manifest.csv with header "id,source_db,severity".
// ---------------------------------------------------------------------------

struct ManifestRow {
  SourceDb source_db = SourceDb::phantom;
  Severity severity = Severity::normal;
};

inline std::map<std::string, ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty manifest " + path.string());
  const auto header = detail::split_csv_line(line);
  if (header != std::vector<std::string>{"id", "source_db", "severity"}) {
    throw std::runtime_error("manifest header must be 'id,source_db,severity' in " + path.string());
  }
  std::map<std::string, ManifestRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected 3 fields");
    }
    rows[f[0]] = ManifestRow{parse_source_db(f[1]), parse_severity(f[2])};
  }
  return rows;
}

inline void write_manifest(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << "id,source_db,severity\n";
  for (const auto& s : dataset.samples) out << s.id << ',' << to_string(s.source_db) << ',' << to_string(s.severity) << '\n';
}

/// Loads image/mask pairs from `root`. Uses `manifest` when given, otherwise
/// `<root>/manifest.csv` if it exists; samples without provenance default to
/// PHANTOM/NORMAL. Masks are binarized (nonzero -> 1) and samples sorted by id.
inline Dataset load_dataset(const std::filesystem::path& root,
                            std::optional<std::filesystem::path> manifest = std::nullopt) {
  namespace fs = std::filesystem;
  const fs::path image_dir = root / "images";
  const fs::path mask_dir = root / "masks";
  if (!fs::is_directory(image_dir)) throw std::runtime_error("missing images/ directory under " + root.string());
  if (!fs::is_directory(mask_dir)) throw std::runtime_error("missing masks/ directory under " + root.string());

  if (!manifest && fs::exists(root / "manifest.csv")) manifest = root / "manifest.csv";
  std::map<std::string, ManifestRow> rows;
  if (manifest) rows = read_manifest(*manifest);

  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(image_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") ids.push_back(entry.path().stem().string());
  }
  if (ids.empty()) throw std::runtime_error("no images found in " + image_dir.string());
  std::sort(ids.begin(), ids.end());

  Dataset dataset;
  dataset.name = root.filename().string();
  if (dataset.name.empty()) dataset.name = root.parent_path().filename().string();
  for (const auto& id : ids) {
    const fs::path mask_path = mask_dir / (id + ".png");
    if (!fs::exists(mask_path)) throw std::runtime_error("missing mask: " + id);
    const auto raw_image = read_png_gray(image_dir / (id + ".png"));
    const auto raw_mask = read_png_gray(mask_path);
    if (!same_shape(raw_image, raw_mask)) {
      throw std::runtime_error("image/mask dimension mismatch for " + id + ": image " + shape_string(raw_image) +
                               ", mask " + shape_string(raw_mask));
    }
    SampleRecord s;
    s.id = id;
    s.image = Image(raw_image.height(), raw_image.width());
    s.mask = Mask(raw_mask.height(), raw_mask.width());
    for (std::size_t i = 0; i < raw_image.size(); ++i) {
      s.image.data()[i] = static_cast<float>(raw_image.data()[i]) / 255.0f;
      s.mask.data()[i] = raw_mask.data()[i] != 0 ? 1 : 0;
    }
    if (manifest) {
      const auto it = rows.find(id);
      if (it == rows.end()) throw std::runtime_error("manifest has no row for id: " + id);
      s.source_db = it->second.source_db;
      s.severity = it->second.severity;
    }
    dataset.samples.push_back(std::move(s));
  }
  return dataset;
}

inline Grid<std::uint8_t> to_u8(const Image& image) {
  Grid<std::uint8_t> out(image.height(), image.width());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const float v = std::clamp(image.data()[i], 0.0f, 1.0f);
    out.data()[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

/// Writes the dataset in the directory layout above. A non-empty `root` is
/// refused unless `force` is set.
inline void save_dataset(const Dataset& dataset, const std::filesystem::path& root, bool force = false) {
  namespace fs = std::filesystem;
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!force) throw std::runtime_error("output directory not empty: " + root.string() + " (use --force)");
    fs::remove_all(root / "images");
    fs::remove_all(root / "masks");
    fs::remove(root / "manifest.csv");
  }
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& s : dataset.samples) {
    write_png_gray(root / "images" / (s.id + ".png"), to_u8(s.image));
    Grid<std::uint8_t> m(s.mask.height(), s.mask.width());
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = s.mask.data()[i] ? 255 : 0;
    write_png_gray(root / "masks" / (s.id + ".png"), m);
  }
  write_manifest(root / "manifest.csv", dataset);
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Bilinear resampling with pixel-center alignment; a same-size call is exact.
inline Image resize_bilinear(const Image& src, int out_height, int out_width) {
  if (src.empty()) throw std::invalid_argument("resize_bilinear: empty image");
  Image out(out_height, out_width);
  const double sy = static_cast<double>(src.height()) / out_height;
  const double sx = static_cast<double>(src.width()) / out_width;
  for (int y = 0; y < out_height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - x0;
      const double top = src(y0, x0) * (1.0 - wx) + src(y0, x1) * wx;
      const double bottom = src(y1, x0) * (1.0 - wx) + src(y1, x1) * wx;
      out(y, x) = static_cast<float>(top * (1.0 - wy) + bottom * wy);
    }
  }
  return out;
}

inline Mask resize_nearest(const Mask& src, int out_height, int out_width) {
  if (src.empty()) throw std::invalid_argument("resize_nearest: empty mask");
  Mask out(out_height, out_width);
  for (int y = 0; y < out_height; ++y) {
    const int sy = std::min(static_cast<int>((y + 0.5) * src.height() / out_height), src.height() - 1);
    for (int x = 0; x < out_width; ++x) {
      const int sx = std::min(static_cast<int>((x + 0.5) * src.width() / out_width), src.width() - 1);
      out(y, x) = src(sy, sx);
    }
  }
  return out;
}

inline constexpr int kHistogramBins = 256;

inline int intensity_bin(float v) {
  return std::clamp(static_cast<int>(std::floor(static_cast<double>(v) * kHistogramBins)), 0, kHistogramBins - 1);
}

/// Global histogram equalization of a [0, 1] image over 256 bins. Output is
/// (cdf(bin) - cdf_min) / (count - cdf_min); a single-bin histogram has no
/// spread to redistribute and is returned unchanged.
inline Image equalize_histogram(const Image& image) {
  if (image.empty()) throw std::invalid_argument("equalize_histogram: empty image");
  std::array<std::size_t, kHistogramBins> hist{};
  for (float v : image) ++hist[intensity_bin(v)];
  std::array<std::size_t, kHistogramBins> cdf{};
  std::size_t acc = 0;
  for (int b = 0; b < kHistogramBins; ++b) cdf[b] = acc += hist[b];
  std::size_t cdf_min = 0;
  for (int b = 0; b < kHistogramBins; ++b) {
    if (hist[b] != 0) {
      cdf_min = cdf[b];
      break;
    }
  }
  const std::size_t total = image.size();
  if (total == cdf_min) return image;
  const double denom = static_cast<double>(total - cdf_min);
  Image out(image.height(), image.width());
  for (std::size_t i = 0; i < image.size(); ++i) {
    out.data()[i] = static_cast<float>(static_cast<double>(cdf[intensity_bin(image.data()[i])] - cdf_min) / denom);
  }
  return out;
}

/// Resize to target_size x target_size (bilinear), then equalize.
inline Image preprocess(const Image& image, int target_size) {
  if (image.empty() || image.height() < 1 || image.width() < 1) {
    throw std::invalid_argument("preprocess: input must be a non-empty 2-D image");
  }
  if (target_size < 8) throw std::invalid_argument("preprocess: target_size must be >= 8");
  return equalize_histogram(resize_bilinear(image, target_size, target_size));
}

/// Applies preprocess to every image and nearest-neighbor resizes the masks.
inline Dataset prepare_dataset(const Dataset& dataset, int target_size) {
  Dataset out;
  out.name = dataset.name;
  out.samples.reserve(dataset.size());
  for (const auto& s : dataset.samples) {
    SampleRecord r;
    r.id = s.id;
    r.source_db = s.source_db;
    r.severity = s.severity;
    r.image = preprocess(s.image, target_size);
    r.mask = (s.mask.height() == target_size && s.mask.width() == target_size)
                 ? s.mask
                 : resize_nearest(s.mask, target_size, target_size);
    out.samples.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Rounded 10% share used for both the validation and test parts.
inline std::size_t tenth_share(std::size_t n) { return (n + 5) / 10; }

/// 80/10/10 split. With `test_source`, every test sample is drawn from that
/// source; its remaining samples stay eligible for train/validation.
inline SplitDataset split_dataset(const Dataset& dataset, std::uint64_t seed,
                                  std::optional<SourceDb> test_source = std::nullopt) {
  if (dataset.empty()) throw std::invalid_argument("split_dataset: empty dataset");
  const std::size_t n = dataset.size();
  const std::size_t n_test = tenth_share(n);
  const std::size_t n_val = tenth_share(n);
  Rng rng(mix_seed(seed, 0x5b117));

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < n; ++i) {
    if (!test_source || dataset.samples[i].source_db == *test_source) pool.push_back(i);
  }
  if (test_source) {
    const std::size_t required = (n + 9) / 10;
    if (pool.size() < required) {
      throw std::invalid_argument("insufficient " + std::string(to_string(*test_source)) +
                                  " samples for the test split: required " + std::to_string(required) +
                                  ", available " + std::to_string(pool.size()));
    }
  }
  rng.shuffle(pool);
  std::vector<char> in_test(n, 0);
  for (std::size_t k = 0; k < n_test; ++k) in_test[pool[k]] = 1;

  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < n; ++i) {
    if (!in_test[i]) rest.push_back(i);
  }
  rng.shuffle(rest);
  std::vector<char> in_val(n, 0);
  for (std::size_t k = 0; k < n_val && k < rest.size(); ++k) in_val[rest[k]] = 1;

  SplitDataset split;
  split.seed = seed;
  split.train.name = dataset.name + "/train";
  split.validation.name = dataset.name + "/validation";
  split.test.name = dataset.name + "/test";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = dataset.samples[i];
    if (in_test[i]) {
      split.test.samples.push_back(s);
    } else if (in_val[i]) {
      split.validation.samples.push_back(s);
    } else {
      split.train.samples.push_back(s);
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic phantoms (test fixture, not clinical data)
// ---------------------------------------------------------------------------

struct PhantomOptions {
  std::string id_prefix = "phantom";
  SourceDb source = SourceDb::phantom;
  std::string name = "phantom";
};

namespace detail {

struct Ellipse {
  double cx, cy, ax, ay, angle;

  bool contains(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double u = (dx * c + dy * s) / ax;
    const double v = (-dx * s + dy * c) / ay;
    return u * u + v * v <= 1.0;
  }
};

inline std::string padded_index(std::size_t i, std::size_t n) {
  const std::size_t width = std::max<std::size_t>(4, std::to_string(n).size());
  std::string s = std::to_string(i);
  return std::string(width > s.size() ? width - s.size() : 0, '0') + s;
}

}  // namespace detail

/// Two elliptical "lungs" of distinct intensity over a noisy background; the
/// mask is their union. round(severe_fraction * n) samples get an opaque blob
/// over part of one lung in the image only and are tagged SEVERE.
inline Dataset generate_phantom_dataset(int n, int size, double severe_fraction, std::uint64_t seed,
                                        const PhantomOptions& options = {}) {
  if (n < 1) throw std::invalid_argument("generate_phantom_dataset: n must be >= 1");
  if (size < 8) throw std::invalid_argument("generate_phantom_dataset: size must be >= 8");
  if (!(severe_fraction >= 0.0 && severe_fraction <= 1.0)) {
    throw std::invalid_argument("generate_phantom_dataset: severe_fraction must be in [0, 1]");
  }
  const auto count = static_cast<std::size_t>(n);
  const auto n_severe = static_cast<std::size_t>(std::llround(severe_fraction * n));
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng picker(mix_seed(seed, 0xfa7a1));
  picker.shuffle(order);
  std::vector<char> severe(count, 0);
  for (std::size_t k = 0; k < n_severe; ++k) severe[order[k]] = 1;

  constexpr double kDeg = std::numbers::pi / 180.0;
  Dataset dataset;
  dataset.name = options.name;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i + 1));
    const double jitter_y = rng.uniform(-0.03, 0.03);
    const detail::Ellipse left{0.31 + rng.uniform(-0.02, 0.02), 0.48 + jitter_y, rng.uniform(0.10, 0.15),
                               rng.uniform(0.22, 0.30), rng.uniform(-8.0, 8.0) * kDeg};
    const detail::Ellipse right{0.69 + rng.uniform(-0.02, 0.02), 0.48 + jitter_y, rng.uniform(0.10, 0.15),
                                rng.uniform(0.22, 0.30), rng.uniform(-8.0, 8.0) * kDeg};
    const double background = rng.uniform(0.55, 0.70);
    const double left_level = rng.uniform(0.15, 0.25);
    const double right_level = left_level + rng.uniform(0.06, 0.12);
    const double noise = 0.04;

    bool has_blob = severe[i] != 0;
    detail::Ellipse blob{0, 0, 0, 0, 0};
    if (has_blob) {
      const auto& lung = rng.bernoulli(0.5) ? left : right;
      const double r = rng.uniform(0.7, 1.0) * lung.ax;
      blob = detail::Ellipse{lung.cx + rng.uniform(-0.4, 0.4) * lung.ax, lung.cy + rng.uniform(-0.5, 0.5) * lung.ay,
                             r, r * rng.uniform(1.0, 1.6), 0.0};
    }

    SampleRecord s;
    s.id = options.id_prefix + "_" + detail::padded_index(i + 1, count);
    s.source_db = options.source;
    s.severity = has_blob ? Severity::severe : Severity::normal;
    s.image = Image(size, size);
    s.mask = Mask(size, size);
    for (int y = 0; y < size; ++y) {
      const double py = (y + 0.5) / size;
      for (int x = 0; x < size; ++x) {
        const double px = (x + 0.5) / size;
        const bool in_left = left.contains(px, py);
        const bool in_right = right.contains(px, py);
        double v = background;
        if (in_left) v = left_level;
        if (in_right) v = right_level;
        if (has_blob && blob.contains(px, py)) v = 0.9;
        v += rng.normal(0.0, noise);
        s.image(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        s.mask(y, x) = (in_left || in_right) ? 1 : 0;
      }
    }
    dataset.samples.push_back(std::move(s));
  }
  return dataset;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentParams {
  static constexpr double kMaxRotationDeg = 10.0;
  static constexpr double kMaxShiftFrac = 0.10;
  static constexpr double kMinScale = 0.80;
  static constexpr double kMaxScale = 1.20;

  double rotation_deg = 0.0;
  double shift_x_frac = 0.0;
  double shift_y_frac = 0.0;
  double scale = 1.0;

  bool valid() const {
    return std::abs(rotation_deg) <= kMaxRotationDeg && std::abs(shift_x_frac) <= kMaxShiftFrac &&
           std::abs(shift_y_frac) <= kMaxShiftFrac && scale >= kMinScale && scale <= kMaxScale;
  }

  void validate() const {
    if (!valid()) {
      std::ostringstream os;
      os << "augment parameters out of range: rotation_deg=" << rotation_deg << " shift_x_frac=" << shift_x_frac
         << " shift_y_frac=" << shift_y_frac << " scale=" << scale
         << " (allowed: |rotation| <= 10, |shift| <= 0.10, scale in [0.80, 1.20])";
      throw std::invalid_argument(os.str());
    }
  }
};

inline AugmentParams sample_augment_params(Rng& rng) {
  AugmentParams p;
  p.rotation_deg = rng.uniform(-AugmentParams::kMaxRotationDeg, AugmentParams::kMaxRotationDeg);
  p.shift_x_frac = rng.uniform(-AugmentParams::kMaxShiftFrac, AugmentParams::kMaxShiftFrac);
  p.shift_y_frac = rng.uniform(-AugmentParams::kMaxShiftFrac, AugmentParams::kMaxShiftFrac);
  p.scale = rng.uniform(AugmentParams::kMinScale, AugmentParams::kMaxScale);
  return p;
}

/// Rotation and scale about the image center followed by a shift, applied
/// identically to image (bilinear) and mask (nearest). Uncovered pixels are 0.
inline std::pair<Image, Mask> augment(const Image& image, const Mask& mask, const AugmentParams& params) {
  params.validate();
  if (!same_shape(image, mask)) {
    throw std::invalid_argument("augment: image " + shape_string(image) + " and mask " + shape_string(mask) +
                                " differ in size");
  }
  const int h = image.height();
  const int w = image.width();
  const double cx = (w - 1) / 2.0;
  const double cy = (h - 1) / 2.0;
  const double tx = params.shift_x_frac * w;
  const double ty = params.shift_y_frac * h;
  const double theta = params.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);

  Image out_image(h, w, 0.0f);
  Mask out_mask(h, w, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Inverse map: output pixel -> source location.
      const double dx = x - cx - tx;
      const double dy = y - cy - ty;
      const double sx = (c * dx + s * dy) / params.scale + cx;
      const double sy = (-s * dx + c * dy) / params.scale + cy;

      const double fx = std::floor(sx);
      const double fy = std::floor(sy);
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      const double wx = sx - fx;
      const double wy = sy - fy;
      auto at = [&](int yy, int xx) -> double {
        return (xx >= 0 && xx < w && yy >= 0 && yy < h) ? image(yy, xx) : 0.0;
      };
      double v = 0.0;
      if (x0 >= -1 && x0 < w && y0 >= -1 && y0 < h) {
        v = (at(y0, x0) * (1.0 - wx) + at(y0, x0 + 1) * wx) * (1.0 - wy) +
            (at(y0 + 1, x0) * (1.0 - wx) + at(y0 + 1, x0 + 1) * wx) * wy;
      }
      out_image(y, x) = static_cast<float>(v);

      const int nx = static_cast<int>(std::floor(sx + 0.5));
      const int ny = static_cast<int>(std::floor(sy + 0.5));
      if (nx >= 0 && nx < w && ny >= 0 && ny < h) out_mask(y, x) = mask(ny, nx);
    }
  }
  return {std::move(out_image), std::move(out_mask)};
}

}  // namespace lungseg
