#pragma once

// Class-directory datasets: scanning, manifests, real-only val/test
// reservation, balance planning, batch loading, and a procedural desk-scale
// dataset with five visually distinct pathology analogues.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ganbalance/image_io.hpp"
#include "ganbalance/image_set.hpp"
#include "ganbalance/labels.hpp"
#include "ganbalance/random.hpp"

namespace ganbalance {

namespace fs = std::filesystem;

enum class Source { real, synthetic, synthetic_accepted };

inline std::string_view source_name(Source s) {
  switch (s) {
    case Source::real: return "real";
    case Source::synthetic: return "synthetic";
    case Source::synthetic_accepted: return "synthetic-accepted";
  }
  return "real";
}

inline std::optional<Source> parse_source(std::string_view s) {
  for (auto v : {Source::real, Source::synthetic, Source::synthetic_accepted})
    if (s == source_name(v)) return v;
  return std::nullopt;
}

struct ImageRecord {
  std::string path;  // as stored in the manifest; relative paths resolve against the dataset root
  ClassLabel label = ClassLabel::Normal;
  Source source = Source::real;
  std::string checksum;  // CRC-32 of the file bytes, 8 hex digits

  bool operator==(const ImageRecord&) const = default;
};

struct ClassManifest {
  ClassLabel label = ClassLabel::Normal;
  std::vector<ImageRecord> records;
};

using DatasetManifest = std::array<ClassManifest, kNumClasses>;
using ClassCounts = std::array<std::size_t, kNumClasses>;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline DatasetManifest empty_manifest() {
  DatasetManifest m;
  for (auto c : kAllClasses) m[static_cast<std::size_t>(c)].label = c;
  return m;
}

inline ClassCounts counts_of(const DatasetManifest& m) {
  ClassCounts n{};
  for (std::size_t c = 0; c < kNumClasses; ++c) n[c] = m[c].records.size();
  return n;
}

inline std::size_t total_of(const ClassCounts& n) { return std::accumulate(n.begin(), n.end(), std::size_t{0}); }

/// Records across all classes in class-code order; manifest line indices
/// refer to this order.
inline std::vector<ImageRecord> flatten(const DatasetManifest& m) {
  std::vector<ImageRecord> out;
  for (const auto& cm : m) out.insert(out.end(), cm.records.begin(), cm.records.end());
  return out;
}

// ---------------------------------------------------------------------------
// Manifest serialization: path<TAB>class<TAB>source<TAB>checksum per line.

inline std::string serialize_manifest(const DatasetManifest& m) {
  std::string out;
  for (const auto& r : flatten(m)) {
    out += r.path;
    out += '\t';
    out += name(r.label);
    out += '\t';
    out += source_name(r.source);
    out += '\t';
    out += r.checksum;
    out += '\n';
  }
  return out;
}

inline DatasetManifest parse_manifest(const std::string& text) {
  auto m = empty_manifest();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 4) throw DataError("manifest line " + std::to_string(lineno) + ": expected 4 columns");
    const auto label = parse_label(cols[1]);
    const auto source = parse_source(cols[2]);
    if (!label) throw DataError("manifest line " + std::to_string(lineno) + ": unknown class " + cols[1]);
    if (!source) throw DataError("manifest line " + std::to_string(lineno) + ": unknown source " + cols[2]);
    m[static_cast<std::size_t>(*label)].records.push_back({cols[0], *label, *source, cols[3]});
  }
  return m;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Scanning

struct SkipRecord {
  std::string path;
  std::string reason;
};

struct ScanResult {
  DatasetManifest manifest = empty_manifest();
  std::vector<SkipRecord> skipped;
  std::vector<std::string> warnings;
};

/// Enumerates root/<ClassName>/*.png. Files that are not 8-bit grayscale PNGs
/// are skipped with a reason; unknown directories produce warnings. Paths are
/// stored relative to root with '/' separators, sorted.
inline ScanResult scan_dataset(const fs::path& root, Source source = Source::real) {
  ScanResult res;
  if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  bool any_class = false;
  for (const auto& dir : dirs) {
    const auto label = parse_label(dir.filename().string());
    if (!label) {
      res.warnings.push_back("unknown class directory: " + dir.filename().string());
      continue;
    }
    any_class = true;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      const std::string rel = fs::relative(file, root).generic_string();
      try {
        const auto bytes = read_file_bytes(file);
        (void)decode_gray_png(bytes, rel);
        res.manifest[static_cast<std::size_t>(*label)].records.push_back(
            {rel, *label, source, hex32(crc32_of(bytes))});
      } catch (const ImageError& e) {
        res.skipped.push_back({rel, e.what()});
      }
    }
  }
  if (!any_class) res.warnings.push_back("no class directories under " + root.string());
  return res;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  std::size_t val_per_class = 0;
  std::size_t test_per_class = 0;
  std::uint64_t seed = 0;
};

struct Splits {
  DatasetManifest train = empty_manifest();
  DatasetManifest val = empty_manifest();
  DatasetManifest test = empty_manifest();
};

inline std::string deficit_table(const std::array<std::size_t, kNumClasses>& have,
                                 const std::array<std::size_t, kNumClasses>& need, const std::string& what) {
  std::string msg = "insufficient " + what + ":";
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (have[c] < need[c])
      msg += "\n  " + std::string(display_name(static_cast<ClassLabel>(c))) + ": have " + std::to_string(have[c]) +
             ", need " + std::to_string(need[c]) + " (deficit " + std::to_string(need[c] - have[c]) + ")";
  return msg;
}

/// Per class: seeded shuffle of the real records, the first val_per_class to
/// validation, the next test_per_class to test, everything else (including
/// all non-real records) to training.
inline Splits make_splits(const DatasetManifest& m, const SplitSpec& spec) {
  std::array<std::size_t, kNumClasses> have{}, need{};
  bool short_any = false;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (const auto& r : m[c].records) have[c] += r.source == Source::real;
    need[c] = spec.val_per_class + spec.test_per_class;
    short_any = short_any || have[c] < need[c];
  }
  if (short_any) throw DataError(deficit_table(have, need, "real images for validation/test reserves"));

  Splits s;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::vector<const ImageRecord*> real;
    for (const auto& r : m[c].records) {
      if (r.source == Source::real)
        real.push_back(&r);
      else
        s.train[c].records.push_back(r);
    }
    Rng rng(mix_seed(spec.seed, c));
    shuffle(real.begin(), real.end(), rng);
    for (std::size_t i = 0; i < real.size(); ++i) {
      auto& dst = i < spec.val_per_class                         ? s.val[c]
                  : i < spec.val_per_class + spec.test_per_class ? s.test[c]
                                                                 : s.train[c];
      dst.records.push_back(*real[i]);
    }
  }
  return s;
}

/// Line indices (into `flatten(full)`) of the records of `part`, matched by path.
inline std::vector<std::size_t> split_indices(const DatasetManifest& full, const DatasetManifest& part) {
  std::map<std::string, std::size_t> index;
  const auto all = flatten(full);
  for (std::size_t i = 0; i < all.size(); ++i) index.emplace(all[i].path, i);
  std::vector<std::size_t> out;
  for (const auto& r : flatten(part)) {
    auto it = index.find(r.path);
    if (it == index.end()) throw DataError("split record not in manifest: " + r.path);
    out.push_back(it->second);
  }
  return out;
}

inline std::string serialize_indices(const std::vector<std::size_t>& idx) {
  std::string out;
  for (auto i : idx) out += std::to_string(i) + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Balance planning

struct BalancePlan {
  std::size_t target = 0;
  ClassCounts real{};
  ClassCounts quota{};
};

/// target = multiplier * max count; quota_c = target - count_c.
inline BalancePlan plan_balance(const ClassCounts& train_counts, std::size_t multiplier = 2) {
  const auto max = *std::max_element(train_counts.begin(), train_counts.end());
  if (max == 0) throw DataError("plan_balance: every class is empty");
  if (multiplier < 1) throw DataError("plan_balance: multiplier must be >= 1");
  BalancePlan p;
  p.target = multiplier * max;
  p.real = train_counts;
  for (std::size_t c = 0; c < kNumClasses; ++c) p.quota[c] = p.target - train_counts[c];
  return p;
}

inline BalancePlan plan_balance(const DatasetManifest& train, std::size_t multiplier = 2) {
  return plan_balance(counts_of(train), multiplier);
}

inline std::string serialize_plan(const BalancePlan& p) {
  std::string out = "class,target,real,quota\n";
  for (auto c : kAllClasses) {
    const auto i = static_cast<std::size_t>(c);
    out += std::string(name(c)) + ',' + std::to_string(p.target) + ',' + std::to_string(p.real[i]) + ',' +
           std::to_string(p.quota[i]) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loading

inline fs::path resolve(const fs::path& root, const std::string& path) {
  fs::path p(path);
  return p.is_absolute() ? p : root / p;
}

/// Decodes the records into memory. Every image must be side x side.
inline ImageSet load_images(const fs::path& root, const std::vector<ImageRecord>& records, std::size_t side) {
  ImageSet set{side, {}, {}};
  set.pixels.reserve(records.size() * side * side);
  for (const auto& r : records) {
    GrayImage img;
    try {
      img = read_gray_png(resolve(root, r.path));
    } catch (const ImageError& e) {
      throw DataError("cannot load " + r.path + ": " + e.what());
    }
    if (img.width != side || img.height != side)
      throw DataError("cannot load " + r.path + ": expected " + std::to_string(side) + "x" + std::to_string(side));
    set.add(img.pixels, code(r.label));
  }
  return set;
}

inline ImageSet load_images(const fs::path& root, const DatasetManifest& m, std::size_t side) {
  return load_images(root, flatten(m), side);
}

struct Batch {
  Tensor images;  // [n, 1, S, S]
  std::vector<int> labels;
};

inline Batch load_batch(const fs::path& root, std::span<const ImageRecord> records, std::size_t side,
                        PixelScale scale) {
  const auto set = load_images(root, std::vector<ImageRecord>(records.begin(), records.end()), side);
  return {to_tensor(set, scale), set.labels};
}

// ---------------------------------------------------------------------------
// Procedural desk-scale dataset
//
// Every image is a stylized chest: a mid-gray body, two darker lung fields and
// a bright heart shadow between them, with jitter in position, scale and
// exposure plus sensor noise. Each class adds one signature:
//   Normal           heart of nominal size
//   Cardiomegaly     enlarged heart
//   PleuralEffusion  bright band filling the bottom of the lungs
//   Pneumothorax     thin bright line along the outer edge of one lung
//   PulmonaryEdema   diffuse high-frequency texture over the lungs

struct DeskStyle {
  double noise_std = 10.0;         // sensor noise, gray levels
  double jitter = 0.025;            // position jitter, fraction of the side
  double heart_scale = 1.0;        // Normal heart radius multiplier
  double cardiomegaly_scale = 1.6;
  double effusion_height = 0.16;   // fraction of the side
  double line_contrast = 70.0;     // gray levels above the lung
  double line_half_width = 0.9;    // pixels
  double edema_amplitude = 35.0;
  double edema_haze = 30.0;         // fluid raises overall lung density
  double collapse_darkening = 25.0;  // beyond the pleural line
};

inline constexpr ClassCounts kDeskCounts{401, 502, 1451, 1578, 1710};  // full-scale counts / 10, code order

namespace detail {

struct Canvas {
  std::size_t side;
  std::vector<double> v;
  explicit Canvas(std::size_t s, double fill) : side(s), v(s * s, fill) {}
  double& at(std::size_t y, std::size_t x) { return v[y * side + x]; }
};

inline bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

}  // namespace detail

/// One image of class `c`, deterministic in `rng`.
inline std::vector<std::uint8_t> draw_desk_image(ClassLabel c, std::size_t side, Rng& rng,
                                                 const DeskStyle& style = {}) {
  const double s = static_cast<double>(side);
  const double exposure = uniform(rng, 0.9, 1.1);
  const double ox = normal(rng, 0, style.jitter) * s, oy = normal(rng, 0, style.jitter) * s;
  const double body = 110.0 * exposure, lung = 45.0 * exposure, heart_level = 175.0 * exposure;
  const double lung_rx = s * uniform(rng, 0.17, 0.21), lung_ry = s * uniform(rng, 0.30, 0.35);
  const double lcx = s * 0.30 + ox, rcx = s * 0.70 + ox, lcy = s * 0.47 + oy;

  double heart_mult = style.heart_scale * uniform(rng, 0.9, 1.1);
  if (c == ClassLabel::Cardiomegaly)
    heart_mult = style.cardiomegaly_scale * uniform(rng, 0.92, 1.12);
  const double hrx = s * 0.12 * heart_mult, hry = s * 0.10 * heart_mult;
  const double hcx = s * 0.54 + ox + normal(rng, 0, 0.01) * s, hcy = s * 0.62 + oy;

  const double eff_top = lcy + lung_ry - s * style.effusion_height * uniform(rng, 0.8, 1.25);
  const bool line_left = uniform01(rng) < 0.5;
  const double line_offset = uniform(rng, 0.72, 0.85);  // fraction of the lung radius
  const double edema_freq = uniform(rng, 0.9, 1.3);
  const double edema_phase_x = uniform(rng, 0, 6.283), edema_phase_y = uniform(rng, 0, 6.283);

  detail::Canvas cv(side, body);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double v = body;
      const bool in_left = detail::in_ellipse(px, py, lcx, lcy, lung_rx, lung_ry);
      const bool in_right = detail::in_ellipse(px, py, rcx, lcy, lung_rx, lung_ry);
      if (in_left || in_right) {
        v = lung;
        if (c == ClassLabel::PleuralEffusion && py > eff_top) v = 150.0 * exposure;
        if (c == ClassLabel::PulmonaryEdema) {
          const double t = std::sin(px * edema_freq * 1.9 + edema_phase_x) * std::sin(py * edema_freq * 2.3 + edema_phase_y);
          v += (style.edema_haze + style.edema_amplitude * t + normal(rng, 0, style.edema_amplitude * 0.35));
        }
        if (c == ClassLabel::Pneumothorax && (in_left == line_left)) {
          // A band at a fixed normalized radius of the chosen lung, on its outer half.
          const double cx = line_left ? lcx : rcx;
          const double dx = (px - cx) / lung_rx, dy = (py - lcy) / lung_ry;
          const double r = std::sqrt(dx * dx + dy * dy);
          const bool outer = line_left ? px < cx : px > cx;
          if (outer && std::abs(r - line_offset) * lung_rx < style.line_half_width)
            v += style.line_contrast * exposure;
          if (outer && r > line_offset) v -= style.collapse_darkening;
        }
      }
      if (detail::in_ellipse(px, py, hcx, hcy, hrx, hry)) v = heart_level;
      cv.at(y, x) = v + normal(rng, 0, style.noise_std);
    }
  }
  std::vector<std::uint8_t> out(side * side);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::clamp(std::lround(cv.v[i]), 0L, 255L));
  return out;
}

/// counts[c] images of each class, class-code order, each class drawn from
/// its own seeded stream.
inline ImageSet generate_desk_images(const ClassCounts& counts, std::size_t side, std::uint64_t seed,
                                     const DeskStyle& style = {}) {
  if (side < 32) throw std::invalid_argument("desk dataset: size must be >= 32");
  ImageSet set{side, {}, {}};
  set.pixels.reserve(total_of(counts) * side * side);
  for (auto c : kAllClasses) {
    Rng rng(mix_seed(seed, 0x100 + static_cast<std::uint64_t>(code(c))));
    for (std::size_t i = 0; i < counts[static_cast<std::size_t>(c)]; ++i)
      set.add(draw_desk_image(c, side, rng, style), code(c));
  }
  return set;
}

/// Writes root/<ClassName>/<prefix>NNNNN.png for every image; returns the
/// manifest of what was written.
inline DatasetManifest write_image_set(const fs::path& root, const ImageSet& set, Source source,
                                       const std::string& prefix = "img") {
  auto m = empty_manifest();
  std::array<std::size_t, kNumClasses> seq{};
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto label = label_from_code(set.labels[i]);
    const auto c = static_cast<std::size_t>(label);
    char file[64];
    std::snprintf(file, sizeof file, "%s%05zu.png", prefix.c_str(), seq[c]++);
    const std::string rel = std::string(name(label)) + "/" + file;
    const auto bytes = encode_gray_png(set.side, set.side, set.image(i));
    write_file_bytes(root / rel, bytes);
    m[c].records.push_back({rel, label, source, hex32(crc32_of(bytes))});
  }
  return m;
}

/// k-nearest-neighbour (squared pixel distance, majority vote with ties to the
/// nearest) accuracy in percent of `query` against `reference`.
inline double knn_accuracy(const ImageSet& reference, const ImageSet& query, std::size_t k = 5) {
  if (reference.size() < k || query.size() == 0) throw std::invalid_argument("knn: not enough samples");
  std::size_t correct = 0;
  std::vector<std::pair<std::int64_t, int>> dist(reference.size());
  for (std::size_t q = 0; q < query.size(); ++q) {
    const auto a = query.image(q);
    for (std::size_t r = 0; r < reference.size(); ++r) {
      const auto b = reference.image(r);
      std::int64_t d = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const int diff = static_cast<int>(a[i]) - static_cast<int>(b[i]);
        d += diff * diff;
      }
      dist[r] = {d, reference.labels[r]};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    std::array<std::size_t, kNumClasses> votes{};
    for (std::size_t i = 0; i < k; ++i) ++votes[static_cast<std::size_t>(dist[i].second)];
    int best = dist[0].second;
    for (std::size_t c = 0; c < kNumClasses; ++c)
      if (votes[c] > votes[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    correct += best == query.labels[q];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(query.size());
}

}  // namespace ganbalance
