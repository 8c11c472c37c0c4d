#pragma once

// The balancing study: assemble DS1/DS2/DS3 training sets, train a classifier
// per protocol and repeat, and report per-class accuracy and validation curves.

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ganbalance/checkpoint.hpp"
#include "ganbalance/classifier.hpp"
#include "ganbalance/curation.hpp"
#include "ganbalance/dataset.hpp"
#include "ganbalance/gan.hpp"

namespace ganbalance {

enum class Protocol { ds1, ds2, ds3 };

inline std::string_view protocol_name(Protocol p) {
  switch (p) {
    case Protocol::ds1: return "ds1";
    case Protocol::ds2: return "ds2";
    case Protocol::ds3: return "ds3";
  }
  return "ds1";
}

inline std::optional<Protocol> parse_protocol(std::string_view s) {
  std::string lower(s);
  for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  for (auto p : {Protocol::ds1, Protocol::ds2, Protocol::ds3})
    if (lower == protocol_name(p)) return p;
  return std::nullopt;
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration: a flat `key = value` document. Every hyperparameter of the
// study has a key; config.lock is the fully resolved document.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StudyConfig {
  // study
  std::uint64_t seed = 2024;
  std::size_t repeats = 5;
  std::vector<Protocol> protocols{Protocol::ds1, Protocol::ds2, Protocol::ds3};
  // data
  std::size_t image_size = 64;
  ClassCounts class_counts = kDeskCounts;
  std::uint64_t data_seed = 7;
  std::size_t val_per_class = 100;
  std::size_t test_per_class = 100;
  std::uint64_t split_seed = 11;
  std::size_t balance_multiplier = 2;
  // gan
  GanConfig gan = [] {
    auto g = GanConfig::desk();
    g.base_channels = 64;
    g.iterations = 150;  // passes over a 600-image pool: 1350 steps at batch 64
    return g;
  }();
  double gan_lr = 2e-4;
  std::size_t gan_images_per_class = 600;
  std::uint64_t gan_seed = 13;
  // classifier
  ClassifierConfig classifier = [] {
    auto c = ClassifierConfig::desk();
    c.batches_per_iteration = 3;
    return c;
  }();
  // curation
  bool auto_accept = true;
  bool allow_deficit = false;

  using Setter = std::function<void(const std::string&)>;
  using Getter = std::function<std::string()>;
  struct Binding {
    std::string key;
    Setter set;
    Getter get;
  };

  static StudyConfig desk() { return {}; }

  std::vector<Binding> bindings() {
    std::vector<Binding> b;
    auto u64 = [&b](std::string key, std::uint64_t& v) {
      b.push_back({std::move(key), [&v](const std::string& s) { v = parse_u64(s); },
                   [&v] { return std::to_string(v); }});
    };
    auto size = [&b](std::string key, std::size_t& v) {
      b.push_back({std::move(key), [&v](const std::string& s) { v = static_cast<std::size_t>(parse_u64(s)); },
                   [&v] { return std::to_string(v); }});
    };
    auto real = [&b](std::string key, double& v) {
      b.push_back({std::move(key), [&v](const std::string& s) { v = parse_double(s); },
                   [&v] { return format_double(v); }});
    };
    auto flag = [&b](std::string key, bool& v) {
      b.push_back({std::move(key), [&v](const std::string& s) { v = parse_bool(s); },
                   [&v] { return std::string(v ? "true" : "false"); }});
    };

    u64("seed", seed);
    size("repeats", repeats);
    b.push_back({"protocols",
                 [this](const std::string& s) {
                   protocols.clear();
                   for (const auto& item : split_list(s)) {
                     auto p = parse_protocol(item);
                     if (!p) throw ConfigError("unknown protocol " + item);
                     protocols.push_back(*p);
                   }
                   if (protocols.empty()) throw ConfigError("protocols must not be empty");
                 },
                 [this] {
                   std::string out;
                   for (auto p : protocols) out += (out.empty() ? "" : ",") + std::string(protocol_name(p));
                   return out;
                 }});

    size("data.image_size", image_size);
    for (auto c : kAllClasses) size("data.count." + std::string(name(c)), class_counts[static_cast<std::size_t>(c)]);
    u64("data.seed", data_seed);
    size("data.val_per_class", val_per_class);
    size("data.test_per_class", test_per_class);
    u64("data.split_seed", split_seed);
    size("data.balance_multiplier", balance_multiplier);

    size("gan.z_dim", gan.z_dim);
    size("gan.base_channels", gan.base_channels);
    size("gan.stages", gan.stages);
    size("gan.batch_size", gan.batch_size);
    size("gan.iterations", gan.iterations);
    real("gan.lr", gan_lr);
    real("gan.beta1", gan.adam.beta1);
    real("gan.beta2", gan.adam.beta2);
    real("gan.init_std", gan.init_std);
    flag("gan.use_batchnorm", gan.use_batchnorm);
    size("gan.images_per_class", gan_images_per_class);
    u64("gan.seed", gan_seed);

    b.push_back({"clf.stages",
                 [this](const std::string& s) {
                   classifier.stages.clear();
                   for (const auto& item : split_list(s))
                     classifier.stages.push_back({static_cast<std::size_t>(parse_u64(item))});
                 },
                 [this] {
                   std::string out;
                   for (const auto& st : classifier.stages)
                     out += (out.empty() ? "" : ",") + std::to_string(st.out_channels);
                   return out;
                 }});
    size("clf.hidden_units", classifier.hidden_units);
    size("clf.batch_size", classifier.batch_size);
    size("clf.iterations", classifier.iterations);
    size("clf.batches_per_iteration", classifier.batches_per_iteration);
    real("clf.lr0", classifier.schedule.lr0);
    real("clf.lr_min", classifier.schedule.lr_min);
    real("clf.lr_midpoint", classifier.schedule.midpoint);
    real("clf.lr_width", classifier.schedule.width);
    real("clf.beta1", classifier.adam.beta1);
    real("clf.beta2", classifier.adam.beta2);
    real("clf.l2", classifier.adam.l2);
    flag("clf.early_stopping", classifier.early_stopping);
    size("clf.patience", classifier.early_stop.patience);
    real("clf.min_delta", classifier.early_stop.min_delta);
    b.push_back({"clf.init",
                 [this](const std::string& s) {
                   if (s == "normal")
                     classifier.init = InitScheme::normal;
                   else if (s == "he")
                     classifier.init = InitScheme::he;
                   else
                     throw ConfigError("clf.init must be normal or he");
                 },
                 [this] { return std::string(classifier.init == InitScheme::he ? "he" : "normal"); }});
    real("clf.init_std", classifier.init_std);
    real("clf.init_bias", classifier.init_bias);

    flag("curation.auto_accept", auto_accept);
    flag("curation.allow_deficit", allow_deficit);
    return b;
  }

  /// Applies `key = value` lines ('#' starts a comment). Unknown keys are errors.
  void apply(const std::string& text) {
    auto b = bindings();
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    bool schedule_given = false, length_given = false;
    auto trim = [](const std::string& s) {
      const auto b0 = s.find_first_not_of(" \t\r"), e0 = s.find_last_not_of(" \t\r");
      return b0 == std::string::npos ? std::string() : s.substr(b0, e0 - b0 + 1);
    };
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      if (trim(line).empty()) continue;
      const auto where = "config line " + std::to_string(lineno) + ": ";
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      auto it = std::find_if(b.begin(), b.end(), [&](const Binding& x) { return x.key == key; });
      if (it == b.end()) throw ConfigError(where + "unknown key " + key);
      try {
        it->set(value);
      } catch (const ConfigError& e) {
        throw ConfigError(where + e.what());
      } catch (const std::exception&) {
        throw ConfigError(where + "bad value for " + key + ": " + value);
      }
      if (key == "clf.lr_min" || key == "clf.lr_midpoint" || key == "clf.lr_width") schedule_given = true;
      if (key == "clf.iterations" || key == "clf.lr0") length_given = true;
    }
    // The decay schedule follows the run length unless set explicitly.
    if (length_given && !schedule_given)
      classifier.schedule = LrSchedule::sigmoid_decay_for(classifier.schedule.lr0, classifier.iterations);
    finalize();
  }

  void finalize() {
    if (repeats < 1) throw ConfigError("repeats must be >= 1");
    if (gan_images_per_class == 0) throw ConfigError("gan.images_per_class must be >= 1");
    gan.output_size = GanConfig::kSeedSize << gan.stages;
    if (gan.output_size != image_size)
      throw ConfigError("gan.stages " + std::to_string(gan.stages) + " gives " + std::to_string(gan.output_size) +
                        " pixels but data.image_size is " + std::to_string(image_size));
    gan.schedule = LrSchedule::constant_rate(gan_lr);
    gan.validate();
    classifier.input_size = image_size;
    (void)classifier.feature_length();  // throws on a stack that does not fit the input
  }

  /// Fully resolved configuration, one key per line in binding order.
  std::string lock() const {
    auto copy = *this;
    std::string out;
    for (const auto& b : copy.bindings()) out += b.key + " = " + b.get() + "\n";
    return out;
  }

  static std::uint64_t parse_u64(const std::string& s) {
    std::size_t pos = 0;
    if (s.empty() || s[0] == '-') throw std::invalid_argument(s);
    const auto v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  }
  static double parse_double(const std::string& s) {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  }
  static bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw std::invalid_argument(s);
  }
  static std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
};

inline StudyConfig load_study_config(const std::filesystem::path& path) {
  StudyConfig c;
  c.apply(read_text(path));
  return c;
}

// ---------------------------------------------------------------------------
// Training-set assembly

inline ClassCounts counts_of(const std::vector<ImageRecord>& records) {
  ClassCounts n{};
  for (const auto& r : records) ++n[static_cast<std::size_t>(r.label)];
  return n;
}

/// DS1: all real training images. DS2: every class undersampled (seeded) to
/// the smallest class. DS3: real training images plus accepted synthetic
/// images up to the plan's target per class, then shuffled. A DS3 quota the
/// accepted pool cannot cover is an error unless `allow_deficit`.
inline std::vector<ImageRecord> assemble(Protocol protocol, const DatasetManifest& train, const BalancePlan& plan,
                                         const DatasetManifest& accepted, std::uint64_t seed,
                                         bool allow_deficit = false) {
  for (const auto& cm : train)
    for (const auto& r : cm.records)
      if (r.source != Source::real) throw DataError("training manifest holds a non-real record: " + r.path);
  std::vector<ImageRecord> out;
  switch (protocol) {
    case Protocol::ds1:
      out = flatten(train);
      break;
    case Protocol::ds2: {
      std::size_t floor = SIZE_MAX;
      for (const auto& cm : train) floor = std::min(floor, cm.records.size());
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::vector<std::size_t> idx(train[c].records.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Rng rng(mix_seed(seed, 0x200 + c));
        shuffle(idx.begin(), idx.end(), rng);
        idx.resize(floor);
        std::sort(idx.begin(), idx.end());  // keep manifest order within the subset
        for (auto i : idx) out.push_back(train[c].records[i]);
      }
      break;
    }
    case Protocol::ds3: {
      std::array<std::size_t, kNumClasses> have{}, need{};
      bool short_any = false;
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        for (const auto& r : accepted[c].records)
          if (r.source != Source::synthetic_accepted)
            throw DataError("accepted export holds a record that is not synthetic-accepted: " + r.path);
        have[c] = accepted[c].records.size();
        need[c] = plan.target > train[c].records.size() ? plan.target - train[c].records.size() : 0;
        short_any = short_any || have[c] < need[c];
      }
      if (short_any && !allow_deficit) throw DataError(deficit_table(have, need, "accepted synthetic images"));
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        out.insert(out.end(), train[c].records.begin(), train[c].records.end());
        auto syn = accepted[c].records;
        Rng rng(mix_seed(seed, 0x300 + c));
        shuffle(syn.begin(), syn.end(), rng);
        syn.resize(std::min(syn.size(), need[c]));
        out.insert(out.end(), syn.begin(), syn.end());
      }
      Rng rng(mix_seed(seed, 0x3FF));
      shuffle(out.begin(), out.end(), rng);
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Study

struct RepeatOutcome {
  std::vector<double> curve;  // validation accuracy per iteration, percent
  ClassAccuracy test;
};

/// Trains on `train` (validating on `val`) and evaluates on `test`.
using TrainFn = std::function<RepeatOutcome(const ImageSet& train, const ImageSet& val, const ImageSet& test,
                                            std::uint64_t seed)>;

inline TrainFn classifier_trainer(ClassifierConfig cfg) {
  return [cfg](const ImageSet& train, const ImageSet& val, const ImageSet& test, std::uint64_t seed) {
    Rng rng(seed);
    Classifier model(cfg, rng);
    auto res = train_classifier(model, train, val, rng);
    return RepeatOutcome{res.val_accuracy, evaluate_per_class(model, test)};
  };
}

struct ProtocolResult {
  std::vector<std::uint64_t> seeds;
  std::vector<RepeatOutcome> repeats;
  ClassCounts train_counts{};  // of the first repeat
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and sample standard deviation (n-1; zero for a single value).
inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean_std: no values");
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  if (v.size() == 1) return {mean, 0.0};
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(v.size() - 1))};
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: no values");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ExperimentReport {
  std::vector<Protocol> protocols;
  std::map<Protocol, ProtocolResult> results;
  std::string config_lock;
  std::string val_checksum;
  std::string test_checksum;

  bool has(Protocol p) const {
    auto it = results.find(p);
    return it != results.end() && !it->second.repeats.empty();
  }

  /// Over repeats; absent when the class is missing from the test set.
  std::optional<MeanStd> class_stat(Protocol p, ClassLabel c) const {
    std::vector<double> v;
    for (const auto& rep : results.at(p).repeats)
      if (const auto& a = rep.test.per_class[static_cast<std::size_t>(c)]) v.push_back(*a);
    if (v.empty()) return std::nullopt;
    return mean_std(v);
  }

  MeanStd total_stat(Protocol p) const {
    std::vector<double> v;
    for (const auto& rep : results.at(p).repeats) v.push_back(rep.test.total);
    return mean_std(v);
  }
};

/// Table rows in the published order.
inline constexpr std::array<ClassLabel, kNumClasses> kTableOrder{
    ClassLabel::Cardiomegaly, ClassLabel::Normal, ClassLabel::PleuralEffusion, ClassLabel::PulmonaryEdema,
    ClassLabel::Pneumothorax};

inline std::string format2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string render_table(const ExperimentReport& r) {
  std::vector<Protocol> cols;
  std::string notes;
  for (auto p : r.protocols) {
    if (r.has(p))
      cols.push_back(p);
    else
      notes += "note: " + std::string(protocol_name(p)) + " omitted, no completed repeats\n";
  }
  auto pad = [](std::string s, std::size_t w) {
    std::size_t visible = 0;  // UTF-8 code points, so "±" counts once
    for (unsigned char ch : s) visible += (ch & 0xC0) != 0x80;
    if (visible < w) s += std::string(w - visible, ' ');
    return s;
  };
  std::string out = pad("Class", 18);
  for (auto p : cols) {
    std::string h(protocol_name(p));
    for (auto& ch : h) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    out += pad(h, 14);
  }
  out += "\n";
  for (auto c : kTableOrder) {
    out += pad(std::string(display_name(c)), 18);
    for (auto p : cols) {
      const auto s = r.class_stat(p, c);
      out += pad(s ? format_mean_std(s->mean, s->std) : "absent", 14);
    }
    out += "\n";
  }
  out += pad("Total", 18);
  for (auto p : cols) {
    const auto s = r.total_stat(p);
    out += pad(format_mean_std(s.mean, s.std), 14);
  }
  out += "\n";
  return out + notes;
}

inline std::string render_csv(const ExperimentReport& r) {
  std::string out = "protocol,class,accuracy,std\n";
  for (auto p : r.protocols) {
    if (!r.has(p)) continue;
    const std::string pn(protocol_name(p));
    for (auto c : kTableOrder)
      if (const auto s = r.class_stat(p, c))
        out += pn + "," + std::string(name(c)) + "," + format2(s->mean) + "," + format2(s->std) + "\n";
    const auto t = r.total_stat(p);
    out += pn + ",Total," + format2(t.mean) + "," + format2(t.std) + "\n";
  }
  return out;
}

/// One row per iteration of the longest repeat; a repeat that stopped early
/// holds its last value.
inline std::string render_curve_csv(const ProtocolResult& r) {
  std::size_t len = 0;
  for (const auto& rep : r.repeats) len = std::max(len, rep.curve.size());
  std::string out = "iteration,mean_accuracy,std\n";
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> v;
    for (const auto& rep : r.repeats)
      if (!rep.curve.empty()) v.push_back(rep.curve[std::min(i, rep.curve.size() - 1)]);
    const auto s = mean_std(v);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu,%.4f,%.4f\n", i + 1, s.mean, s.std);
    out += buf;
  }
  return out;
}

struct CurvePoint {
  std::size_t iteration = 0;
  double mean = 0.0;
  double std = 0.0;
};

inline std::vector<CurvePoint> parse_curve_csv(const std::string& text) {
  std::vector<CurvePoint> out;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "iteration,mean_accuracy,std") throw DataError("curve csv: unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = split_list(line);
    if (cols.size() != 3) throw DataError("curve csv: expected 3 columns");
    out.push_back({static_cast<std::size_t>(std::stoull(cols[0])), std::stod(cols[1]), std::stod(cols[2])});
  }
  return out;
}

inline void write_report(const ExperimentReport& r, const std::filesystem::path& dir) {
  write_text(dir / "report.csv", render_csv(r));
  write_text(dir / "report.txt", render_table(r) + "\nval checksum " + r.val_checksum + ", test checksum " +
                                     r.test_checksum + "\n");
  for (auto p : r.protocols)
    if (r.has(p))
      write_text(dir / ("curves_" + std::string(protocol_name(p)) + ".csv"), render_curve_csv(r.results.at(p)));
}

inline std::string image_set_checksum(const ImageSet& s) {
  std::vector<std::uint8_t> bytes(s.pixels);
  for (int l : s.labels) bytes.push_back(static_cast<std::uint8_t>(l));
  return hex32(crc32_of(bytes));
}

/// Decoded images keyed by manifest path, each loaded once.
class ImagePool {
 public:
  explicit ImagePool(std::size_t side) : images_{side, {}, {}} {}

  void add(const std::filesystem::path& root, const DatasetManifest& m) {
    std::vector<ImageRecord> fresh;
    for (const auto& r : flatten(m))
      if (!index_.count(r.path)) fresh.push_back(r);
    const auto loaded = load_images(root, fresh, images_.side);
    for (std::size_t i = 0; i < fresh.size(); ++i) {
      index_.emplace(fresh[i].path, images_.size());
      images_.add(loaded.image(i), loaded.labels[i]);
    }
  }

  ImageSet gather(const std::vector<ImageRecord>& records) const {
    std::vector<std::size_t> idx;
    idx.reserve(records.size());
    for (const auto& r : records) {
      auto it = index_.find(r.path);
      if (it == index_.end()) throw DataError("image not loaded: " + r.path);
      idx.push_back(it->second);
    }
    return images_.subset(idx);
  }

  std::size_t size() const { return images_.size(); }

 private:
  ImageSet images_;
  std::map<std::string, std::size_t> index_;
};

struct StudyInputs {
  DatasetManifest train;     // real training images
  DatasetManifest accepted;  // accepted synthetic images
  BalancePlan plan;
  ImageSet val;
  ImageSet test;
  const ImagePool* pool = nullptr;
};

/// Seed of repeat `r`. Every protocol in a repeat shares it, so protocols are
/// compared from identical classifier initializations.
inline std::uint64_t repeat_seed(std::uint64_t study_seed, std::size_t r) { return mix_seed(study_seed, 0x5EED + r); }

/// Runs every protocol x repeat. Each completed repeat is appended to
/// <out_dir>/repeats.csv before the next starts, so a failure leaves the
/// finished ones on disk.
inline ExperimentReport run_study(const StudyInputs& in, const StudyConfig& cfg, const TrainFn& train_fn,
                                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                  const std::function<void(const std::string&)>& log = {}) {
  if (!in.pool) throw std::invalid_argument("run_study: no image pool");
  ExperimentReport report;
  report.protocols = cfg.protocols;
  report.config_lock = cfg.lock();
  report.val_checksum = image_set_checksum(in.val);
  report.test_checksum = image_set_checksum(in.test);
  std::string partial = "protocol,repeat,seed,class,accuracy\n";
  if (out_dir) {
    write_text(*out_dir / "config.lock", report.config_lock);
    write_text(*out_dir / "repeats.csv", partial);
  }
  for (std::size_t r = 0; r < cfg.repeats; ++r) {
    const auto seed = repeat_seed(cfg.seed, r);
    for (auto p : cfg.protocols) {
      const auto records = assemble(p, in.train, in.plan, in.accepted, seed, cfg.allow_deficit);
      const auto train_set = in.pool->gather(records);
      const std::string pn(protocol_name(p));
      if (log) {
        std::string counts;
        for (auto v : counts_of(records)) counts += (counts.empty() ? "" : "/") + std::to_string(v);
        log("repeat " + std::to_string(r + 1) + "/" + std::to_string(cfg.repeats) + " " + pn + " train " + counts);
      }
      auto outcome = train_fn(train_set, in.val, in.test, seed);
      if (image_set_checksum(in.val) != report.val_checksum || image_set_checksum(in.test) != report.test_checksum)
        throw std::logic_error("validation or test set changed during the study");
      auto& res = report.results[p];
      if (res.repeats.empty()) res.train_counts = counts_of(records);
      res.seeds.push_back(seed);
      res.repeats.push_back(outcome);
      const std::string head = pn + "," + std::to_string(r) + "," + std::to_string(seed) + ",";
      for (auto c : kTableOrder)
        if (const auto& a = outcome.test.per_class[static_cast<std::size_t>(c)])
          partial += head + std::string(name(c)) + "," + format2(*a) + "\n";
      partial += head + "Total," + format2(outcome.test.total) + "\n";
      if (out_dir) write_text(*out_dir / "repeats.csv", partial);
      if (log) log("  test total " + format2(outcome.test.total));
    }
  }
  if (out_dir) write_report(report, *out_dir);
  return report;
}

// ---------------------------------------------------------------------------
// End-to-end desk pipeline

/// Generates the procedural dataset under `data_root` unless a manifest is
/// already there, and writes manifest.tsv.
inline DatasetManifest ensure_desk_dataset(const StudyConfig& cfg, const std::filesystem::path& data_root) {
  const auto manifest_path = data_root / "manifest.tsv";
  if (std::filesystem::exists(manifest_path)) return parse_manifest(read_text(manifest_path));
  const auto images = generate_desk_images(cfg.class_counts, cfg.image_size, cfg.data_seed);
  (void)write_image_set(data_root, images, Source::real);
  auto scanned = scan_dataset(data_root);
  if (!scanned.skipped.empty()) throw DataError("generated dataset has unreadable files");
  write_text(manifest_path, serialize_manifest(scanned.manifest));
  return scanned.manifest;
}

/// Splits the manifest; writes the split index files and the balance plan.
inline std::pair<Splits, BalancePlan> plan_study(const StudyConfig& cfg, const DatasetManifest& manifest,
                                                 const std::filesystem::path& out_dir) {
  auto splits = make_splits(manifest, {cfg.val_per_class, cfg.test_per_class, cfg.split_seed});
  auto plan = plan_balance(splits.train, cfg.balance_multiplier);
  write_text(out_dir / "split_train.txt", serialize_indices(split_indices(manifest, splits.train)));
  write_text(out_dir / "split_val.txt", serialize_indices(split_indices(manifest, splits.val)));
  write_text(out_dir / "split_test.txt", serialize_indices(split_indices(manifest, splits.test)));
  write_text(out_dir / "plan.csv", serialize_plan(plan));
  return {std::move(splits), std::move(plan)};
}

/// Trains one class's GAN on a pool of exactly gan_images_per_class real
/// training images: a random subset of a larger class, or a smaller class
/// repeated. Every class gets the same number of steps per pass.
inline std::pair<Generator, GanTrainingResult> train_class_gan(const StudyConfig& cfg, const ImageSet& class_images,
                                                               ClassLabel label) {
  if (class_images.size() == 0) throw std::invalid_argument("train_class_gan: no images for " + std::string(name(label)));
  Rng rng(mix_seed(cfg.gan_seed, 0x600 + static_cast<std::uint64_t>(code(label))));
  std::vector<std::size_t> perm(class_images.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> idx(cfg.gan_images_per_class);
  for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = perm[k % perm.size()];
  std::sort(idx.begin(), idx.end());
  const auto data = to_tensor(class_images, idx, PixelScale::symmetric);
  Generator g(cfg.gan, rng);
  Discriminator d(cfg.gan, rng);
  auto result = train_gan(g, d, data, cfg.gan, rng);
  return {std::move(g), std::move(result)};
}

/// `count` images from a trained generator, quantized to 8 bits.
inline ImageSet sample_generator(Generator& g, ClassLabel label, std::size_t count, std::uint64_t seed,
                                 std::size_t chunk = 128) {
  const auto& cfg = g.config();
  ImageSet out{cfg.output_size, {}, {}};
  Rng rng(seed);
  std::vector<std::uint8_t> px(cfg.output_size * cfg.output_size);
  for (std::size_t done = 0; done < count;) {
    const std::size_t n = std::min(chunk, count - done);
    const auto imgs = generate(sample_noise(n, cfg.z_dim, rng), g);
    for (std::size_t i = 0; i < n; ++i) {
      const auto src = imgs.data().subspan(i * px.size(), px.size());
      for (std::size_t k = 0; k < px.size(); ++k) px[k] = quantize_symmetric(src[k]);
      out.add(px, code(label));
    }
    done += n;
  }
  return out;
}

inline std::string loss_history_csv(const GanTrainingResult& r) {
  std::string out = "step,loss_d,loss_g,minimax\n";
  for (std::size_t i = 0; i < r.history.size(); ++i) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f\n", i + 1, r.history[i].loss_d, r.history[i].loss_g,
                  r.history[i].minimax);
    out += buf;
  }
  return out;
}

/// Full desk pipeline under `run_dir`: dataset, splits and plan, one GAN per
/// class, curation of the generated images (auto-accepted when configured),
/// then the protocol study. GAN work already in the curation store is kept.
inline ExperimentReport run_pipeline(const StudyConfig& cfg, const std::filesystem::path& run_dir_arg,
                                     const TrainFn& train_fn, const std::function<void(const std::string&)>& log = {}) {
  namespace fs = std::filesystem;
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  fs::create_directories(run_dir_arg);
  const auto run_dir = fs::absolute(run_dir_arg);
  write_text(run_dir / "config.lock", cfg.lock());
  const auto data_root = run_dir / "data";
  const auto manifest = ensure_desk_dataset(cfg, data_root);
  auto [splits, plan] = plan_study(cfg, manifest, run_dir);

  ImagePool pool(cfg.image_size);
  pool.add(data_root, splits.train);
  const auto val = load_images(data_root, splits.val, cfg.image_size);
  const auto test = load_images(data_root, splits.test, cfg.image_size);

  // Synthetic images reach the study only through the curation store.
  CurationStore store(run_dir / "curation" / "verdicts.jsonl");
  store.set_auto_accept(cfg.auto_accept);
  const auto staged = run_dir / "curation" / "images";
  for (auto c : kAllClasses) {
    const auto ci = static_cast<std::size_t>(c);
    const std::size_t have = store.stats().per_class[ci].total();
    if (have >= plan.quota[ci]) continue;
    const auto t0 = std::chrono::steady_clock::now();
    auto [g, result] = train_class_gan(cfg, pool.gather(splits.train[ci].records), c);
    const std::string cname(name(c));
    save_checkpoint(run_dir / "gan" / (cname + ".gbck"), g.state());
    write_text(run_dir / "gan" / (cname + "_losses.csv"), loss_history_csv(result));
    const auto images = sample_generator(g, c, plan.quota[ci] - have, mix_seed(cfg.gan_seed, 0x700 + ci));
    store.enqueue(stage_generated(staged, images, cname + "-" + std::to_string(have) + "-", cname + ".gbck",
                                  static_cast<std::int64_t>(ci + 1)));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    say("gan " + cname + ": " + std::to_string(result.history.size()) + " steps, " +
        std::to_string(images.size()) + " images, " + std::to_string(static_cast<long>(secs)) + " s");
  }
  const auto accepted = store.export_all_accepted();
  write_text(run_dir / "accepted.tsv", serialize_manifest(accepted));
  pool.add(data_root, accepted);

  const StudyInputs in{splits.train, accepted, plan, val, test, &pool};
  return run_study(in, cfg, train_fn, run_dir, log);
}

}  // namespace ganbalance
