#pragma once

// Review queue for generated images. Every state change is one JSON line in
// an append-only log; opening a store replays the log, so the log alone is
// the durable state.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ganbalance/dataset.hpp"
#include "ganbalance/image_io.hpp"
#include "ganbalance/labels.hpp"

namespace ganbalance {

enum class SampleStatus { pending, accepted, rejected };
enum class Decision { accept, reject };

inline std::string_view status_name(SampleStatus s) {
  switch (s) {
    case SampleStatus::pending: return "pending";
    case SampleStatus::accepted: return "accepted";
    case SampleStatus::rejected: return "rejected";
  }
  return "pending";
}

inline std::string_view decision_name(Decision d) { return d == Decision::accept ? "accept" : "reject"; }

inline std::optional<Decision> parse_decision(std::string_view s) {
  if (s == "accept") return Decision::accept;
  if (s == "reject") return Decision::reject;
  return std::nullopt;
}

struct GeneratedSample {
  std::string id;
  ClassLabel label = ClassLabel::Normal;
  std::string png_path;
  std::string checkpoint_id;
  std::int64_t created_at = 0;  // ms since epoch
  std::string checksum;         // CRC-32 of the PNG bytes
  SampleStatus status = SampleStatus::pending;

  bool operator==(const GeneratedSample&) const = default;
};

struct Verdict {
  std::string sample_id;
  Decision decision = Decision::accept;
  std::string reviewer;
  std::int64_t decided_at = 0;

  bool operator==(const Verdict&) const = default;
};

struct StatusCounts {
  std::size_t pending = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t total() const { return pending + accepted + rejected; }
  bool operator==(const StatusCounts&) const = default;
};

struct CurationStats {
  std::array<StatusCounts, kNumClasses> per_class{};
  StatusCounts total() const {
    StatusCounts t;
    for (const auto& c : per_class) {
      t.pending += c.pending;
      t.accepted += c.accepted;
      t.rejected += c.rejected;
    }
    return t;
  }
};

class CurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class NotFound : public CurationError {
 public:
  using CurationError::CurationError;
};
class Conflict : public CurationError {
 public:
  using CurationError::CurationError;
};

inline std::int64_t now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

inline nlohmann::json to_json(const GeneratedSample& s) {
  return {{"id", s.id},
          {"class", std::string(name(s.label))},
          {"path", s.png_path},
          {"checkpoint", s.checkpoint_id},
          {"created_at", s.created_at},
          {"checksum", s.checksum},
          {"status", std::string(status_name(s.status))}};
}

inline GeneratedSample sample_from_json(const nlohmann::json& j) {
  GeneratedSample s;
  s.id = j.at("id").get<std::string>();
  const auto label = parse_label(j.at("class").get<std::string>());
  if (!label) throw CurationError("unknown class in sample " + s.id);
  s.label = *label;
  s.png_path = j.at("path").get<std::string>();
  s.checkpoint_id = j.value("checkpoint", "");
  s.created_at = j.value("created_at", std::int64_t{0});
  s.checksum = j.value("checksum", "");
  return s;
}

class CurationStore {
 public:
  /// Memory-only store (no log).
  CurationStore() = default;

  /// Opens (creating if needed) the log at `log_path` and replays it. A final
  /// line without a newline is a torn write and is ignored; any other invalid
  /// line is an error.
  explicit CurationStore(std::filesystem::path log_path) : log_path_(std::move(log_path)) {
    if (log_path_->has_parent_path()) std::filesystem::create_directories(log_path_->parent_path());
    if (std::filesystem::exists(*log_path_)) {
      const std::string text = read_text(*log_path_);
      std::size_t start = 0, lineno = 0;
      while (start < text.size()) {
        const auto nl = text.find('\n', start);
        ++lineno;
        if (nl == std::string::npos) {
          replayed_torn_ = true;
          break;
        }
        const std::string line = text.substr(start, nl - start);
        start = nl + 1;
        if (line.empty()) continue;
        try {
          apply(nlohmann::json::parse(line));
        } catch (const std::exception& e) {
          throw CurationError("curation log line " + std::to_string(lineno) + ": " + e.what());
        }
      }
      if (replayed_torn_) {
        // Drop the torn fragment so later appends start on a fresh line.
        write_text(*log_path_, text.substr(0, start));
      }
    }
  }

  CurationStore(const CurationStore&) = delete;
  CurationStore& operator=(const CurationStore&) = delete;

  /// Accept every sample on arrival, recording a verdict by `reviewer`.
  void set_auto_accept(bool on, std::string reviewer = "auto-accept") {
    std::lock_guard lock(mu_);
    auto_accept_ = on;
    auto_reviewer_ = std::move(reviewer);
  }

  /// Queues the batch as pending. Any id already present (or repeated within
  /// the batch) rejects the whole batch.
  std::size_t enqueue(std::vector<GeneratedSample> samples) {
    if (samples.empty()) return 0;
    std::lock_guard lock(mu_);
    std::map<std::string, int> seen;
    for (auto& s : samples) {
      if (s.id.empty()) throw CurationError("sample id must be non-empty");
      if (index_.count(s.id) || seen[s.id]++) throw Conflict("duplicate sample id: " + s.id);
      s.status = SampleStatus::pending;
      if (s.created_at == 0) s.created_at = now_ms();
    }
    nlohmann::json ev{{"type", "enqueue"}, {"samples", nlohmann::json::array()}};
    for (const auto& s : samples) ev["samples"].push_back(to_json(s));
    commit(ev);
    if (auto_accept_) {
      for (const auto& s : samples) {
        nlohmann::json v{{"type", "verdict"},
                         {"id", s.id},
                         {"decision", "accept"},
                         {"reviewer", auto_reviewer_},
                         {"decided_at", now_ms()}};
        commit(v);
      }
    }
    return samples.size();
  }

  /// Pending samples ordered by (created_at, enqueue order), optionally of one
  /// class, starting strictly after the sample `after`.
  std::vector<GeneratedSample> list_pending(std::optional<ClassLabel> label = std::nullopt,
                                            std::size_t limit = SIZE_MAX,
                                            const std::optional<std::string>& after = std::nullopt) const {
    std::lock_guard lock(mu_);
    std::size_t begin = 0;
    if (after) {
      auto it = index_.find(*after);
      if (it == index_.end()) throw NotFound("unknown cursor id: " + *after);
      const auto key = order_key(it->second);
      begin = static_cast<std::size_t>(
          std::upper_bound(ordered_.begin(), ordered_.end(), key,
                           [&](const auto& k, std::size_t i) { return k < order_key(i); }) -
          ordered_.begin());
    }
    std::vector<GeneratedSample> out;
    for (std::size_t k = begin; k < ordered_.size() && out.size() < limit; ++k) {
      const auto& s = samples_[ordered_[k]];
      if (s.status == SampleStatus::pending && (!label || s.label == *label)) out.push_back(s);
    }
    return out;
  }

  std::optional<GeneratedSample> find(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return samples_[it->second];
  }

  /// Records the single verdict for a pending sample.
  GeneratedSample post_verdict(const std::string& id, Decision decision, const std::string& reviewer,
                               std::int64_t decided_at = 0) {
    std::lock_guard lock(mu_);
    auto it = index_.find(id);
    if (it == index_.end()) throw NotFound("unknown sample: " + id);
    if (samples_[it->second].status != SampleStatus::pending)
      throw Conflict("sample " + id + " already " + std::string(status_name(samples_[it->second].status)));
    commit({{"type", "verdict"},
            {"id", id},
            {"decision", std::string(decision_name(decision))},
            {"reviewer", reviewer},
            {"decided_at", decided_at ? decided_at : now_ms()}});
    return samples_[it->second];
  }

  /// Accepted samples of one class as manifest records, in queue order.
  std::vector<ImageRecord> export_accepted(ClassLabel label) const {
    std::lock_guard lock(mu_);
    std::vector<ImageRecord> out;
    for (auto i : ordered_) {
      const auto& s = samples_[i];
      if (s.label == label && s.status == SampleStatus::accepted)
        out.push_back({s.png_path, s.label, Source::synthetic_accepted, s.checksum});
    }
    return out;
  }

  DatasetManifest export_all_accepted() const {
    auto m = empty_manifest();
    for (auto c : kAllClasses) m[static_cast<std::size_t>(c)].records = export_accepted(c);
    return m;
  }

  CurationStats stats() const {
    std::lock_guard lock(mu_);
    CurationStats st;
    for (const auto& s : samples_) {
      auto& c = st.per_class[static_cast<std::size_t>(s.label)];
      (s.status == SampleStatus::pending ? c.pending : s.status == SampleStatus::accepted ? c.accepted : c.rejected)++;
    }
    return st;
  }

  std::vector<GeneratedSample> samples() const {
    std::lock_guard lock(mu_);
    std::vector<GeneratedSample> out;
    for (auto i : ordered_) out.push_back(samples_[i]);
    return out;
  }

  std::vector<Verdict> verdicts() const {
    std::lock_guard lock(mu_);
    return verdicts_;
  }

  bool replayed_torn_write() const { return replayed_torn_; }

 private:
  std::pair<std::int64_t, std::size_t> order_key(std::size_t i) const { return {samples_[i].created_at, i}; }

  // Validates and applies the event in memory, then appends it to the log.
  void commit(const nlohmann::json& ev) {
    apply(ev);
    if (log_path_) {
      std::ofstream out(*log_path_, std::ios::binary | std::ios::app);
      out << ev.dump() << '\n';
      out.flush();
      if (!out) throw CurationError("cannot append to " + log_path_->string());
    }
  }

  void apply(const nlohmann::json& ev) {
    const auto type = ev.at("type").get<std::string>();
    if (type == "enqueue") {
      std::vector<GeneratedSample> batch;
      for (const auto& j : ev.at("samples")) batch.push_back(sample_from_json(j));
      for (const auto& s : batch)
        if (index_.count(s.id)) throw Conflict("duplicate sample id in log: " + s.id);
      for (auto& s : batch) {
        s.status = SampleStatus::pending;
        const std::size_t i = samples_.size();
        index_.emplace(s.id, i);
        samples_.push_back(std::move(s));
        const auto key = order_key(i);
        auto pos = std::upper_bound(ordered_.begin(), ordered_.end(), key,
                                    [&](const auto& k, std::size_t j) { return k < order_key(j); });
        ordered_.insert(pos, i);
      }
    } else if (type == "verdict") {
      Verdict v;
      v.sample_id = ev.at("id").get<std::string>();
      const auto d = parse_decision(ev.at("decision").get<std::string>());
      if (!d) throw CurationError("bad decision for " + v.sample_id);
      v.decision = *d;
      v.reviewer = ev.value("reviewer", "");
      v.decided_at = ev.value("decided_at", std::int64_t{0});
      auto it = index_.find(v.sample_id);
      if (it == index_.end()) throw NotFound("verdict for unknown sample " + v.sample_id);
      auto& s = samples_[it->second];
      if (s.status != SampleStatus::pending) throw Conflict("second verdict for " + v.sample_id);
      s.status = v.decision == Decision::accept ? SampleStatus::accepted : SampleStatus::rejected;
      verdicts_.push_back(std::move(v));
    } else {
      throw CurationError("unknown event type " + type);
    }
  }

  mutable std::mutex mu_;
  std::optional<std::filesystem::path> log_path_;
  std::vector<GeneratedSample> samples_;
  std::vector<std::size_t> ordered_;  // indices into samples_ by (created_at, seq)
  std::map<std::string, std::size_t> index_;
  std::vector<Verdict> verdicts_;
  bool auto_accept_ = false;
  std::string auto_reviewer_;
  bool replayed_torn_ = false;
};

/// Writes each image as <dir>/<ClassName>/<id>.png and describes it as a
/// pending sample.
inline std::vector<GeneratedSample> stage_generated(const std::filesystem::path& dir, const ImageSet& images,
                                                    const std::string& id_prefix, const std::string& checkpoint_id,
                                                    std::int64_t created_at = 0) {
  std::vector<GeneratedSample> out;
  const std::int64_t base = created_at ? created_at : now_ms();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto label = label_from_code(images.labels[i]);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    const std::string id = id_prefix + buf;
    const auto path = dir / std::string(name(label)) / (id + ".png");
    const auto bytes = encode_gray_png(images.side, images.side, images.image(i));
    write_file_bytes(path, bytes);
    out.push_back({id, label, path.string(), checkpoint_id, base + static_cast<std::int64_t>(i),
                   hex32(crc32_of(bytes)), SampleStatus::pending});
  }
  return out;
}

}  // namespace ganbalance
