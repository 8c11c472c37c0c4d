#pragma once

// GBCK checkpoint files: named float32 tensors, little-endian throughout.
//
//   "GBCK" | u32 version | u32 count |
//   count x ( u32 name_len | name bytes | u32 rank | rank x u32 extent | f32 data... )

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ganbalance/tensor.hpp"

namespace ganbalance {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using NamedTensors = std::vector<NamedTensor>;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors) {
  std::vector<std::uint8_t> out{'G', 'B', 'C', 'K'};
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  if (in.text(4) != "GBCK") throw CheckpointError("not a GBCK checkpoint (bad magic)");
  const auto version = in.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported GBCK version " + std::to_string(version));
  const auto count = in.u32();
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.text(in.u32());
    Shape shape(in.u32());
    for (auto& e : shape) e = in.u32();
    std::vector<float> data(numel(shape));
    for (auto& v : data) v = std::bit_cast<float>(in.u32());
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (!in.done()) throw CheckpointError("trailing bytes after last tensor");
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("write failed: " + path.string());
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ganbalance
