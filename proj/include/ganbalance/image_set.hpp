#pragma once

// In-memory labelled 8-bit grayscale images of one square size.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ganbalance/labels.hpp"
#include "ganbalance/tensor.hpp"

namespace ganbalance {

enum class PixelScale { unit, symmetric };  // [0,1] or [-1,1]

inline float scale_pixel(std::uint8_t v, PixelScale s) {
  return s == PixelScale::unit ? static_cast<float>(v) / 255.0f : static_cast<float>(v) / 127.5f - 1.0f;
}

/// Inverse of the symmetric scaling, rounded and clamped to 8 bits.
inline std::uint8_t quantize_symmetric(float v) {
  const double x = (static_cast<double>(v) + 1.0) * 127.5;
  if (!(x > 0.0)) return 0;
  if (x >= 255.0) return 255;
  return static_cast<std::uint8_t>(x + 0.5);
}

struct ImageSet {
  std::size_t side = 0;
  std::vector<std::uint8_t> pixels;  // size() * side * side
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return side * side; }

  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * image_bytes(), image_bytes());
  }

  void add(std::span<const std::uint8_t> px, int label) {
    if (px.size() != image_bytes())
      throw std::invalid_argument("image of " + std::to_string(px.size()) + " bytes in a set of side " +
                                  std::to_string(side));
    (void)label_from_code(label);
    pixels.insert(pixels.end(), px.begin(), px.end());
    labels.push_back(label);
  }

  void append(const ImageSet& other) {
    if (other.size() == 0) return;
    if (size() == 0 && side == 0) side = other.side;
    if (other.side != side) throw std::invalid_argument("cannot append images of a different size");
    pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }

  std::array<std::size_t, kNumClasses> class_counts() const {
    std::array<std::size_t, kNumClasses> n{};
    for (int l : labels) ++n[static_cast<std::size_t>(l)];
    return n;
  }

  ImageSet subset(std::span<const std::size_t> indices) const {
    ImageSet out{side, {}, {}};
    out.pixels.reserve(indices.size() * image_bytes());
    for (auto i : indices) out.add(image(i), labels.at(i));
    return out;
  }

  ImageSet of_class(ClassLabel c) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < size(); ++i)
      if (labels[i] == code(c)) idx.push_back(i);
    return subset(idx);
  }
};

/// [n, 1, side, side] batch of the given images.
inline Tensor to_tensor(const ImageSet& set, std::span<const std::size_t> indices, PixelScale scale) {
  if (indices.empty()) throw std::invalid_argument("to_tensor: empty batch");
  Buffer<float> data(indices.size() * set.image_bytes());
  std::size_t o = 0;
  for (auto i : indices)
    for (auto v : set.image(i)) data[o++] = scale_pixel(v, scale);
  return Tensor({indices.size(), 1, set.side, set.side}, std::move(data));
}

inline Tensor to_tensor(const ImageSet& set, PixelScale scale) {
  std::vector<std::size_t> all(set.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return to_tensor(set, all, scale);
}

}  // namespace ganbalance
