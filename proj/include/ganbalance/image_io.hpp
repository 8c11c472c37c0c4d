#pragma once

// 8-bit grayscale PNG read/write (libpng simplified API) and CRC-32 file
// checksums (zlib).

#include <png.h>
#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ganbalance {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

namespace detail {

struct PngImage {
  png_image image{};
  PngImage() { image.version = PNG_IMAGE_VERSION; }
  ~PngImage() { png_image_free(&image); }
  PngImage(const PngImage&) = delete;
  PngImage& operator=(const PngImage&) = delete;
};

}  // namespace detail

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Decodes an 8-bit single-channel PNG; anything else is an ImageError.
inline GrayImage decode_gray_png(std::span<const std::uint8_t> bytes, const std::string& what = "image") {
  detail::PngImage png;
  if (!png_image_begin_read_from_memory(&png.image, bytes.data(), bytes.size()))
    throw ImageError(what + ": " + png.image.message);
  if (png.image.format != PNG_FORMAT_GRAY)
    throw ImageError(what + ": not an 8-bit grayscale PNG");
  GrayImage out{png.image.width, png.image.height, {}};
  out.pixels.resize(PNG_IMAGE_SIZE(png.image));
  if (!png_image_finish_read(&png.image, nullptr, out.pixels.data(), 0, nullptr))
    throw ImageError(what + ": " + png.image.message);
  return out;
}

inline GrayImage read_gray_png(const std::filesystem::path& path) {
  return decode_gray_png(read_file_bytes(path), path.string());
}

inline std::vector<std::uint8_t> encode_gray_png(std::size_t width, std::size_t height,
                                                 std::span<const std::uint8_t> pixels) {
  if (pixels.size() != width * height) throw ImageError("encode_gray_png: pixel count does not match extents");
  detail::PngImage png;
  png.image.width = static_cast<png_uint_32>(width);
  png.image.height = static_cast<png_uint_32>(height);
  png.image.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png.image, nullptr, &size, 0, pixels.data(), 0, nullptr))
    throw ImageError(std::string("encode_gray_png: ") + png.image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png.image, out.data(), &size, 0, pixels.data(), 0, nullptr))
    throw ImageError(std::string("encode_gray_png: ") + png.image.message);
  out.resize(size);
  return out;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError("cannot write " + path.string());
}

inline void write_gray_png(const std::filesystem::path& path, std::size_t width, std::size_t height,
                           std::span<const std::uint8_t> pixels) {
  write_file_bytes(path, encode_gray_png(width, height, pixels));
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

}  // namespace ganbalance
