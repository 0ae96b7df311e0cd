#pragma once

// Grayscale intensity images and the three on-disk formats the tools use:
// binary PGM (P5), 8-bit grayscale PNG, and DCF32 for real-valued images.
//
// DCF32 layout (little-endian): "DCF32\0\0\0", uint32 height, uint32 width,
// then height*width float32 values row-major.

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <vector>

#include "decompress/errors.hpp"

namespace decompress {

/// Real-valued grayscale image on the [0, 255] intensity scale (values may
/// leave that range, e.g. unclipped noisy images).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w, fill) {}

  float& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  float at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  std::size_t size() const { return pixels.size(); }

  Image crop(std::size_t top, std::size_t left, std::size_t h, std::size_t w) const {
    if (top + h > height || left + w > width) throw GeometryError("crop outside image");
    Image out(h, w);
    for (std::size_t r = 0; r < h; ++r)
      std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>((top + r) * width + left), w,
                  out.pixels.begin() + static_cast<std::ptrdiff_t>(r * w));
    return out;
  }

  bool operator==(const Image&) const = default;
};

inline std::uint8_t to_u8(float v) {
  const float r = std::round(std::clamp(v, 0.0f, 255.0f));
  return static_cast<std::uint8_t>(r);
}

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline void put_f32le(std::vector<std::uint8_t>& out, float v) {
  put_u32le(out, std::bit_cast<std::uint32_t>(v));
}

inline float get_f32le(const std::uint8_t* p) { return std::bit_cast<float>(get_u32le(p)); }

}  // namespace detail

// --- PGM -------------------------------------------------------------------

inline Image decode_pgm(const std::vector<std::uint8_t>& bytes, const std::string& name = "<pgm>") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_space();
    std::size_t v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw FormatError(name + ": malformed PGM header at offset " + std::to_string(pos));
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError(name + ": not a binary PGM (P5)");
  pos = 2;
  const std::size_t w = read_int(), h = read_int(), maxval = read_int();
  if (maxval == 0 || maxval > 255) throw FormatError(name + ": only 8-bit PGM is supported");
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + w * h) {
    throw FormatError(name + ": truncated PGM, need " + std::to_string(w * h) + " pixel bytes at offset " +
                      std::to_string(pos) + ", have " + std::to_string(bytes.size() - std::min(pos, bytes.size())));
  }
  Image img(h, w);
  const float rescale = 255.0f / static_cast<float>(maxval);
  for (std::size_t i = 0; i < w * h; ++i) img.pixels[i] = static_cast<float>(bytes[pos + i]) * (maxval == 255 ? 1.0f : rescale);
  return img;
}

inline std::vector<std::uint8_t> encode_pgm(const Image& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.size());
  for (float v : img.pixels) out.push_back(to_u8(v));
  return out;
}

// --- PNG -------------------------------------------------------------------

inline Image read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  const std::vector<std::uint8_t> bytes = detail::read_file(path);
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError(path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError(path.string() + ": " + msg);
  }
  Image img(image.height, image.width);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = buffer[i];
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) buffer[i] = to_u8(img.pixels[i]);
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError(path.string() + ": " + image.message);
  }
}

// --- DCF32 -----------------------------------------------------------------

inline constexpr std::array<std::uint8_t, 8> kDcf32Magic{'D', 'C', 'F', '3', '2', 0, 0, 0};

inline std::vector<std::uint8_t> encode_dcf32(const Image& img) {
  std::vector<std::uint8_t> out(kDcf32Magic.begin(), kDcf32Magic.end());
  detail::put_u32le(out, static_cast<std::uint32_t>(img.height));
  detail::put_u32le(out, static_cast<std::uint32_t>(img.width));
  out.reserve(16 + 4 * img.size());
  for (float v : img.pixels) detail::put_f32le(out, v);
  return out;
}

inline Image decode_dcf32(const std::vector<std::uint8_t>& bytes, const std::string& name = "<dcf32>") {
  if (bytes.size() < 16) {
    throw FormatError(name + ": truncated DCF32 header, need 16 bytes at offset 0, have " +
                      std::to_string(bytes.size()));
  }
  if (!std::equal(kDcf32Magic.begin(), kDcf32Magic.end(), bytes.begin())) {
    throw FormatError(name + ": bad DCF32 magic at offset 0");
  }
  const std::size_t h = detail::get_u32le(bytes.data() + 8), w = detail::get_u32le(bytes.data() + 12);
  const std::size_t need = 16 + 4 * h * w;
  if (bytes.size() < need) {
    throw FormatError(name + ": truncated DCF32 payload at offset " + std::to_string(bytes.size()) +
                      ", missing " + std::to_string(need - bytes.size()) + " bytes");
  }
  Image img(h, w);
  for (std::size_t i = 0; i < h * w; ++i) img.pixels[i] = detail::get_f32le(bytes.data() + 16 + 4 * i);
  return img;
}

// --- Dispatch by content/extension -------------------------------------------

enum class ImageFormat { Pgm, Png, Dcf32 };

inline ImageFormat format_from_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (ext == ".pgm") return ImageFormat::Pgm;
  if (ext == ".png") return ImageFormat::Png;
  if (ext == ".dcf32" || ext == ".dcf") return ImageFormat::Dcf32;
  throw IoError("unsupported image extension '" + ext + "' for " + path.string());
}

inline bool is_image_path(const std::filesystem::path& path) {
  try {
    format_from_extension(path);
    return true;
  } catch (const IoError&) {
    return false;
  }
}

/// Reads any supported image; the format is detected from the leading bytes.
inline Image read_image(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = detail::read_file(path);
  if (bytes.size() >= 8 && std::equal(kDcf32Magic.begin(), kDcf32Magic.end(), bytes.begin()))
    return decode_dcf32(bytes, path.string());
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return decode_pgm(bytes, path.string());
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G')
    return read_png(path);
  throw FormatError(path.string() + ": unrecognized image format");
}

/// Writes by extension; PGM/PNG round and clip to 8 bits.
inline void write_image(const std::filesystem::path& path, const Image& img) {
  switch (format_from_extension(path)) {
    case ImageFormat::Pgm:
      detail::write_file(path, encode_pgm(img));
      break;
    case ImageFormat::Png:
      write_png(path, img);
      break;
    case ImageFormat::Dcf32:
      detail::write_file(path, encode_dcf32(img));
      break;
  }
}

}  // namespace decompress
