#pragma once

// Tensor blob encoding: uint32 rank, uint32 extents, then float32 values,
// all little-endian, values row-major.

#include <cstdint>
#include <string>
#include <vector>

#include "decompress/image.hpp"
#include "decompress/tensor.hpp"

namespace decompress {

template <typename T>
void append_tensor_blob(std::vector<std::uint8_t>& out, const Tensor<T>& t) {
  detail::put_u32le(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::put_u32le(out, static_cast<std::uint32_t>(e));
  for (T v : t.data()) detail::put_f32le(out, static_cast<float>(v));
}

/// Bounds-checked little-endian reader that reports offsets in its errors.
class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::string name)
      : bytes_(bytes), name_(std::move(name)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void require(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(name_ + ": truncated " + what + " at offset " + std::to_string(pos_) + ": need " +
                        std::to_string(n) + " bytes, " + std::to_string(remaining()) + " available (missing " +
                        std::to_string(n - remaining()) + ")");
    }
  }

  std::uint32_t u32(const char* what) {
    require(4, what);
    const std::uint32_t v = detail::get_u32le(bytes_.data() + pos_);
    pos_ += 4;
    return v;
  }

  std::string bytes_as_string(std::size_t n, const char* what) {
    require(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  template <typename T>
  Tensor<T> tensor(const char* what) {
    const std::uint32_t rank = u32(what);
    if (rank > 8) throw FormatError(name_ + ": implausible tensor rank " + std::to_string(rank) + " at offset " + std::to_string(pos_ - 4));
    Shape shape(rank);
    for (auto& e : shape) e = u32(what);
    const std::size_t n = shape_numel(shape);
    require(4 * n, what);
    std::vector<T> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(detail::get_f32le(bytes_.data() + pos_ + 4 * i));
    pos_ += 4 * n;
    return Tensor<T>(std::move(shape), std::move(data));
  }

  const std::string& name() const { return name_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace decompress
