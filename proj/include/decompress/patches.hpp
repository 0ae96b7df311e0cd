#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "decompress/image.hpp"
#include "decompress/rng.hpp"

namespace decompress {

/// Number of aligned size x size windows along one axis at the given stride.
inline std::size_t patch_positions(std::size_t extent, std::size_t size, std::size_t stride) {
  if (size == 0 || stride == 0) throw GeometryError("patch size and stride must be positive");
  if (extent < size) {
    throw GeometryError("extent " + std::to_string(extent) + " smaller than patch size " + std::to_string(size));
  }
  return (extent - size) / stride + 1;
}

struct PatchRef {
  std::uint32_t image = 0;
  std::uint32_t row = 0;
  std::uint32_t col = 0;

  bool operator==(const PatchRef&) const = default;
};

/// Overlapping square patches over one or more images, addressed by their
/// top-left corners. Enumeration order is image, then row, then column.
class PatchDataset {
 public:
  PatchDataset(std::vector<Image> images, std::size_t size, std::size_t stride)
      : images_(std::move(images)), size_(size), stride_(stride) {
    if (images_.empty()) throw ContractError("patch dataset needs at least one image");
    for (std::size_t i = 0; i < images_.size(); ++i) {
      const Image& img = images_[i];
      if (img.height < size || img.width < size) {
        throw GeometryError("image " + std::to_string(i) + " (" + std::to_string(img.height) + "x" +
                            std::to_string(img.width) + ") smaller than patch " + std::to_string(size));
      }
      const std::size_t rows = patch_positions(img.height, size, stride);
      const std::size_t cols = patch_positions(img.width, size, stride);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          refs_.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(r * stride),
                           static_cast<std::uint32_t>(c * stride)});
    }
  }

  std::size_t size() const { return refs_.size(); }
  std::size_t patch_size() const { return size_; }
  std::size_t stride() const { return stride_; }
  const std::vector<Image>& images() const { return images_; }
  std::span<const PatchRef> refs() const { return refs_; }

  /// Keeps a uniform random subset of at most max_count patches, preserving
  /// enumeration order among the survivors.
  void subsample(std::size_t max_count, Rng& rng) {
    if (max_count == 0 || max_count >= refs_.size()) return;
    std::vector<std::size_t> idx(refs_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < max_count; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(max_count);
    std::sort(idx.begin(), idx.end());
    std::vector<PatchRef> kept;
    kept.reserve(max_count);
    for (std::size_t i : idx) kept.push_back(refs_[i]);
    refs_ = std::move(kept);
  }

  /// Fisher-Yates with the project Rng (std::shuffle is not portable).
  void shuffle(Rng& rng) {
    for (std::size_t i = refs_.size(); i > 1; --i) std::swap(refs_[i - 1], refs_[rng.below(i)]);
  }

  /// Copies the given patches into out, laid out [n, 1, size, size].
  template <typename T>
  void gather(std::span<const PatchRef> which, T* out) const {
    for (const PatchRef& ref : which) {
      const Image& img = images_[ref.image];
      for (std::size_t r = 0; r < size_; ++r) {
        const float* src = img.pixels.data() + (ref.row + r) * img.width + ref.col;
        for (std::size_t c = 0; c < size_; ++c) *out++ = static_cast<T>(src[c]);
      }
    }
  }

 private:
  std::vector<Image> images_;
  std::size_t size_;
  std::size_t stride_;
  std::vector<PatchRef> refs_;
};

inline PatchDataset extract_patches(const Image& image, std::size_t size = 16, std::size_t stride = 1) {
  return PatchDataset({image}, size, stride);
}

}  // namespace decompress
