#pragma once

// Multilevel orthonormal 2-D Haar transform and BayesShrink soft-thresholding.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "decompress/errors.hpp"
#include "decompress/image.hpp"

namespace decompress {

struct Plane {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  Plane() = default;
  Plane(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(h * w, fill) {}

  double& at(std::size_t r, std::size_t c) { return data[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * width + c]; }
  std::size_t size() const { return data.size(); }
};

inline Plane to_plane(const Image& img) {
  Plane p(img.height, img.width);
  std::copy(img.pixels.begin(), img.pixels.end(), p.data.begin());
  return p;
}

inline Image to_image(const Plane& p) {
  Image img(p.height, p.width);
  for (std::size_t i = 0; i < p.size(); ++i) img.pixels[i] = static_cast<float>(p.data[i]);
  return img;
}

struct DetailBands {
  Plane lh;  // vertical low-pass, horizontal high-pass
  Plane hl;  // vertical high-pass, horizontal low-pass
  Plane hh;
};

struct WaveletPyramid {
  std::vector<DetailBands> details;  // finest level first
  Plane approximation;               // LL after the last level

  std::size_t levels() const { return details.size(); }
  std::size_t coefficient_count() const {
    std::size_t n = approximation.size();
    for (const auto& d : details) n += d.lh.size() + d.hl.size() + d.hh.size();
    return n;
  }
};

inline WaveletPyramid haar_forward(const Plane& image, std::size_t levels = 3) {
  const std::size_t block = std::size_t{1} << levels;
  if (image.height == 0 || image.width == 0 || image.height % block != 0 || image.width % block != 0) {
    throw GeometryError("Haar transform of " + std::to_string(levels) + " levels needs extents divisible by " +
                        std::to_string(block) + ", got " + std::to_string(image.height) + "x" +
                        std::to_string(image.width));
  }
  WaveletPyramid out;
  Plane ll = image;
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t h = ll.height / 2, w = ll.width / 2;
    Plane a(h, w);
    DetailBands d{Plane(h, w), Plane(h, w), Plane(h, w)};
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const double p00 = ll.at(2 * r, 2 * c), p01 = ll.at(2 * r, 2 * c + 1);
        const double p10 = ll.at(2 * r + 1, 2 * c), p11 = ll.at(2 * r + 1, 2 * c + 1);
        a.at(r, c) = 0.5 * (p00 + p01 + p10 + p11);
        d.lh.at(r, c) = 0.5 * (p00 - p01 + p10 - p11);
        d.hl.at(r, c) = 0.5 * (p00 + p01 - p10 - p11);
        d.hh.at(r, c) = 0.5 * (p00 - p01 - p10 + p11);
      }
    out.details.push_back(std::move(d));
    ll = std::move(a);
  }
  out.approximation = std::move(ll);
  return out;
}

inline Plane haar_inverse(const WaveletPyramid& pyramid) {
  Plane ll = pyramid.approximation;
  for (std::size_t l = pyramid.levels(); l-- > 0;) {
    const DetailBands& d = pyramid.details[l];
    if (d.lh.height != ll.height || d.lh.width != ll.width) {
      throw DimensionError("pyramid level " + std::to_string(l) + " does not match its approximation band");
    }
    Plane up(2 * ll.height, 2 * ll.width);
    for (std::size_t r = 0; r < ll.height; ++r)
      for (std::size_t c = 0; c < ll.width; ++c) {
        const double a = ll.at(r, c), lh = d.lh.at(r, c), hl = d.hl.at(r, c), hh = d.hh.at(r, c);
        up.at(2 * r, 2 * c) = 0.5 * (a + lh + hl + hh);
        up.at(2 * r, 2 * c + 1) = 0.5 * (a - lh + hl - hh);
        up.at(2 * r + 1, 2 * c) = 0.5 * (a + lh - hl - hh);
        up.at(2 * r + 1, 2 * c + 1) = 0.5 * (a - lh - hl + hh);
      }
    ll = std::move(up);
  }
  return ll;
}

/// Mirror-pads the bottom and right edges (edge sample repeated) to the given extents.
inline Plane symmetric_pad(const Plane& in, std::size_t height, std::size_t width) {
  auto reflect = [](std::size_t i, std::size_t n) {
    const std::size_t period = 2 * n;
    i %= period;
    return i < n ? i : period - 1 - i;
  };
  Plane out(height, width);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) out.at(r, c) = in.at(reflect(r, in.height), reflect(c, in.width));
  return out;
}

inline double soft_threshold(double c, double t) {
  const double m = std::abs(c) - t;
  return m > 0 ? std::copysign(m, c) : 0.0;
}

/// BayesShrink threshold for one detail band; the band variance is its
/// second moment (detail coefficients are zero-mean).
inline double bayes_shrink_threshold(const Plane& band, double sigma) {
  double energy = 0, peak = 0;
  for (double c : band.data) {
    energy += c * c;
    peak = std::max(peak, std::abs(c));
  }
  const double variance = energy / static_cast<double>(band.size());
  const double sigma_x = std::sqrt(std::max(variance - sigma * sigma, 0.0));
  if (sigma_x == 0) return peak;
  return sigma * sigma / sigma_x;
}

inline void shrink_band(Plane& band, double sigma) {
  const double t = bayes_shrink_threshold(band, sigma);
  for (double& c : band.data) c = soft_threshold(c, t);
}

inline Plane bayes_shrink_denoise(const Plane& noisy, double sigma, std::size_t levels = 3) {
  if (sigma < 0) throw ContractError("noise sigma must be nonnegative");
  if (noisy.height == 0 || noisy.width == 0) throw GeometryError("empty image");
  const std::size_t block = std::size_t{1} << levels;
  const std::size_t h = (noisy.height + block - 1) / block * block;
  const std::size_t w = (noisy.width + block - 1) / block * block;

  WaveletPyramid pyr = haar_forward(symmetric_pad(noisy, h, w), levels);
  if (sigma > 0) {
    for (auto& d : pyr.details) {
      shrink_band(d.lh, sigma);
      shrink_band(d.hl, sigma);
      shrink_band(d.hh, sigma);
    }
  }
  const Plane full = haar_inverse(pyr);

  Plane out(noisy.height, noisy.width);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c) out.at(r, c) = std::clamp(full.at(r, c), 0.0, 255.0);
  return out;
}

inline Image bayes_shrink_denoise(const Image& noisy, double sigma, std::size_t levels = 3) {
  return to_image(bayes_shrink_denoise(to_plane(noisy), sigma, levels));
}

}  // namespace decompress
