#pragma once

// Noise synthesis, PSNR, and denoising by overlapping-patch reconstruction:
// every patch is coded and decoded independently and each pixel takes the
// mean of all reconstructions that cover it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "decompress/codec.hpp"
#include "decompress/image.hpp"
#include "decompress/patches.hpp"
#include "decompress/rng.hpp"

namespace decompress {

inline constexpr double kPsnrCap = 99.0;

struct NoiseSpec {
  double sigma = 0;
  std::uint64_t seed = 0;
};

/// y = x + sigma * z with z ~ N(0, 1) iid, drawn in raster order; unclipped.
inline Image add_awgn(const Image& clean, const NoiseSpec& spec) {
  if (spec.sigma < 0) throw ContractError("noise sigma must be nonnegative");
  Image out = clean;
  Rng rng(spec.seed);
  for (float& v : out.pixels) v = static_cast<float>(static_cast<double>(v) + spec.sigma * rng.normal());
  return out;
}

inline double mse(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError("image shapes differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                         " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
  }
  if (a.size() == 0) throw ContractError("mse of empty images");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// 10 log10(peak^2 / MSE); identical images report kPsnrCap.
inline double psnr(const Image& reference, const Image& test, double peak = 255.0) {
  const double m = mse(reference, test);
  if (m == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m));
}

struct DenoiseOptions {
  std::size_t stride = 1;
  std::size_t threads = 1;
  std::size_t chunk = 256;  // patches per inference batch
};

/// Top-left corners along one axis. With stride > 1 the last window is
/// pinned to the border so every pixel stays covered.
inline std::vector<std::size_t> window_starts(std::size_t extent, std::size_t size, std::size_t stride) {
  const std::size_t n = patch_positions(extent, size, stride);
  std::vector<std::size_t> starts(n);
  for (std::size_t i = 0; i < n; ++i) starts[i] = i * stride;
  if (starts.back() != extent - size) starts.push_back(extent - size);
  return starts;
}

/// How many windows cover each pixel.
inline std::vector<std::uint32_t> coverage_counts(std::size_t height, std::size_t width, std::size_t size,
                                                  std::size_t stride = 1) {
  std::vector<std::uint32_t> count(height * width, 0);
  for (std::size_t r : window_starts(height, size, stride))
    for (std::size_t c : window_starts(width, size, stride))
      for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j) ++count[(r + i) * width + c + j];
  return count;
}

/// Reconstructs `count` patches laid out [count, size*size] into out.
/// `chunk` is the chunk index; calls for distinct chunks may run concurrently.
using PatchReconstructor =
    std::function<void(std::size_t chunk, const float* patches, std::size_t count, float* out)>;

struct AssembledImage {
  Image image;  // averaged, not clamped
  std::size_t patches = 0;
};

/// Overlap-averaged reassembly. Patches are processed in fixed chunks; chunks
/// of one wave may run on different threads but are accumulated strictly in
/// raster order, so the result does not depend on the thread count.
inline AssembledImage assemble_overlapping(const Image& noisy, std::size_t size, const DenoiseOptions& opts,
                                           const PatchReconstructor& reconstruct) {
  if (noisy.height < size || noisy.width < size) {
    throw GeometryError("image " + std::to_string(noisy.height) + "x" + std::to_string(noisy.width) +
                        " smaller than one " + std::to_string(size) + "x" + std::to_string(size) + " patch");
  }
  const auto rows = window_starts(noisy.height, size, opts.stride);
  const auto cols = window_starts(noisy.width, size, opts.stride);
  std::vector<std::pair<std::size_t, std::size_t>> corners;
  corners.reserve(rows.size() * cols.size());
  for (std::size_t r : rows)
    for (std::size_t c : cols) corners.emplace_back(r, c);

  const std::size_t area = size * size;
  const std::size_t chunk = std::max<std::size_t>(1, opts.chunk);
  const std::size_t workers = std::max<std::size_t>(1, opts.threads);
  const std::size_t nchunks = (corners.size() + chunk - 1) / chunk;

  std::vector<double> sum(noisy.size(), 0.0);
  std::vector<std::uint32_t> count(noisy.size(), 0);
  std::vector<std::vector<float>> inputs(workers), outputs(workers);

  auto run_chunk = [&](std::size_t slot, std::size_t ci) {
    const std::size_t begin = ci * chunk, end = std::min(corners.size(), begin + chunk);
    const std::size_t n = end - begin;
    inputs[slot].resize(n * area);
    outputs[slot].resize(n * area);
    float* dst = inputs[slot].data();
    for (std::size_t k = begin; k < end; ++k) {
      const auto [r, c] = corners[k];
      for (std::size_t i = 0; i < size; ++i) {
        const float* src = noisy.pixels.data() + (r + i) * noisy.width + c;
        dst = std::copy_n(src, size, dst);
      }
    }
    reconstruct(ci, inputs[slot].data(), n, outputs[slot].data());
  };

  for (std::size_t wave = 0; wave < nchunks; wave += workers) {
    const std::size_t in_wave = std::min(workers, nchunks - wave);
    if (in_wave == 1) {
      run_chunk(0, wave);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t s = 0; s < in_wave; ++s) pool.emplace_back([&, s] { run_chunk(s, wave + s); });
    }
    for (std::size_t s = 0; s < in_wave; ++s) {
      const std::size_t begin = (wave + s) * chunk, end = std::min(corners.size(), begin + chunk);
      const float* rec = outputs[s].data();
      for (std::size_t k = begin; k < end; ++k) {
        const auto [r, c] = corners[k];
        for (std::size_t i = 0; i < size; ++i)
          for (std::size_t j = 0; j < size; ++j) {
            const std::size_t at = (r + i) * noisy.width + c + j;
            sum[at] += static_cast<double>(*rec++);
            ++count[at];
          }
      }
    }
  }

  AssembledImage out{Image(noisy.height, noisy.width), corners.size()};
  for (std::size_t i = 0; i < sum.size(); ++i)
    out.image.pixels[i] = static_cast<float>(sum[i] / static_cast<double>(count[i]));
  return out;
}

inline Image clamp_intensity(Image img) {
  for (float& v : img.pixels) v = std::clamp(v, 0.0f, 255.0f);
  return img;
}

struct DenoiseResult {
  Image image;                      // clamped to [0, 255]
  double mean_rate_bpp = 0;         // eval-mode rate, averaged over patches
  double mean_patch_distortion = 0; // MSE between each reconstruction and its input patch
  std::size_t patches = 0;
};

/// Runs the codec on every overlapping patch with rounding quantization.
/// Rate and distortion are accumulated per chunk and summed in chunk order.
inline DenoiseResult denoise_detailed(const Image& noisy, const NeuralCodec<float>& codec,
                                      const DenoiseOptions& opts = {}) {
  const std::size_t p = codec.config().patch_size;
  const std::size_t area = p * p;
  const std::size_t total = window_starts(noisy.height, p, opts.stride).size() *
                            window_starts(noisy.width, p, opts.stride).size();
  const std::size_t chunk = std::max<std::size_t>(1, opts.chunk);
  std::vector<std::pair<double, double>> chunk_stats((total + chunk - 1) / chunk);

  auto reconstruct = [&](std::size_t ci, const float* patches, std::size_t n, float* out) {
    NoGradGuard no_grad;
    Tensor<float> y({n, 1, p, p}, std::vector<float>(patches, patches + n * area));
    Rng unused(0);
    const Tensor<float> c_hat = quantize(codec.analyze(y), QuantizerMode::Eval, unused);
    const Tensor<float> y_hat = codec.synthesize(c_hat);
    std::copy(y_hat.data().begin(), y_hat.data().end(), out);

    const Tensor<float> likelihood = pmf(codec.prior(), c_hat);
    const std::size_t per_patch = c_hat.numel() / n;
    double bits = 0, sq = 0;
    for (std::size_t b = 0; b < n; ++b) {
      double patch_bits = 0;
      for (std::size_t i = 0; i < per_patch; ++i)
        patch_bits -= std::log2(static_cast<double>(likelihood[b * per_patch + i]));
      bits += patch_bits / static_cast<double>(area);
      double patch_sq = 0;
      for (std::size_t i = 0; i < area; ++i) {
        const double d = static_cast<double>(out[b * area + i]) - static_cast<double>(patches[b * area + i]);
        patch_sq += d * d;
      }
      sq += patch_sq / static_cast<double>(area);
    }
    chunk_stats[ci] = {bits, sq};
  };

  AssembledImage assembled = assemble_overlapping(noisy, p, opts, reconstruct);
  DenoiseResult result;
  result.image = clamp_intensity(std::move(assembled.image));
  result.patches = assembled.patches;
  double bits = 0, sq = 0;
  for (const auto& [b, s] : chunk_stats) {
    bits += b;
    sq += s;
  }
  result.mean_rate_bpp = bits / static_cast<double>(result.patches);
  result.mean_patch_distortion = sq / static_cast<double>(result.patches);
  return result;
}

inline Image denoise(const Image& noisy, const NeuralCodec<float>& codec, const DenoiseOptions& opts = {}) {
  return denoise_detailed(noisy, codec, opts).image;
}

struct DenoiseReport {
  std::string image_id;
  double sigma = 0;
  double psnr_noisy = 0;
  double psnr_denoised = 0;
  double rate_bpp = 0;
  std::size_t patches = 0;
  double seconds = 0;
};

struct EvaluationResult {
  DenoiseReport report;
  Image denoised;
};

inline EvaluationResult evaluate(const Image& clean, const Image& noisy, const NeuralCodec<float>& codec,
                                 const std::string& image_id, double sigma, const DenoiseOptions& opts = {}) {
  const auto start = std::chrono::steady_clock::now();
  DenoiseResult d = denoise_detailed(noisy, codec, opts);
  EvaluationResult out;
  out.report.image_id = image_id;
  out.report.sigma = sigma;
  out.report.psnr_noisy = psnr(clean, noisy);
  out.report.psnr_denoised = psnr(clean, d.image);
  out.report.rate_bpp = d.mean_rate_bpp;
  out.report.patches = d.patches;
  out.report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.denoised = std::move(d.image);
  return out;
}

}  // namespace decompress
