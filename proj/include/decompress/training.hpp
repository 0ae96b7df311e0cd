#pragma once

// Rate-distortion objective and the minibatch training loop.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "decompress/adam.hpp"
#include "decompress/codec.hpp"
#include "decompress/entropy_model.hpp"
#include "decompress/patches.hpp"

namespace decompress {

struct LossBreakdown {
  double distortion = 0;  // mean squared error per pixel, intensity scale
  double rate = 0;        // bits per pixel
  double lambda = 0;
  double total = 0;       // distortion + lambda * rate
};

inline LossBreakdown make_breakdown(double distortion, double rate, double lambda) {
  return {distortion, rate, lambda, distortion + lambda * rate};
}

template <typename T>
struct LossTerms {
  Tensor<T> distortion;
  Tensor<T> rate;
  Tensor<T> total;
  double lambda = 0;

  LossBreakdown values() const {
    return make_breakdown(static_cast<double>(distortion.item()), static_cast<double>(rate.item()), lambda);
  }
};

namespace detail {

template <typename T>
LossTerms<T> rd_loss_from_latent(const Tensor<T>& y, const NeuralCodec<T>& codec, double lambda,
                                 const Tensor<T>& c_tilde) {
  const Tensor<T> y_hat = codec.synthesize(c_tilde);
  LossTerms<T> terms;
  terms.lambda = lambda;
  terms.distortion = reduce_mean(square(sub(y_hat, y)));
  terms.rate = rate_bits_per_pixel(codec.prior(), c_tilde, codec.config().pixels_per_patch());
  terms.total = add(terms.distortion, scale(terms.rate, static_cast<T>(lambda)));
  return terms;
}

}  // namespace detail

/// D + lambda * R for a batch of patches y [B, 1, P, P].
template <typename T>
LossTerms<T> rd_loss(const Tensor<T>& y, const NeuralCodec<T>& codec, double lambda, QuantizerMode mode,
                     Rng& rng) {
  const Tensor<T> c = codec.analyze(y);
  return detail::rd_loss_from_latent(y, codec, lambda, quantize(c, mode, rng));
}

/// Train-mode loss with a fixed quantization-noise realization.
template <typename T>
LossTerms<T> rd_loss_with_noise(const Tensor<T>& y, const NeuralCodec<T>& codec, double lambda,
                                const Tensor<T>& noise) {
  const Tensor<T> c = codec.analyze(y);
  return detail::rd_loss_from_latent(y, codec, lambda, quantize_with_noise(c, noise));
}

struct TrainConfig {
  double lambda = 1000.0;
  double learning_rate = 2e-4;
  std::size_t batch_size = 64;
  std::size_t steps = 50000;
  std::uint64_t seed = 0;
  std::size_t patch_stride = 1;
  std::size_t max_patches = 0;  // 0 keeps every patch
  std::size_t log_interval = 100;
  CodecConfig arch;

  void validate() const {
    arch.validate();
    if (!(lambda > 0)) throw ConfigError("lambda must be positive");
    if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (patch_stride == 0) throw ConfigError("patch stride must be positive");
    if (log_interval == 0) throw ConfigError("log interval must be positive");
  }

  /// The production setting fixes 16x16 patches.
  void require_standard_patch() const {
    if (arch.patch_size != 16) throw ConfigError("training requires patch_size = 16");
  }
};

/// Lagrange multiplier used for the three evaluated noise levels.
inline std::optional<double> default_lambda_for_sigma(double sigma) {
  if (sigma == 15.0) return 300.0;
  if (sigma == 25.0) return 1000.0;
  if (sigma == 50.0) return 3000.0;
  return std::nullopt;
}

struct LogRecord {
  std::size_t step = 0;
  LossBreakdown loss;  // averaged over the steps since the previous record
  double wall_ms = 0;
};

template <typename T>
struct TrainResult {
  NeuralCodec<T> codec;
  std::vector<LogRecord> log;
  std::size_t skipped_steps = 0;
  std::vector<std::string> diagnostics;
};

/// Minibatch Adam on the rate-distortion loss over every patch of the given
/// noisy images. Random streams: init = seed fork 1, data order = fork 2,
/// quantization noise = fork 3.
template <typename T>
TrainResult<T> train(const std::vector<Image>& noisy_images, const TrainConfig& cfg,
                     const std::function<void(const LogRecord&)>& on_log = {}) {
  cfg.validate();
  if (noisy_images.empty()) throw ContractError("training corpus is empty");

  const Rng root(cfg.seed);
  Rng init_rng = root.fork(1), data_rng = root.fork(2), noise_rng = root.fork(3);

  TrainResult<T> result{NeuralCodec<T>(cfg.arch, init_rng), {}, 0, {}};
  NeuralCodec<T>& codec = result.codec;
  const std::vector<Tensor<T>*> params = codec.parameters();

  PatchDataset dataset(noisy_images, cfg.arch.patch_size, cfg.patch_stride);
  dataset.subsample(cfg.max_patches, data_rng);
  dataset.shuffle(data_rng);

  const std::size_t p = cfg.arch.patch_size;
  const std::size_t batch = cfg.batch_size;
  std::vector<PatchRef> order(dataset.refs().begin(), dataset.refs().end());
  std::size_t cursor = 0;
  std::vector<PatchRef> picked(batch);

  AdamState<T> adam;
  const auto start = std::chrono::steady_clock::now();
  double sum_d = 0, sum_r = 0;
  std::size_t in_interval = 0;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == order.size()) {
        dataset.shuffle(data_rng);
        order.assign(dataset.refs().begin(), dataset.refs().end());
        cursor = 0;
      }
      picked[i] = order[cursor++];
    }
    Tensor<T> y({batch, 1, p, p});
    dataset.gather<T>(picked, y.data().data());

    codec.zero_grad();
    const LossTerms<T> terms = rd_loss(y, codec, cfg.lambda, QuantizerMode::Train, noise_rng);
    backward(terms.total);
    std::string diag;
    if (adam_step(params, adam, cfg.learning_rate, &diag)) {
      codec.project();
    } else {
      ++result.skipped_steps;
      result.diagnostics.push_back("step " + std::to_string(step) + ": " + diag);
    }

    const LossBreakdown v = terms.values();
    sum_d += v.distortion;
    sum_r += v.rate;
    ++in_interval;
    if (step % cfg.log_interval == 0) {
      LogRecord rec;
      rec.step = step;
      rec.loss = make_breakdown(sum_d / static_cast<double>(in_interval),
                                sum_r / static_cast<double>(in_interval), cfg.lambda);
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      result.log.push_back(rec);
      if (on_log) on_log(rec);
      sum_d = sum_r = 0;
      in_interval = 0;
    }
  }
  return result;
}

}  // namespace decompress
