#pragma once

// Factorized prior over latent channels, the quantization surrogate, and the
// rate term R = E[-log2 P(round(c))].
//
// Each channel owns a univariate cumulative built from K composed monotone
// maps of widths 1 -> 3 -> 3 -> 3 -> 1:
//
//   h <- softplus(H_k) h + b_k
//   h <- h + tanh(a_k) * tanh(h)        (all but the last map)
//   cdf = sigmoid(h)
//
// softplus keeps every matrix nonnegative and |tanh(a_k)| < 1 keeps each
// nonlinearity increasing, so cdf is nondecreasing in its argument.

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "decompress/rng.hpp"
#include "decompress/tensor.hpp"

namespace decompress {

inline constexpr double kLikelihoodFloor = 1e-9;

enum class QuantizerMode { Train, Eval };

template <typename T>
class FactorizedPrior {
 public:
  static constexpr std::size_t kFactors = 4;
  static constexpr std::array<std::size_t, kFactors + 1> kWidths{1, 3, 3, 3, 1};

  FactorizedPrior() = default;

  /// init_scale sets the initial spread of the density: with a = 0 the
  /// composed map starts close to a logistic of scale init_scale.
  FactorizedPrior(std::size_t channels, Rng& rng, double init_scale = 10.0) : channels_(channels) {
    const double per_factor = std::pow(init_scale, 1.0 / static_cast<double>(kFactors));
    for (std::size_t k = 0; k < kFactors; ++k) {
      const std::size_t in = kWidths[k], out = kWidths[k + 1];
      const T raw = static_cast<T>(std::log(std::expm1(1.0 / per_factor / static_cast<double>(out))));
      matrices_[k] = Tensor<T>({channels, out, in}, raw);
      biases_[k] = Tensor<T>({channels, out});
      for (auto& b : biases_[k].data()) b = static_cast<T>(rng.uniform(-0.5, 0.5));
      matrices_[k].set_requires_grad(true);
      biases_[k].set_requires_grad(true);
      if (k + 1 < kFactors) {
        factors_[k] = Tensor<T>({channels, out});
        factors_[k].set_requires_grad(true);
      }
    }
  }

  std::size_t channels() const { return channels_; }

  Tensor<T>& matrix(std::size_t k) { return matrices_.at(k); }
  Tensor<T>& bias(std::size_t k) { return biases_.at(k); }
  Tensor<T>& factor(std::size_t k) { return factors_.at(k); }
  const Tensor<T>& matrix(std::size_t k) const { return matrices_.at(k); }
  const Tensor<T>& bias(std::size_t k) const { return biases_.at(k); }
  const Tensor<T>& factor(std::size_t k) const { return factors_.at(k); }

  /// Named trainable tensors in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t k = 0; k < kFactors; ++k) {
      out.emplace_back("matrix" + std::to_string(k), &matrices_[k]);
      out.emplace_back("bias" + std::to_string(k), &biases_[k]);
      if (k + 1 < kFactors) out.emplace_back("factor" + std::to_string(k), &factors_[k]);
    }
    return out;
  }

  /// Pre-sigmoid cumulative for x of shape [B, C, ...] with C == channels().
  Tensor<T> logits(const Tensor<T>& x) const;

 private:
  std::size_t channels_ = 0;
  std::array<Tensor<T>, kFactors> matrices_;  // [C, out, in], raw (softplus applied)
  std::array<Tensor<T>, kFactors> biases_;    // [C, out]
  std::array<Tensor<T>, kFactors> factors_;   // [C, out], raw (tanh applied); last unused
};

namespace detail {

// Per-channel effective parameters, flattened for the scalar inner loop.
template <typename T>
struct PriorChannel {
  std::array<std::array<T, 9>, 4> m{};   // softplus(H_k)
  std::array<std::array<T, 3>, 4> b{};
  std::array<std::array<T, 3>, 3> a{};   // tanh(a_k)
};

template <typename T>
struct PriorTrace {
  std::array<std::array<T, 3>, 5> h{};  // input of factor k (h[4] holds the logit)
  std::array<std::array<T, 3>, 4> z{};  // affine output of factor k
};

template <typename T>
void prior_eval(const PriorChannel<T>& p, T x, PriorTrace<T>& tr) {
  constexpr auto& w = FactorizedPrior<T>::kWidths;
  tr.h[0][0] = x;
  for (std::size_t k = 0; k < 4; ++k) {
    const std::size_t in = w[k], out = w[k + 1];
    for (std::size_t o = 0; o < out; ++o) {
      T s = p.b[k][o];
      for (std::size_t i = 0; i < in; ++i) s += p.m[k][o * in + i] * tr.h[k][i];
      tr.z[k][o] = s;
      tr.h[k + 1][o] = k + 1 < 4 ? s + p.a[k][o] * std::tanh(s) : s;
    }
  }
}

template <typename T>
PriorChannel<T> load_prior_channel(std::array<const T*, 4> matrices, std::array<const T*, 4> biases,
                                   std::array<const T*, 3> factors, std::size_t c) {
  constexpr auto& w = FactorizedPrior<T>::kWidths;
  PriorChannel<T> p;
  for (std::size_t k = 0; k < 4; ++k) {
    const std::size_t len = w[k] * w[k + 1];
    for (std::size_t i = 0; i < len; ++i) p.m[k][i] = stable_softplus(matrices[k][c * len + i]);
    for (std::size_t o = 0; o < w[k + 1]; ++o) {
      p.b[k][o] = biases[k][c * w[k + 1] + o];
      if (k + 1 < 4) p.a[k][o] = std::tanh(factors[k][c * w[k + 1] + o]);
    }
  }
  return p;
}

}  // namespace detail

template <typename T>
Tensor<T> FactorizedPrior<T>::logits(const Tensor<T>& x) const {
  if (x.rank() < 2 || x.dim(1) != channels_) {
    throw DimensionError("prior: expected [B, " + std::to_string(channels_) + ", ...], got " +
                         shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t inner = x.numel() / (batch * channels_);

  const auto load = [this](std::size_t c) {
    return detail::load_prior_channel<T>(
        {matrices_[0].data().data(), matrices_[1].data().data(), matrices_[2].data().data(),
         matrices_[3].data().data()},
        {biases_[0].data().data(), biases_[1].data().data(), biases_[2].data().data(),
         biases_[3].data().data()},
        {factors_[0].data().data(), factors_[1].data().data(), factors_[2].data().data()}, c);
  };

  std::vector<T> out(x.numel());
  detail::PriorTrace<T> tr;
  for (std::size_t c = 0; c < channels_; ++c) {
    const auto p = load(c);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels_ + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        detail::prior_eval(p, x[base + i], tr);
        out[base + i] = tr.h[4][0];
      }
    }
  }

  return detail::make_result<T>(
      x.shape(), std::move(out),
      {&x, &matrices_[0], &matrices_[1], &matrices_[2], &matrices_[3], &biases_[0], &biases_[1],
       &biases_[2], &biases_[3], &factors_[0], &factors_[1], &factors_[2]},
      [batch, inner, channels = channels_](Node<T>& self) {
        auto& px = *self.parents[0];
        const auto param = [&](std::size_t i) -> Node<T>& { return *self.parents[i]; };
        constexpr auto& w = kWidths;
        for (std::size_t c = 0; c < channels; ++c) {
          const auto p = detail::load_prior_channel<T>(
              {param(1).data.data(), param(2).data.data(), param(3).data.data(),
               param(4).data.data()},
              {param(5).data.data(), param(6).data.data(), param(7).data.data(),
               param(8).data.data()},
              {param(9).data.data(), param(10).data.data(), param(11).data.data()}, c);
          detail::PriorChannel<T> dp;  // gradients w.r.t. effective parameters
          detail::PriorTrace<T> tr;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const T g = self.grad[base + i];
              if (g == T{0}) continue;
              detail::prior_eval(p, px.data[base + i], tr);
              std::array<T, 3> gh{g, 0, 0};  // gradient w.r.t. h[k+1]
              for (std::size_t k = kFactors; k-- > 0;) {
                const std::size_t in = w[k], out = w[k + 1];
                std::array<T, 3> gz{};
                for (std::size_t o = 0; o < out; ++o) {
                  if (k + 1 < kFactors) {
                    const T t = std::tanh(tr.z[k][o]);
                    dp.a[k][o] += gh[o] * t;
                    gz[o] = gh[o] * (T{1} + p.a[k][o] * (T{1} - t * t));
                  } else {
                    gz[o] = gh[o];
                  }
                  dp.b[k][o] += gz[o];
                }
                std::array<T, 3> gin{};
                for (std::size_t o = 0; o < out; ++o)
                  for (std::size_t j = 0; j < in; ++j) {
                    dp.m[k][o * in + j] += gz[o] * tr.h[k][j];
                    gin[j] += p.m[k][o * in + j] * gz[o];
                  }
                gh = gin;
              }
              if (px.requires_grad) px.grad_buffer()[base + i] += gh[0];
            }
          }
          // chain through softplus / tanh reparameterizations
          for (std::size_t k = 0; k < kFactors; ++k) {
            const std::size_t len = w[k] * w[k + 1];
            auto& hm = param(1 + k);
            if (hm.requires_grad) {
              auto gm = hm.grad_buffer();
              for (std::size_t i = 0; i < len; ++i)
                gm[c * len + i] += dp.m[k][i] * detail::stable_sigmoid(hm.data[c * len + i]);
            }
            auto& hb = param(5 + k);
            if (hb.requires_grad) {
              auto gb = hb.grad_buffer();
              for (std::size_t o = 0; o < w[k + 1]; ++o) gb[c * w[k + 1] + o] += dp.b[k][o];
            }
            if (k + 1 < kFactors) {
              auto& ha = param(9 + k);
              if (ha.requires_grad) {
                auto ga = ha.grad_buffer();
                for (std::size_t o = 0; o < w[k + 1]; ++o) {
                  const T t = p.a[k][o];
                  ga[c * w[k + 1] + o] += dp.a[k][o] * (T{1} - t * t);
                }
              }
            }
          }
        }
      });
}

/// Probability mass between two cumulative logits, sigmoid(upper) -
/// sigmoid(lower), evaluated on whichever tail keeps it well conditioned.
template <typename T>
Tensor<T> interval_mass(const Tensor<T>& lower, const Tensor<T>& upper) {
  if (lower.shape() != upper.shape()) {
    throw DimensionError("interval_mass: shape mismatch " + shape_str(lower.shape()) + " vs " +
                         shape_str(upper.shape()));
  }
  std::vector<T> out(lower.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T l = lower[i], u = upper[i];
    const T s = (l + u) > T{0} ? T{-1} : T{1};
    out[i] = std::abs(detail::stable_sigmoid(s * u) - detail::stable_sigmoid(s * l));
  }
  return detail::make_result<T>(lower.shape(), std::move(out), {&lower, &upper}, [](Node<T>& self) {
    auto& pl = *self.parents[0];
    auto& pu = *self.parents[1];
    std::span<T> gl, gu;
    if (pl.requires_grad) gl = pl.grad_buffer();
    if (pu.requires_grad) gu = pu.grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      const T l = pl.data[i], u = pu.data[i];
      const T s = (l + u) > T{0} ? T{-1} : T{1};
      const T diff = detail::stable_sigmoid(s * u) - detail::stable_sigmoid(s * l);
      const T sign = diff >= T{0} ? T{1} : T{-1};
      const T su = detail::stable_sigmoid(u), sl = detail::stable_sigmoid(l);
      if (!gu.empty()) gu[i] += self.grad[i] * sign * s * su * (T{1} - su);
      if (!gl.empty()) gl[i] -= self.grad[i] * sign * s * sl * (T{1} - sl);
    }
  });
}

/// Train: c + u with u ~ U[-1/2, 1/2) drawn from rng; gradient passes through.
/// Eval: round half away from zero; inference only.
template <typename T>
Tensor<T> quantize(const Tensor<T>& c, QuantizerMode mode, Rng& rng) {
  if (mode == QuantizerMode::Eval) {
    if (grad_enabled() && c.requires_grad()) {
      throw ContractError("quantize: eval-mode rounding has no gradient; run inference under NoGradGuard");
    }
    std::vector<T> out(c.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::round(c[i]);
    return Tensor<T>(c.shape(), std::move(out));
  }
  Tensor<T> noise(c.shape());
  for (auto& v : noise.data()) v = static_cast<T>(rng.uniform() - 0.5);
  return add(c, noise);
}

/// Train-mode surrogate with a caller-supplied noise realization.
template <typename T>
Tensor<T> quantize_with_noise(const Tensor<T>& c, const Tensor<T>& noise) {
  if (noise.shape() != c.shape()) {
    throw DimensionError("quantize: noise shape " + shape_str(noise.shape()) + " vs " +
                         shape_str(c.shape()));
  }
  return add(c, noise.detach());
}

/// Cumulative in the open interval (0, 1): saturated tails are held at the
/// nearest representable values inside it.
template <typename T>
Tensor<T> cdf(const FactorizedPrior<T>& prior, const Tensor<T>& x) {
  return detail::unary_op(
      prior.logits(x),
      [](T v) {
        constexpr T lo = std::numeric_limits<T>::min();
        constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / 2;
        return std::clamp(detail::stable_sigmoid(v), lo, hi);
      },
      [](T v, T) {
        const T y = detail::stable_sigmoid(v);
        return y * (T{1} - y);
      });
}

/// P(v) = cdf(v + 1/2) - cdf(v - 1/2), floored at kLikelihoodFloor.
template <typename T>
Tensor<T> pmf(const FactorizedPrior<T>& prior, const Tensor<T>& v) {
  const Tensor<T> lower = prior.logits(add_scalar(v, T{-0.5}));
  const Tensor<T> upper = prior.logits(add_scalar(v, T{0.5}));
  return clamp_min(interval_mass(lower, upper), static_cast<T>(kLikelihoodFloor));
}

/// Bits per image pixel: sum of -log2 P over all latent elements divided by
/// (batch * pixels_per_patch).
template <typename T>
Tensor<T> rate_bits_per_pixel(const FactorizedPrior<T>& prior, const Tensor<T>& c_tilde,
                              std::size_t pixels_per_patch = 256) {
  const T denom = static_cast<T>(c_tilde.dim(0) * pixels_per_patch);
  return scale(reduce_sum(log2(pmf(prior, c_tilde))), T{-1} / denom);
}

/// Evaluates the cumulative of one channel on plain values (no graph).
template <typename T>
std::vector<T> channel_cdf(const FactorizedPrior<T>& prior, std::size_t channel,
                           std::span<const T> xs) {
  NoGradGuard guard;
  const std::size_t c = prior.channels();
  Tensor<T> batch({1, c, xs.size()});
  for (std::size_t i = 0; i < xs.size(); ++i) batch[channel * xs.size() + i] = xs[i];
  const Tensor<T> out = cdf(prior, batch);
  return {out.data().begin() + channel * xs.size(), out.data().begin() + (channel + 1) * xs.size()};
}

/// Integer pmf of one channel over [lo, hi] (no graph).
template <typename T>
std::vector<T> channel_pmf(const FactorizedPrior<T>& prior, std::size_t channel, int lo, int hi) {
  NoGradGuard guard;
  const std::size_t n = static_cast<std::size_t>(hi - lo + 1);
  const std::size_t c = prior.channels();
  Tensor<T> batch({1, c, n});
  for (std::size_t i = 0; i < n; ++i) batch[channel * n + i] = static_cast<T>(lo + static_cast<int>(i));
  const Tensor<T> out = pmf(prior, batch);
  return {out.data().begin() + channel * n, out.data().begin() + (channel + 1) * n};
}

}  // namespace decompress
