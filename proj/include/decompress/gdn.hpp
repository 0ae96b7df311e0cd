#pragma once

// Generalized divisive normalization and its inverse.
//
//   GDN:  y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2)
//   IGDN: y_i = x_i * sqrt(beta_i + sum_j gamma_ij * x_j^2)
//
// applied independently at every spatial location of a [B, C, H, W] tensor.
// Forward and backward are fused; the normalization pool is one GEMM.

#include <cmath>
#include <memory>
#include <sstream>
#include <vector>

#include "decompress/conv.hpp"
#include "decompress/tensor.hpp"

namespace decompress {

enum class GdnMode { Forward, Inverse };

inline constexpr double kGdnBetaFloor = 1e-6;

template <typename T>
Tensor<T> gdn(const Tensor<T>& x, const Tensor<T>& beta, const Tensor<T>& gamma, GdnMode mode) {
  if (x.rank() != 4) throw DimensionError("gdn: input must be 4-D, got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1), area = x.dim(2) * x.dim(3);
  if (beta.shape() != Shape{channels} || gamma.shape() != Shape{channels, channels}) {
    throw DimensionError("gdn: parameters " + shape_str(beta.shape()) + "/" +
                         shape_str(gamma.shape()) + " do not match " + std::to_string(channels) +
                         " channels");
  }
  const std::size_t n = batch * area;

  auto xs = std::make_shared<std::vector<T>>(channels * n);
  detail::to_channel_major(x.data().data(), batch, channels, area, xs->data());
  ConstMatrixMap<T> xm(xs->data(), channels, n);

  // scale = norm^(-1/2) for GDN, norm^(1/2) for IGDN
  auto scale_buf = std::make_shared<std::vector<T>>(channels * n);
  MatrixMap<T> norm(scale_buf->data(), channels, n);
  norm.noalias() = ConstMatrixMap<T>(gamma.data().data(), channels, channels) *
                   xm.array().square().matrix();
  for (std::size_t c = 0; c < channels; ++c) norm.row(c).array() += beta[c];
  if (!(norm.array() >= static_cast<T>(kNumericFloor)).all()) {  // also catches NaN
    std::ostringstream os;
    os << "gdn: normalization pool " << norm.minCoeff() << " below " << kNumericFloor;
    throw NumericGuardError(os.str());
  }
  if (mode == GdnMode::Forward)
    norm = norm.array().sqrt().inverse().matrix();
  else
    norm = norm.array().sqrt().matrix();

  std::vector<T> y_cm(channels * n);
  MatrixMap<T>(y_cm.data(), channels, n) = xm.array() * norm.array();
  std::vector<T> y(channels * n);
  detail::from_channel_major(y_cm.data(), batch, channels, area, y.data());

  return detail::make_result<T>(
      x.shape(), std::move(y), {&x, &beta, &gamma},
      [xs, scale_buf, batch, channels, area, n, mode](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pbeta = *self.parents[1];
        auto& pgamma = *self.parents[2];
        std::vector<T> g_cm(channels * n);
        detail::to_channel_major(self.grad.data(), batch, channels, area, g_cm.data());
        ConstMatrixMap<T> gm(g_cm.data(), channels, n);
        ConstMatrixMap<T> xm(xs->data(), channels, n);
        ConstMatrixMap<T> sm(scale_buf->data(), channels, n);
        // q = dL/dnorm
        RowMatrix<T> q(channels, n);
        if (mode == GdnMode::Forward)
          q = T{-0.5} * gm.array() * xm.array() * sm.array().cube();
        else
          q = T{0.5} * gm.array() * xm.array() / sm.array();

        if (pbeta.requires_grad) {
          auto gb = pbeta.grad_buffer();
          for (std::size_t c = 0; c < channels; ++c) gb[c] += detail::ordered_sum(q.data() + c * n, n);
        }
        if (pgamma.requires_grad) {
          MatrixMap<T>(pgamma.grad_buffer().data(), channels, channels).noalias() +=
              q * xm.array().square().matrix().transpose();
        }
        if (px.requires_grad) {
          RowMatrix<T> gx(channels, n);
          gx.noalias() = ConstMatrixMap<T>(pgamma.data.data(), channels, channels).transpose() * q;
          gx = gm.array() * sm.array() + T{2} * xm.array() * gx.array();
          std::vector<T> gx_nchw(channels * n);
          detail::from_channel_major(gx.data(), batch, channels, area, gx_nchw.data());
          auto dst = px.grad_buffer();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gx_nchw[i];
        }
      });
}

/// Parameters of one GDN/IGDN activation. Nonnegativity is maintained by
/// projection after each optimizer step, not by reparameterization.
template <typename T>
struct GdnLayer {
  Tensor<T> beta;   // [C]
  Tensor<T> gamma;  // [C, C]
  GdnMode mode = GdnMode::Forward;

  GdnLayer() = default;
  GdnLayer(std::size_t channels, GdnMode m, T gamma_init = T{0.1}) : mode(m) {
    beta = Tensor<T>({channels}, T{1});
    gamma = Tensor<T>({channels, channels}, T{0});
    for (std::size_t c = 0; c < channels; ++c) gamma[c * channels + c] = gamma_init;
    beta.set_requires_grad(true);
    gamma.set_requires_grad(true);
  }

  std::size_t channels() const { return beta.numel(); }

  Tensor<T> operator()(const Tensor<T>& x) const { return gdn(x, beta, gamma, mode); }

  void project() {
    for (auto& b : beta.data()) b = std::max(b, static_cast<T>(kGdnBetaFloor));
    for (auto& g : gamma.data()) g = std::max(g, T{0});
  }
};

}  // namespace decompress
