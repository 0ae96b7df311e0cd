#pragma once

// Strided 2-D convolution (cross-correlation, zero padding) and its adjoint,
// lowered to GEMM through im2col/col2im over the whole batch.

// Eigen's fast-math sqrt/rsqrt packets are approximations that disagree with
// the scalar tail, so results would depend on buffer alignment.
#ifndef EIGEN_FAST_MATH
#define EIGEN_FAST_MATH 0
#endif
#include <Eigen/Dense>

#include <cstddef>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "decompress/tensor.hpp"

namespace decompress {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Spatial geometry of one correlation: an image of in_h x in_w sampled by a
/// k x k window at the given stride/padding gives out_h x out_w positions.
struct ConvGeometry {
  std::size_t in_h = 0, in_w = 0;
  std::size_t kernel = 1, stride = 1, pad = 0;
  std::size_t out_h = 0, out_w = 0;

  std::size_t in_area() const { return in_h * in_w; }
  std::size_t out_area() const { return out_h * out_w; }
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t pad) {
  if (kernel < 1 || stride < 1) throw GeometryError("kernel and stride must be positive");
  if (in + 2 * pad < kernel) {
    throw GeometryError("padded extent " + std::to_string(in + 2 * pad) +
                        " smaller than kernel " + std::to_string(kernel));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

inline ConvGeometry make_conv_geometry(std::size_t in_h, std::size_t in_w, std::size_t kernel,
                                       std::size_t stride, std::size_t pad) {
  ConvGeometry g{in_h, in_w, kernel, stride, pad, 0, 0};
  g.out_h = conv_output_extent(in_h, kernel, stride, pad);
  g.out_w = conv_output_extent(in_w, kernel, stride, pad);
  return g;
}

namespace detail {

// Sequential sum. Eigen reductions peel by runtime alignment, which makes the
// rounding depend on where the allocator placed the buffer.
template <typename T>
T ordered_sum(const T* data, std::size_t n) {
  return std::accumulate(data, data + n, T{0});
}

// cols has shape [channels*k*k, batch*out_h*out_w].
template <typename T>
void im2col(const T* image, std::size_t batch, std::size_t channels, const ConvGeometry& g,
            T* cols) {
  const std::size_t k = g.kernel;
  const std::size_t ncols = batch * g.out_area();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * ncols;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* plane = image + (b * channels + c) * g.in_area();
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            T* dst = row + (b * g.out_h + oh) * g.out_w;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) {
              std::fill(dst, dst + g.out_w, T{0});
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(ih) * g.in_w;
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w))
                            ? T{0}
                            : src[static_cast<std::size_t>(iw)];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-and-adds cols back into image (not cleared here).
template <typename T>
void col2im(const T* cols, std::size_t batch, std::size_t channels, const ConvGeometry& g,
            T* image) {
  const std::size_t k = g.kernel;
  const std::size_t ncols = batch * g.out_area();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * ncols;
        for (std::size_t b = 0; b < batch; ++b) {
          T* plane = image + (b * channels + c) * g.in_area();
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            const T* src = row + (b * g.out_h + oh) * g.out_w;
            T* dst = plane + static_cast<std::size_t>(ih) * g.in_w;
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.in_w))
                dst[static_cast<std::size_t>(iw)] += src[ow];
            }
          }
        }
      }
    }
  }
}

// [B, C, A] <-> [C, B*A]
template <typename T>
void to_channel_major(const T* nchw, std::size_t batch, std::size_t channels, std::size_t area,
                      T* out) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(nchw + (b * channels + c) * area, area, out + (c * batch + b) * area);
}

template <typename T>
void from_channel_major(const T* cm, std::size_t batch, std::size_t channels, std::size_t area,
                        T* nchw) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(cm + (c * batch + b) * area, area, nchw + (b * channels + c) * area);
}

template <typename T>
void check_conv_operands(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t weight_in_axis, std::size_t weight_out_axis,
                         const char* op) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw DimensionError(std::string(op) + ": input and weight must be 4-D, got " +
                         shape_str(input.shape()) + " and " + shape_str(weight.shape()));
  }
  if (weight.dim(2) != weight.dim(3)) {
    throw DimensionError(std::string(op) + ": square kernels only, got " + shape_str(weight.shape()));
  }
  if (input.dim(1) != weight.dim(weight_in_axis)) {
    throw DimensionError(std::string(op) + ": input channels " + std::to_string(input.dim(1)) +
                         " do not match weight " + shape_str(weight.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(weight_out_axis)) {
    throw DimensionError(std::string(op) + ": bias shape " + shape_str(bias.shape()) +
                         " does not match weight " + shape_str(weight.shape()));
  }
}

}  // namespace detail

/// output[b,o,i,j] = bias[o] + sum_{c,u,v} weight[o,c,u,v] * input[b,c,i*s+u-p,j*s+v-p]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  detail::check_conv_operands(input, weight, bias, 1, 0, "conv2d");
  const std::size_t batch = input.dim(0), cin = input.dim(1), cout = weight.dim(0);
  const std::size_t k = weight.dim(2);
  const ConvGeometry g = make_conv_geometry(input.dim(2), input.dim(3), k, stride, pad);
  const std::size_t patch_len = cin * k * k;
  const std::size_t ncols = batch * g.out_area();

  auto cols = std::make_shared<std::vector<T>>(patch_len * ncols);
  detail::im2col(input.data().data(), batch, cin, g, cols->data());

  std::vector<T> out_cm(cout * ncols);
  MatrixMap<T> out_mat(out_cm.data(), cout, ncols);
  out_mat.noalias() = ConstMatrixMap<T>(weight.data().data(), cout, patch_len) *
                      ConstMatrixMap<T>(cols->data(), patch_len, ncols);
  for (std::size_t o = 0; o < cout; ++o) out_mat.row(o).array() += bias[o];

  std::vector<T> out(cout * ncols);
  detail::from_channel_major(out_cm.data(), batch, cout, g.out_area(), out.data());

  return detail::make_result<T>(
      {batch, cout, g.out_h, g.out_w}, std::move(out), {&input, &weight, &bias},
      [g, cols, batch, cin, cout, patch_len, ncols](Node<T>& self) {
        auto& in = *self.parents[0];
        auto& w = *self.parents[1];
        auto& b = *self.parents[2];
        std::vector<T> grad_cm(cout * ncols);
        detail::to_channel_major(self.grad.data(), batch, cout, g.out_area(), grad_cm.data());
        ConstMatrixMap<T> grad_mat(grad_cm.data(), cout, ncols);
        if (w.requires_grad) {
          MatrixMap<T>(w.grad_buffer().data(), cout, patch_len).noalias() +=
              grad_mat * ConstMatrixMap<T>(cols->data(), patch_len, ncols).transpose();
        }
        if (b.requires_grad) {
          auto gb = b.grad_buffer();
          for (std::size_t o = 0; o < cout; ++o) gb[o] += detail::ordered_sum(grad_cm.data() + o * ncols, ncols);
        }
        if (in.requires_grad) {
          std::vector<T> grad_cols(patch_len * ncols);
          MatrixMap<T>(grad_cols.data(), patch_len, ncols).noalias() =
              ConstMatrixMap<T>(w.data.data(), cout, patch_len).transpose() * grad_mat;
          detail::col2im(grad_cols.data(), batch, cin, g, in.grad_buffer().data());
        }
      });
}

/// Adjoint of conv2d in its input: weight is [Cin, Cout, k, k] and the output
/// extent is (H-1)*stride - 2*pad + k + output_pad.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride, std::size_t pad, std::size_t output_pad) {
  detail::check_conv_operands(input, weight, bias, 0, 1, "conv_transpose2d");
  if (stride < 1) throw GeometryError("conv_transpose2d: stride must be positive");
  if (output_pad >= stride) {
    throw GeometryError("conv_transpose2d: output_pad " + std::to_string(output_pad) +
                        " must be smaller than stride " + std::to_string(stride));
  }
  const std::size_t batch = input.dim(0), cin = input.dim(1), cout = weight.dim(1);
  const std::size_t k = weight.dim(2);
  const std::size_t h = input.dim(2), w = input.dim(3);
  const auto extent = [&](std::size_t n) {
    const std::ptrdiff_t e = static_cast<std::ptrdiff_t>((n - 1) * stride + k + output_pad) -
                             static_cast<std::ptrdiff_t>(2 * pad);
    if (e <= 0) {
      throw GeometryError("conv_transpose2d: non-positive output extent " + std::to_string(e));
    }
    return static_cast<std::size_t>(e);
  };
  const std::size_t out_h = extent(h), out_w = extent(w);
  // The correlation that this operator is the adjoint of.
  const ConvGeometry g = make_conv_geometry(out_h, out_w, k, stride, pad);
  if (g.out_h != h || g.out_w != w) {
    throw GeometryError("conv_transpose2d: inconsistent geometry for input " +
                        shape_str(input.shape()));
  }
  const std::size_t patch_len = cout * k * k;
  const std::size_t ncols = batch * h * w;

  auto in_cm = std::make_shared<std::vector<T>>(cin * ncols);
  detail::to_channel_major(input.data().data(), batch, cin, h * w, in_cm->data());

  std::vector<T> cols(patch_len * ncols);
  MatrixMap<T>(cols.data(), patch_len, ncols).noalias() =
      ConstMatrixMap<T>(weight.data().data(), cin, patch_len).transpose() *
      ConstMatrixMap<T>(in_cm->data(), cin, ncols);

  std::vector<T> out(batch * cout * out_h * out_w, T{0});
  detail::col2im(cols.data(), batch, cout, g, out.data());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < cout; ++o) {
      T* plane = out.data() + (b * cout + o) * g.in_area();
      for (std::size_t i = 0; i < g.in_area(); ++i) plane[i] += bias[o];
    }

  return detail::make_result<T>(
      {batch, cout, out_h, out_w}, std::move(out), {&input, &weight, &bias},
      [g, in_cm, batch, cin, cout, patch_len, ncols, h, w](Node<T>& self) {
        auto& in = *self.parents[0];
        auto& wt = *self.parents[1];
        auto& b = *self.parents[2];
        std::vector<T> grad_cols(patch_len * ncols);
        detail::im2col(self.grad.data(), batch, cout, g, grad_cols.data());
        ConstMatrixMap<T> gcols(grad_cols.data(), patch_len, ncols);
        if (in.requires_grad) {
          std::vector<T> grad_cm(cin * ncols);
          MatrixMap<T>(grad_cm.data(), cin, ncols).noalias() =
              ConstMatrixMap<T>(wt.data.data(), cin, patch_len) * gcols;
          std::vector<T> grad_in(in.data.size());
          detail::from_channel_major(grad_cm.data(), batch, cin, h * w, grad_in.data());
          auto gi = in.grad_buffer();
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += grad_in[i];
        }
        if (wt.requires_grad) {
          MatrixMap<T>(wt.grad_buffer().data(), cin, patch_len).noalias() +=
              ConstMatrixMap<T>(in_cm->data(), cin, ncols) * gcols.transpose();
        }
        if (b.requires_grad) {
          auto gb = b.grad_buffer();
          for (std::size_t bi = 0; bi < batch; ++bi)
            for (std::size_t o = 0; o < cout; ++o) {
              const T* plane = self.grad.data() + (bi * cout + o) * g.in_area();
              T s{0};
              for (std::size_t i = 0; i < g.in_area(); ++i) s += plane[i];
              gb[o] += s;
            }
        }
      });
}

}  // namespace decompress
