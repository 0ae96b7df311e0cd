#pragma once

// The compression network: analysis transform, synthesis transform and the
// factorized prior of its bottleneck.
//
//   g_a: conv(1->N) GDN conv(N->N) GDN conv(N->M)        16x16 -> 2x2
//   g_s: deconv(M->N) IGDN deconv(N->N) IGDN deconv(N->1) 2x2 -> 16x16
//
// Every convolution is k=3, stride 2, pad 1 (transposed ones add output_pad 1).
// Patches enter and leave on the intensity scale; the network itself works on
// intensities divided by intensity_scale.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "decompress/conv.hpp"
#include "decompress/entropy_model.hpp"
#include "decompress/gdn.hpp"
#include "decompress/rng.hpp"
#include "decompress/tensor.hpp"

namespace decompress {

struct CodecConfig {
  std::size_t patch_size = 16;
  std::size_t hidden_channels = 256;
  std::size_t latent_channels = 16;
  std::size_t kernel = 3;
  double intensity_scale = 255.0;

  static constexpr std::size_t kLevels = 3;

  std::size_t latent_extent() const { return patch_size >> kLevels; }
  std::size_t pixels_per_patch() const { return patch_size * patch_size; }

  void validate() const {
    if (patch_size == 0 || patch_size % (std::size_t{1} << kLevels) != 0) {
      throw GeometryError("patch size " + std::to_string(patch_size) + " must be a positive multiple of 8");
    }
    if (hidden_channels == 0 || latent_channels == 0) throw ConfigError("channel counts must be positive");
    if (kernel != 3) throw ConfigError("only 3x3 kernels are supported");
    if (!(intensity_scale > 0)) throw ConfigError("intensity_scale must be positive");
  }

  bool operator==(const CodecConfig&) const = default;
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
};

namespace detail {

template <typename T>
ConvLayer<T> glorot_conv(std::size_t d0, std::size_t d1, std::size_t fan_in, std::size_t fan_out,
                         std::size_t bias_len, std::size_t k, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  ConvLayer<T> layer{Tensor<T>({d0, d1, k, k}), Tensor<T>({bias_len})};
  for (auto& w : layer.weight.data()) w = static_cast<T>(rng.uniform(-limit, limit));
  layer.weight.set_requires_grad(true);
  layer.bias.set_requires_grad(true);
  return layer;
}

}  // namespace detail

template <typename T>
struct AnalysisTransform {
  std::array<ConvLayer<T>, 3> convs;  // weight [Cout, Cin, k, k]
  std::array<GdnLayer<T>, 2> gdns;

  AnalysisTransform() = default;
  AnalysisTransform(const CodecConfig& cfg, Rng& rng) {
    const std::size_t k = cfg.kernel, k2 = k * k, n = cfg.hidden_channels, m = cfg.latent_channels;
    const std::array<std::pair<std::size_t, std::size_t>, 3> io{{{1, n}, {n, n}, {n, m}}};
    for (std::size_t i = 0; i < 3; ++i) {
      const auto [cin, cout] = io[i];
      convs[i] = detail::glorot_conv<T>(cout, cin, cin * k2, cout * k2, cout, k, rng);
    }
    gdns = {GdnLayer<T>(n, GdnMode::Forward), GdnLayer<T>(n, GdnMode::Forward)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> h = conv2d(x, convs[0].weight, convs[0].bias, 2, 1);
    h = gdns[0](h);
    h = conv2d(h, convs[1].weight, convs[1].bias, 2, 1);
    h = gdns[1](h);
    return conv2d(h, convs[2].weight, convs[2].bias, 2, 1);
  }
};

template <typename T>
struct SynthesisTransform {
  std::array<ConvLayer<T>, 3> convs;  // weight [Cin, Cout, k, k]
  std::array<GdnLayer<T>, 2> gdns;

  SynthesisTransform() = default;
  SynthesisTransform(const CodecConfig& cfg, Rng& rng) {
    const std::size_t k = cfg.kernel, k2 = k * k, n = cfg.hidden_channels, m = cfg.latent_channels;
    const std::array<std::pair<std::size_t, std::size_t>, 3> io{{{m, n}, {n, n}, {n, 1}}};
    for (std::size_t i = 0; i < 3; ++i) {
      const auto [cin, cout] = io[i];
      convs[i] = detail::glorot_conv<T>(cin, cout, cin * k2, cout * k2, cout, k, rng);
    }
    gdns = {GdnLayer<T>(n, GdnMode::Inverse), GdnLayer<T>(n, GdnMode::Inverse)};
  }

  Tensor<T> operator()(const Tensor<T>& c) const {
    Tensor<T> h = conv_transpose2d(c, convs[0].weight, convs[0].bias, 2, 1, 1);
    h = gdns[0](h);
    h = conv_transpose2d(h, convs[1].weight, convs[1].bias, 2, 1, 1);
    h = gdns[1](h);
    return conv_transpose2d(h, convs[2].weight, convs[2].bias, 2, 1, 1);
  }
};

template <typename T>
class NeuralCodec {
 public:
  NeuralCodec() = default;

  /// Fresh initialization; all draws come from rng in a fixed order.
  NeuralCodec(const CodecConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    analysis_ = AnalysisTransform<T>(cfg_, rng);
    synthesis_ = SynthesisTransform<T>(cfg_, rng);
    prior_ = FactorizedPrior<T>(cfg_.latent_channels, rng);
  }

  const CodecConfig& config() const { return cfg_; }
  AnalysisTransform<T>& analysis() { return analysis_; }
  SynthesisTransform<T>& synthesis() { return synthesis_; }
  FactorizedPrior<T>& prior() { return prior_; }
  const FactorizedPrior<T>& prior() const { return prior_; }

  /// [B, 1, P, P] intensities -> [B, M, P/8, P/8] latent.
  Tensor<T> analyze(const Tensor<T>& patches) const {
    const std::size_t p = cfg_.patch_size;
    if (patches.rank() != 4 || patches.dim(1) != 1 || patches.dim(2) != p || patches.dim(3) != p) {
      throw GeometryError("analyze: expected [B,1," + std::to_string(p) + "," + std::to_string(p) +
                          "], got " + shape_str(patches.shape()));
    }
    return analysis_(scale(patches, static_cast<T>(1.0 / cfg_.intensity_scale)));
  }

  /// [B, M, P/8, P/8] latent -> [B, 1, P, P] intensities.
  Tensor<T> synthesize(const Tensor<T>& latent) const {
    const std::size_t e = cfg_.latent_extent();
    if (latent.rank() != 4 || latent.dim(1) != cfg_.latent_channels || latent.dim(2) != e ||
        latent.dim(3) != e) {
      throw GeometryError("synthesize: expected [B," + std::to_string(cfg_.latent_channels) + "," +
                          std::to_string(e) + "," + std::to_string(e) + "], got " +
                          shape_str(latent.shape()));
    }
    return scale(synthesis_(latent), static_cast<T>(cfg_.intensity_scale));
  }

  /// All trainable tensors with stable names; order defines checkpoint and
  /// optimizer layout.
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto add_transform = [&out](const std::string& prefix, auto& t) {
      for (std::size_t i = 0; i < 3; ++i) {
        out.emplace_back(prefix + ".conv" + std::to_string(i) + ".weight", &t.convs[i].weight);
        out.emplace_back(prefix + ".conv" + std::to_string(i) + ".bias", &t.convs[i].bias);
        if (i < 2) {
          out.emplace_back(prefix + ".gdn" + std::to_string(i) + ".beta", &t.gdns[i].beta);
          out.emplace_back(prefix + ".gdn" + std::to_string(i) + ".gamma", &t.gdns[i].gamma);
        }
      }
    };
    add_transform("g_a", analysis_);
    add_transform("g_s", synthesis_);
    for (auto& [name, t] : prior_.named_parameters()) out.emplace_back("prior." + name, t);
    return out;
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Restores the GDN constraints beta >= 1e-6, gamma >= 0.
  void project() {
    for (auto& g : analysis_.gdns) g.project();
    for (auto& g : synthesis_.gdns) g.project();
  }

  /// Deep copy at another precision (parameters only, no gradients).
  template <typename U>
  NeuralCodec<U> cast() {
    NeuralCodec<U> out = NeuralCodec<U>::empty_like(cfg_);
    auto src = named_parameters();
    auto dst = out.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      *dst[i].second = src[i].second->template cast<U>();
      dst[i].second->set_requires_grad(true);
    }
    return out;
  }

  /// Codec with correctly shaped but zero-filled parameters (used by loaders).
  static NeuralCodec empty_like(const CodecConfig& cfg) {
    Rng rng(0);
    NeuralCodec codec(cfg, rng);
    for (auto* p : codec.parameters()) std::fill(p->data().begin(), p->data().end(), T{0});
    return codec;
  }

 private:
  CodecConfig cfg_;
  AnalysisTransform<T> analysis_;
  SynthesisTransform<T> synthesis_;
  FactorizedPrior<T> prior_;
};

}  // namespace decompress
