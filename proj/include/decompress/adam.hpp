#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "decompress/tensor.hpp"

namespace decompress {

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

/// One bias-corrected Adam update over params using their accumulated
/// gradients (a parameter with no gradient counts as zero gradient).
///
/// If any gradient is non-finite nothing is modified, the step counter is not
/// advanced, a description is written to diagnostics, and false is returned.
template <typename T>
bool adam_step(const std::vector<Tensor<T>*>& params, AdamState<T>& state, double lr,
               std::string* diagnostics = nullptr) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto g = params[p]->grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(static_cast<double>(g[i]))) {
        if (diagnostics) {
          std::ostringstream os;
          os << "non-finite gradient " << g[i] << " in parameter " << p << " element " << i
             << "; step " << state.step + 1 << " skipped";
          *diagnostics = os.str();
        }
        return false;
      }
    }
  }

  if (state.first_moment.empty()) {
    for (const auto* p : params) {
      state.first_moment.emplace_back(p->numel(), T{0});
      state.second_moment.emplace_back(p->numel(), T{0});
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T corr1 = static_cast<T>(1.0 - std::pow(state.beta1, t));
  const T corr2 = static_cast<T>(1.0 - std::pow(state.beta2, t));
  const T eps = static_cast<T>(state.epsilon), rate = static_cast<T>(lr);

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p]->data();
    const auto g = params[p]->grad();
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T gi = g.empty() ? T{0} : g[i];
      m[i] = b1 * m[i] + (T{1} - b1) * gi;
      v[i] = b2 * v[i] + (T{1} - b2) * gi * gi;
      const T m_hat = m[i] / corr1;
      const T v_hat = v[i] / corr2;
      data[i] -= rate * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
  return true;
}

}  // namespace decompress
