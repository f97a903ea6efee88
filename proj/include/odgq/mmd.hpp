#pragma once

// Gaussian-kernel maximum mean discrepancy between two feature batches.
// Kernel: k(a,b) = exp(-||a - b||^2 / (2 sigma)).

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "odgq/autodiff.hpp"
#include "odgq/tensor.hpp"

namespace odgq {

struct KernelConfig {
  std::optional<double> sigma;  // unset: median heuristic per call
  double sigma_floor = 1e-3;
};

template <class T>
Var<T> gaussian_kernel_matrix(const Var<T>& a, const Var<T>& b, T sigma) {
  if (!(sigma > T(0))) throw ConfigError("gaussian kernel bandwidth must be positive");
  return exp(mul_scalar(pairwise_sq_dist(a, b), T(-1) / (T(2) * sigma)));
}

/// Median of all pairwise squared distances between rows, halved and floored.
template <class T>
T median_bandwidth(const Tensor<T>& features, T floor = T(1e-3)) {
  if (features.rank() != 2 || features.dim(0) < 2) throw ShapeError("median_bandwidth needs at least two feature rows");
  const std::size_t n = features.dim(0), F = features.dim(1);
  std::vector<T> d;
  d.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      T s = 0;
      for (std::size_t f = 0; f < F; ++f) {
        const T diff = features[i * F + f] - features[j * F + f];
        s += diff * diff;
      }
      d.push_back(s);
    }
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  T med = d[mid];
  if (d.size() % 2 == 0) {
    const T lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    med = (med + lower) / T(2);
  }
  return std::max(med / T(2), floor);
}

/// Bandwidth that mmd_squared will use for this pair of batches.
template <class T>
T resolve_bandwidth(const Tensor<T>& s, const Tensor<T>& t, const KernelConfig& cfg) {
  if (cfg.sigma) {
    if (!(*cfg.sigma > 0)) throw ConfigError("gaussian kernel bandwidth must be positive");
    return std::max(static_cast<T>(*cfg.sigma), static_cast<T>(cfg.sigma_floor));
  }
  return median_bandwidth(concat_leading(s, t), static_cast<T>(cfg.sigma_floor));
}

/// Biased (V-statistic) squared MMD:
///   mean K(S,S) + mean K(T,T) - 2 mean K(S,T).
/// A median bandwidth is computed from the values and treated as a constant.
template <class T>
Var<T> mmd_squared(const Var<T>& s, const Var<T>& t, const KernelConfig& cfg = {}) {
  if (s.shape().size() != 2 || t.shape().size() != 2) throw ShapeError("mmd_squared expects [m,F] and [n,F] features");
  const T sigma = resolve_bandwidth(s.value(), t.value(), cfg);
  Var<T> kss = mean(gaussian_kernel_matrix(s, s, sigma));
  Var<T> ktt = mean(gaussian_kernel_matrix(t, t, sigma));
  // The cross term is summed in a canonical argument order so that
  // mmd(S,T) and mmd(T,S) round identically.
  const auto& sv = s.value().storage();
  const auto& tv = t.value().storage();
  const bool swap = t.shape()[0] < s.shape()[0] ||
                    (t.shape()[0] == s.shape()[0] && std::lexicographical_compare(tv.begin(), tv.end(), sv.begin(), sv.end()));
  Var<T> kst = swap ? mean(gaussian_kernel_matrix(t, s, sigma)) : mean(gaussian_kernel_matrix(s, t, sigma));
  return sub(add(kss, ktt), mul_scalar(kst, T(2)));
}

/// Value-only convenience.
template <class T>
T mmd_squared_value(const Tensor<T>& s, const Tensor<T>& t, const KernelConfig& cfg = {}) {
  Tape<T> tape;
  tape.set_recording(false);
  return mmd_squared(tape.leaf(s), tape.leaf(t), cfg).value().item();
}

}  // namespace odgq
