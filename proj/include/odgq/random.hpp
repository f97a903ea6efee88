#pragma once

#include <cstdint>
#include <random>

#include "odgq/tensor.hpp"

namespace odgq {

using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent streams from (seed, stream-id).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <class T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, T mean = T(0), T stddev = T(1)) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, T lo, T hi) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

/// Uniform random +/-1 entries.
template <class T>
Tensor<T> random_sign_tensor(Shape shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::bernoulli_distribution coin(0.5);
  for (T& v : t.data()) v = coin(rng) ? T(1) : T(-1);
  return t;
}

}  // namespace odgq
