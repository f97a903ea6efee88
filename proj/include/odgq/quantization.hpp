#pragma once

// Fake quantization: values stay in floating point but are snapped to a
// uniform level set in the forward pass. Gradients use the clipped
// straight-through estimator.

#include <cmath>
#include <string>
#include <vector>

#include "odgq/autodiff.hpp"
#include "odgq/tensor.hpp"

namespace odgq {

enum class ScaleGranularity { per_layer, per_output_channel };

inline const char* granularity_name(ScaleGranularity g) {
  return g == ScaleGranularity::per_layer ? "per-layer" : "per-output-channel";
}

inline ScaleGranularity parse_granularity(const std::string& s) {
  if (s == "per-layer") return ScaleGranularity::per_layer;
  if (s == "per-output-channel") return ScaleGranularity::per_output_channel;
  throw ConfigError("unknown binarization granularity '" + s + "'");
}

struct QuantConfig {
  int weight_bits = 32;
  int activation_bits = 32;
  ScaleGranularity granularity = ScaleGranularity::per_output_channel;
};

inline bool valid_bits(int b) { return b == 1 || b == 2 || b == 3 || b == 4 || b == 8 || b == 32; }

inline void validate(const QuantConfig& q) {
  if (!valid_bits(q.weight_bits)) throw ConfigError("weight bits must be one of 1,2,3,4,8,32; got " + std::to_string(q.weight_bits));
  if (!valid_bits(q.activation_bits)) {
    throw ConfigError("activation bits must be one of 1,2,3,4,8,32; got " + std::to_string(q.activation_bits));
  }
}

namespace detail {

inline void require_multilevel_bits(int bits) {
  if (bits != 2 && bits != 3 && bits != 4 && bits != 8) {
    throw ConfigError("uniform quantizer supports 2, 3, 4 or 8 bits; got " + std::to_string(bits));
  }
}

// Uniform quantizer on [lo, hi] with n = 2^b - 1 steps. std::round rounds
// half away from zero.
template <class T>
T uniform_level(T x, T lo, T hi, T n) {
  const T c = std::clamp(x, lo, hi);
  return lo + (hi - lo) * std::round((c - lo) / (hi - lo) * n) / n;
}

template <class T>
T sgn_positive_zero(T v) {
  return v >= T(0) ? T(1) : T(-1);
}

}  // namespace detail

/// round(clip(a,0,1) * n) / n with n = 2^bits - 1.
template <class T>
Tensor<T> quantize_activation(const Tensor<T>& a, int bits) {
  detail::require_multilevel_bits(bits);
  const T n = static_cast<T>((1 << bits) - 1);
  return detail::map_unary(a, [n](T v) { return detail::uniform_level(v, T(0), T(1), n); });
}

/// 2 * round((clip(w,-1,1) + 1) / 2 * n) / n - 1, levels symmetric in [-1,1].
template <class T>
Tensor<T> quantize_weight(const Tensor<T>& w, int bits) {
  detail::require_multilevel_bits(bits);
  const T n = static_cast<T>((1 << bits) - 1);
  return detail::map_unary(w, [n](T v) { return detail::uniform_level(v, T(-1), T(1), n); });
}

/// Per-group scales mean(|w|). Groups are the whole tensor (per-layer) or the
/// slices along the first axis (per-output-channel).
template <class T>
std::vector<T> xnor_scales(const Tensor<T>& w, ScaleGranularity g) {
  if (w.size() == 0) throw ShapeError("binarize: empty group");
  const std::size_t groups = (g == ScaleGranularity::per_layer || w.rank() == 0) ? 1 : w.dim(0);
  const std::size_t per = w.size() / groups;
  std::vector<T> alpha(groups, T(0));
  for (std::size_t gi = 0; gi < groups; ++gi) {
    T s = 0;
    for (std::size_t i = 0; i < per; ++i) s += std::abs(w[gi * per + i]);
    alpha[gi] = s / static_cast<T>(per);
  }
  return alpha;
}

/// alpha * sgn(w) with sgn(0) = +1 so each group is exactly two-valued.
template <class T>
Tensor<T> binarize_xnor(const Tensor<T>& w, ScaleGranularity g) {
  const std::vector<T> alpha = xnor_scales(w, g);
  const std::size_t per = w.size() / alpha.size();
  Tensor<T> out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = alpha[i / per] * detail::sgn_positive_zero(w[i]);
  return out;
}

/// Clipped straight-through rule: upstream passes where lo <= input <= hi.
template <class T>
Tensor<T> ste_backward(const Tensor<T>& upstream, const Tensor<T>& input, T lo, T hi) {
  if (!(lo < hi)) throw Error("ste_backward: lo must be below hi");
  if (upstream.shape() != input.shape()) throw ShapeError("ste_backward: shape mismatch");
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = (input[i] >= lo && input[i] <= hi) ? upstream[i] : T(0);
  return out;
}

// ---------------------------------------------------------------------------
// Recorded versions

template <class T>
Var<T> fake_quantize_activation(const Var<T>& a, int bits) {
  detail::require_multilevel_bits(bits);
  const T n = static_cast<T>((1 << bits) - 1);
  return straight_through(
      OpKind::round_ste, a, [n](T v) { return detail::uniform_level(v, T(0), T(1), n); },
      [](T v) { return (v >= T(0) && v <= T(1)) ? T(1) : T(0); });
}

template <class T>
Var<T> fake_quantize_weight(const Var<T>& w, int bits) {
  detail::require_multilevel_bits(bits);
  const T n = static_cast<T>((1 << bits) - 1);
  return straight_through(
      OpKind::round_ste, w, [n](T v) { return detail::uniform_level(v, T(-1), T(1), n); },
      [](T v) { return (v >= T(-1) && v <= T(1)) ? T(1) : T(0); });
}

/// XNOR binarization on the tape. alpha is held constant in the backward
/// pass; sgn passes gradient straight through on [-1,1].
template <class T>
Var<T> fake_binarize(const Var<T>& w, ScaleGranularity g) {
  Tape<T>& tape = w.tape();
  const Tensor<T>& wv = w.value();
  const std::vector<T> alpha = xnor_scales(wv, g);
  const std::size_t per = wv.size() / alpha.size();
  Tensor<T> out = binarize_xnor(wv, g);
  const std::size_t wid = w.id();
  auto pull = [&tape, wid, alpha, per](const Tensor<T>& up, GradSink<T>& sink) {
    Tensor<T>* gw = sink.slot(0);
    if (!gw) return;
    const Tensor<T>& x = tape.node(wid).value;
    for (std::size_t i = 0; i < up.size(); ++i) {
      if (x[i] >= T(-1) && x[i] <= T(1)) (*gw)[i] += alpha[i / per] * up[i];
    }
  };
  return tape.record(OpKind::sign, std::move(out), {wid}, std::move(pull));
}

/// Weight quantizer selected by bit width (32 = identity).
template <class T>
Var<T> quantize_weight_var(const Var<T>& w, int bits, ScaleGranularity g) {
  if (bits == 32) return w;
  if (bits == 1) return fake_binarize(w, g);
  return fake_quantize_weight(w, bits);
}

}  // namespace odgq
