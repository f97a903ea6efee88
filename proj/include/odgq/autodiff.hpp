#pragma once

// Tape-based reverse-mode automatic differentiation over Tensor<T>.
//
// A Tape records primitives in execution order, so the node list is already
// topologically sorted and backward() is a single reverse sweep. Each node
// keeps its value plus whatever intermediates its pullback closure captured.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "odgq/tensor.hpp"

namespace odgq {

enum class OpKind {
  leaf,
  matmul,
  conv2d,
  add,
  sub,
  mul,
  mul_scalar,
  add_scalar,
  relu,
  batchnorm,
  avgpool2d,
  flatten,
  softmax_cross_entropy,
  sum,
  mean,
  exp,
  square,
  sqrt,
  pairwise_sq_dist,
  sign,
  clip,
  round_ste,
  slice_rows,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::mul_scalar: return "mul-scalar";
    case OpKind::add_scalar: return "add-scalar";
    case OpKind::relu: return "relu";
    case OpKind::batchnorm: return "batchnorm";
    case OpKind::avgpool2d: return "avgpool2d";
    case OpKind::flatten: return "flatten";
    case OpKind::softmax_cross_entropy: return "softmax-cross-entropy";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::exp: return "exp";
    case OpKind::square: return "square";
    case OpKind::sqrt: return "sqrt";
    case OpKind::pairwise_sq_dist: return "pairwise-sq-dist";
    case OpKind::sign: return "sign";
    case OpKind::clip: return "clip";
    case OpKind::round_ste: return "round-ste";
    case OpKind::slice_rows: return "slice-rows";
  }
  return "unknown";
}

/// Engine-wide counters. backward_passes feeds the "two backward passes per
/// ODG-Q batch" instrumentation.
struct EngineStats {
  static std::atomic<std::uint64_t>& backward_passes() {
    static std::atomic<std::uint64_t> n{0};
    return n;
  }
};

template <class T>
class Tape;

/// Handle to a node on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  std::size_t id() const noexcept { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Accumulation buffers handed to a pullback: one per node input, nullptr
/// when that input does not need a gradient.
template <class T>
class GradSink {
 public:
  GradSink(std::vector<std::optional<Tensor<T>>>& grads, const std::vector<std::size_t>& inputs,
           const std::vector<bool>& needs, const Tape<T>& tape)
      : grads_(grads), inputs_(inputs), needs_(needs), tape_(tape) {}

  bool wants(std::size_t input) const { return needs_[inputs_[input]]; }

  Tensor<T>* slot(std::size_t input);

 private:
  std::vector<std::optional<Tensor<T>>>& grads_;
  const std::vector<std::size_t>& inputs_;
  const std::vector<bool>& needs_;
  const Tape<T>& tape_;
};

/// Gradients of leaves that were marked as requiring them.
template <class T>
class GradientMap {
 public:
  const Tensor<T>& at(const Var<T>& v) const {
    auto it = grads_.find(v.id());
    if (it == grads_.end()) {
      throw Error("gradient requested for detached tensor (node " + std::to_string(v.id()) + ")");
    }
    return it->second;
  }
  const Tensor<T>& operator[](const Var<T>& v) const { return at(v); }
  bool contains(const Var<T>& v) const { return grads_.count(v.id()) != 0; }
  std::unordered_map<std::size_t, Tensor<T>>& raw() { return grads_; }

 private:
  std::unordered_map<std::size_t, Tensor<T>> grads_;
};

template <class T>
class Tape {
 public:
  using Pullback = std::function<void(const Tensor<T>& out_grad, GradSink<T>& sink)>;

  struct Node {
    OpKind kind = OpKind::leaf;
    Tensor<T> value;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    Pullback pullback;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends a computed node. The pullback is dropped when no input needs a
  /// gradient or recording is disabled.
  Var<T> record(OpKind kind, Tensor<T> value, std::vector<std::size_t> inputs, Pullback pullback) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite output produced by ") + op_name(kind) + " (node " +
                         std::to_string(nodes_.size()) + ")");
    }
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    bool any = false;
    for (std::size_t i : inputs) any = any || nodes_.at(i).requires_grad;
    n.requires_grad = any && recording_;
    if (n.requires_grad) n.pullback = std::move(pullback);
    n.inputs = std::move(inputs);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }

  /// Reverse sweep from a scalar loss. Returns gradients for every leaf
  /// that requires one.
  GradientMap<T> backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw Error("loss belongs to another tape");
    const Node& ln = nodes_.at(loss.id());
    if (ln.value.size() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(ln.value.shape()));
    EngineStats::backward_passes().fetch_add(1, std::memory_order_relaxed);

    const std::size_t n = loss.id() + 1;
    std::vector<bool> needs(nodes_.size(), false);
    for (std::size_t i = 0; i < nodes_.size(); ++i) needs[i] = nodes_[i].requires_grad;
    std::vector<std::optional<Tensor<T>>> grads(n);
    grads[loss.id()] = Tensor<T>(ln.value.shape(), T(1));

    for (std::size_t i = n; i-- > 0;) {
      Node& node = nodes_[i];
      if (!grads[i] || node.kind == OpKind::leaf || !node.pullback) continue;
      GradSink<T> sink(grads, node.inputs, needs, *this);
      node.pullback(*grads[i], sink);
      if (!grads[i]->all_finite()) {
        throw NumericError(std::string("non-finite gradient at ") + op_name(node.kind) + " (node " +
                           std::to_string(i) + ")");
      }
      grads[i].reset();
    }

    GradientMap<T> out;
    for (std::size_t i = 0; i < n; ++i) {
      if (nodes_[i].kind == OpKind::leaf && nodes_[i].requires_grad) {
        out.raw().emplace(i, grads[i] ? std::move(*grads[i]) : Tensor<T>(nodes_[i].value.shape(), T(0)));
      }
    }
    return out;
  }

 private:
  std::deque<Node> nodes_;
  bool recording_ = true;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return tape_->node(id_).value;
}

template <class T>
bool Var<T>::requires_grad() const {
  return tape_->node(id_).requires_grad;
}

template <class T>
Tensor<T>* GradSink<T>::slot(std::size_t input) {
  const std::size_t id = inputs_[input];
  if (!needs_[id]) return nullptr;
  auto& g = grads_[id];
  if (!g) g = Tensor<T>(tape_.node(id).value.shape(), T(0));
  return &*g;
}

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw Error("operands recorded on different tapes");
  return a.tape();
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T, class F>
Tensor<T> map_unary(const Tensor<T>& x, F f) {
  Tensor<T> out(x.shape());
  const T* px = x.raw();
  T* po = out.raw();
  for (std::size_t i = 0; i < x.size(); ++i) po[i] = f(px[i]);
  return out;
}

// Elementwise op whose pullback multiplies the upstream gradient by
// deriv(x_i, y_i).
template <class T, class F, class D>
Var<T> elementwise(OpKind kind, const Var<T>& x, F f, D deriv) {
  Tape<T>& tape = x.tape();
  Tensor<T> y = map_unary(x.value(), f);
  const std::size_t xid = x.id();
  auto pull = [&tape, xid, deriv](const Tensor<T>& g, GradSink<T>& sink) {
    Tensor<T>* gx = sink.slot(0);
    if (!gx) return;
    const T* px = tape.node(xid).value.raw();
    const T* pg = g.raw();
    T* pd = gx->raw();
    for (std::size_t i = 0; i < g.size(); ++i) pd[i] += pg[i] * deriv(px[i]);
  };
  return tape.record(kind, std::move(y), {xid}, std::move(pull));
}

template <class T>
void accumulate(Tensor<T>* dst, const Tensor<T>& src, T scale = T(1)) {
  if (!dst) return;
  T* d = dst->raw();
  const T* s = src.raw();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += scale * s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

/// a + b. b may also be a vector matching a's last extent (row-broadcast bias).
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const bool broadcast = av.shape() != bv.shape();
  if (broadcast && !(bv.rank() == 1 && av.rank() >= 1 && av.shape().back() == bv.dim(0))) {
    throw ShapeError("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor<T> y = av;
  const std::size_t inner = bv.size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[broadcast ? i % inner : i];
  auto pull = [broadcast, inner](const Tensor<T>& g, GradSink<T>& sink) {
    detail::accumulate(sink.slot(0), g);
    if (Tensor<T>* gb = sink.slot(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[broadcast ? i % inner : i] += g[i];
    }
  };
  return tape.record(OpKind::add, std::move(y), {a.id(), b.id()}, std::move(pull));
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  auto pull = [](const Tensor<T>& g, GradSink<T>& sink) {
    detail::accumulate(sink.slot(0), g);
    detail::accumulate(sink.slot(1), g, T(-1));
  };
  return tape.record(OpKind::sub, std::move(y), {a.id(), b.id()}, std::move(pull));
}

/// Hadamard product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  auto pull = [&tape, aid, bid](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* ga = sink.slot(0)) {
      const Tensor<T>& bv = tape.node(bid).value;
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor<T>* gb = sink.slot(1)) {
      const Tensor<T>& av = tape.node(aid).value;
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  };
  return tape.record(OpKind::mul, std::move(y), {aid, bid}, std::move(pull));
}

template <class T>
Var<T> mul_scalar(const Var<T>& x, T c) {
  return detail::elementwise(OpKind::mul_scalar, x, [c](T v) { return v * c; }, [c](T) { return c; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::elementwise(OpKind::add_scalar, x, [c](T v) { return v + c; }, [](T) { return T(1); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::elementwise(
      OpKind::relu, x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return detail::elementwise(
      OpKind::exp, x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::elementwise(
      OpKind::square, x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

/// Elementwise square root; gradient is defined for strictly positive input.
template <class T>
Var<T> sqrt(const Var<T>& x) {
  return detail::elementwise(
      OpKind::sqrt, x, [](T v) { return std::sqrt(v); }, [](T v) { return T(0.5) / std::sqrt(v); });
}

/// Clamp to [lo, hi]; gradient passes only where lo <= x <= hi.
template <class T>
Var<T> clip(const Var<T>& x, T lo, T hi) {
  if (!(lo < hi)) throw Error("clip: empty range");
  return detail::elementwise(
      OpKind::clip, x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

/// Mathematical sign with sign(0) = 0. Zero gradient everywhere.
template <class T>
Var<T> sign(const Var<T>& x) {
  return detail::elementwise(
      OpKind::sign, x, [](T v) { return static_cast<T>((v > T(0)) - (v < T(0))); }, [](T) { return T(0); });
}

/// Elementwise op with caller-supplied value and straight-through mask.
/// Used by the quantizers for round-ste and binarization.
template <class T, class F, class D>
Var<T> straight_through(OpKind kind, const Var<T>& x, F forward, D mask) {
  return detail::elementwise(kind, x, forward, mask);
}

// ---------------------------------------------------------------------------
// Reductions and reshapes

template <class T>
Var<T> sum(const Var<T>& x) {
  Tape<T>& tape = x.tape();
  T s = 0;
  for (T v : x.value().data()) s += v;
  auto pull = [](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* gx = sink.slot(0)) {
      for (T& v : gx->data()) v += g[0];
    }
  };
  return tape.record(OpKind::sum, Tensor<T>::scalar(s), {x.id()}, std::move(pull));
}

template <class T>
Var<T> mean(const Var<T>& x) {
  Tape<T>& tape = x.tape();
  T s = 0;
  for (T v : x.value().data()) s += v;
  const T n = static_cast<T>(x.value().size());
  auto pull = [n](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* gx = sink.slot(0)) {
      const T d = g[0] / n;
      for (T& v : gx->data()) v += d;
    }
  };
  return tape.record(OpKind::mean, Tensor<T>::scalar(s / n), {x.id()}, std::move(pull));
}

/// Collapse all axes after the first: [B, ...] -> [B, prod(...)].
template <class T>
Var<T> flatten(const Var<T>& x) {
  Tape<T>& tape = x.tape();
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 1) throw ShapeError("flatten: rank-0 input");
  const std::size_t b = xv.dim(0);
  Tensor<T> y = xv.reshaped({b, xv.size() / b});
  auto pull = [](const Tensor<T>& g, GradSink<T>& sink) { detail::accumulate(sink.slot(0), g); };
  return tape.record(OpKind::flatten, std::move(y), {x.id()}, std::move(pull));
}

/// Rows [begin, end) of the leading axis.
template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
  Tape<T>& tape = x.tape();
  Tensor<T> y = slice_leading(x.value(), begin, end);
  const std::size_t row = x.value().size() / x.value().dim(0);
  auto pull = [begin, row](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* gx = sink.slot(0)) {
      T* d = gx->raw() + begin * row;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  };
  return tape.record(OpKind::slice_rows, std::move(y), {x.id()}, std::move(pull));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n]
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const auto m = static_cast<Eigen::Index>(av.dim(0));
  const auto k = static_cast<Eigen::Index>(av.dim(1));
  const auto n = static_cast<Eigen::Index>(bv.dim(1));
  Tensor<T> y({av.dim(0), bv.dim(1)});
  detail::MapMat<T>(y.raw(), m, n).noalias() = detail::CMapMat<T>(av.raw(), m, k) * detail::CMapMat<T>(bv.raw(), k, n);
  const std::size_t aid = a.id(), bid = b.id();
  auto pull = [&tape, aid, bid, m, k, n](const Tensor<T>& g, GradSink<T>& sink) {
    detail::CMapMat<T> G(g.raw(), m, n);
    if (Tensor<T>* ga = sink.slot(0)) {
      detail::MapMat<T>(ga->raw(), m, k).noalias() += G * detail::CMapMat<T>(tape.node(bid).value.raw(), k, n).transpose();
    }
    if (Tensor<T>* gb = sink.slot(1)) {
      detail::MapMat<T>(gb->raw(), k, n).noalias() += detail::CMapMat<T>(tape.node(aid).value.raw(), m, k).transpose() * G;
    }
  };
  return tape.record(OpKind::matmul, std::move(y), {aid, bid}, std::move(pull));
}

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

namespace detail {

struct ConvGeometry {
  std::size_t c, h, w, k, stride, pad, oh, ow;
  std::size_t patch() const { return c * k * k; }
  std::size_t out_pixels() const { return oh * ow; }
};

// Output columns [ox_lo, ox_hi) read inside the image for kernel offset kx.
inline std::pair<std::size_t, std::size_t> valid_cols(const ConvGeometry& g, std::size_t kx) {
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(g.stride);
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(g.w) - off + s - 1) / s;
  hi = std::clamp<std::ptrdiff_t>(hi, 0, static_cast<std::ptrdiff_t>(g.ow));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// cols: [C*k*k, OH*OW] for one image.
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t op = g.out_pixels();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * op;
        const auto [lo, hi] = valid_cols(g, kx);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo + kx - g.pad, src + hi + kx - g.pad, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + kx - g.pad];
          }
          std::fill(dst + hi, dst + g.ow, T(0));
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t op = g.out_pixels();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * op;
        const auto [lo, hi] = valid_cols(g, kx);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + kx - g.pad] += src[ox];
        }
      }
    }
  }
}

}  // namespace detail

/// x [B,C,H,W] * w [O,C,k,k] -> [B,O,OH,OW], square kernels, zero padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, Conv2dAttrs attrs = {}) {
  Tape<T>& tape = detail::same_tape(x, w);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1) || wv.dim(2) != wv.dim(3) || attrs.stride == 0) {
    throw ShapeError("conv2d: incompatible input " + shape_str(xv.shape()) + " and kernel " + shape_str(wv.shape()));
  }
  detail::ConvGeometry g{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), attrs.stride, attrs.pad, 0, 0};
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) throw ShapeError("conv2d: kernel larger than padded input");
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  const std::size_t batch = xv.dim(0), out_c = wv.dim(0);
  const auto P = static_cast<Eigen::Index>(g.patch());
  const auto OP = static_cast<Eigen::Index>(g.out_pixels());
  const auto O = static_cast<Eigen::Index>(out_c);
  const std::size_t in_stride = g.c * g.h * g.w;

  Tensor<T> y({batch, out_c, g.oh, g.ow});
  std::vector<T> cols(g.patch() * g.out_pixels());
  detail::CMapMat<T> W(wv.raw(), O, P);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::im2col(xv.raw() + b * in_stride, g, cols.data());
    detail::MapMat<T>(y.raw() + b * out_c * g.out_pixels(), O, OP).noalias() = W * detail::CMapMat<T>(cols.data(), P, OP);
  }

  const std::size_t xid = x.id(), wid = w.id();
  auto pull = [&tape, xid, wid, g, batch, out_c, P, OP, O, in_stride](const Tensor<T>& gy, GradSink<T>& sink) {
    Tensor<T>* gx = sink.slot(0);
    Tensor<T>* gw = sink.slot(1);
    if (!gx && !gw) return;
    const Tensor<T>& xin = tape.node(xid).value;
    detail::CMapMat<T> Wm(tape.node(wid).value.raw(), O, P);
    std::vector<T> cols(g.patch() * g.out_pixels());
    for (std::size_t b = 0; b < batch; ++b) {
      detail::CMapMat<T> G(gy.raw() + b * out_c * g.out_pixels(), O, OP);
      if (gw) {
        detail::im2col(xin.raw() + b * in_stride, g, cols.data());
        detail::MapMat<T>(gw->raw(), O, P).noalias() += G * detail::CMapMat<T>(cols.data(), P, OP).transpose();
      }
      if (gx) {
        detail::MapMat<T>(cols.data(), P, OP).noalias() = Wm.transpose() * G;
        detail::col2im_add(cols.data(), g, gx->raw() + b * in_stride);
      }
    }
  };
  return tape.record(OpKind::conv2d, std::move(y), {xid, wid}, std::move(pull));
}

/// Non-overlapping average pooling with window k (stride k). k = 0 means
/// global pooling. Output keeps rank 4.
template <class T>
Var<T> avgpool2d(const Var<T>& x, std::size_t k = 0) {
  Tape<T>& tape = x.tape();
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("avgpool2d: expected rank-4 input, got " + shape_str(xv.shape()));
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t kh = k ? k : H, kw = k ? k : W;
  if (H % kh || W % kw) throw ShapeError("avgpool2d: window does not tile input " + shape_str(xv.shape()));
  const std::size_t OH = H / kh, OW = W / kw;
  const T inv = T(1) / static_cast<T>(kh * kw);
  Tensor<T> y({B, C, OH, OW});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* src = xv.raw() + bc * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        T s = 0;
        for (std::size_t dy = 0; dy < kh; ++dy)
          for (std::size_t dx = 0; dx < kw; ++dx) s += src[(oy * kh + dy) * W + ox * kw + dx];
        y[(bc * OH + oy) * OW + ox] = s * inv;
      }
    }
  }
  auto pull = [B, C, H, W, kh, kw, OH, OW, inv](const Tensor<T>& g, GradSink<T>& sink) {
    Tensor<T>* gx = sink.slot(0);
    if (!gx) return;
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      T* dst = gx->raw() + bc * H * W;
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          const T d = g[(bc * OH + oy) * OW + ox] * inv;
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx) dst[(oy * kh + dy) * W + ox * kw + dx] += d;
        }
    }
  };
  return tape.record(OpKind::avgpool2d, std::move(y), {x.id()}, std::move(pull));
}

// ---------------------------------------------------------------------------
// Batch normalization

template <class T>
struct BatchNormState {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
};

struct BatchNormAttrs {
  bool training = true;
  bool update_running_stats = true;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};

/// Per-channel normalization over all axes but axis 1. x is [B,C] or
/// [B,C,H,W]; gamma and beta are [C].
template <class T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T> state, BatchNormAttrs attrs) {
  Tape<T>& tape = detail::same_tape(x, gamma);
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2 && xv.rank() != 4) throw ShapeError("batchnorm: expected rank 2 or 4, got " + shape_str(xv.shape()));
  const std::size_t B = xv.dim(0), C = xv.dim(1), S = xv.size() / (B * C);
  if (gamma.value().shape() != Shape{C} || beta.value().shape() != Shape{C}) throw ShapeError("batchnorm: affine shape mismatch");
  if (!state.running_mean || !state.running_var) throw Error("batchnorm: missing running statistics");
  const std::size_t N = B * S;
  const T eps = static_cast<T>(attrs.eps);

  std::vector<T> mu(C), inv_std(C);
  if (attrs.training) {
    if (N < 2) throw ShapeError("batchnorm: training mode needs more than one value per channel");
    for (std::size_t c = 0; c < C; ++c) {
      T s = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = xv.raw() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += p[i];
      }
      const T m = s / static_cast<T>(N);
      T v = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = xv.raw() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= static_cast<T>(N);
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(v + eps);
      if (attrs.update_running_stats) {
        const T mom = static_cast<T>(attrs.momentum);
        const T unbiased = v * static_cast<T>(N) / static_cast<T>(N - 1);
        (*state.running_mean)[c] = mom * (*state.running_mean)[c] + (T(1) - mom) * m;
        (*state.running_var)[c] = mom * (*state.running_var)[c] + (T(1) - mom) * unbiased;
      }
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = (*state.running_mean)[c];
      inv_std[c] = T(1) / std::sqrt((*state.running_var)[c] + eps);
    }
  }

  Tensor<T> xhat(xv.shape());
  Tensor<T> y(xv.shape());
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const T h = (xv[off + i] - mu[c]) * inv_std[c];
        xhat[off + i] = h;
        y[off + i] = gv[c] * h + bv[c];
      }
    }

  const std::size_t gid = gamma.id();
  const bool training = attrs.training;
  auto pull = [&tape, gid, xhat = std::move(xhat), inv_std = std::move(inv_std), B, C, S, N, training](
                  const Tensor<T>& g, GradSink<T>& sink) {
    const Tensor<T>& gam = tape.node(gid).value;
    std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t off = (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          sum_g[c] += g[off + i];
          sum_gx[c] += g[off + i] * xhat[off + i];
        }
      }
    if (Tensor<T>* gx = sink.slot(0)) {
      const T invN = T(1) / static_cast<T>(N);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t off = (b * C + c) * S;
          const T k = gam[c] * inv_std[c];
          for (std::size_t i = 0; i < S; ++i) {
            if (training) {
              (*gx)[off + i] += k * (g[off + i] - invN * sum_g[c] - xhat[off + i] * invN * sum_gx[c]);
            } else {
              (*gx)[off + i] += k * g[off + i];
            }
          }
        }
    }
    if (Tensor<T>* gg = sink.slot(1))
      for (std::size_t c = 0; c < C; ++c) (*gg)[c] += sum_gx[c];
    if (Tensor<T>* gb = sink.slot(2))
      for (std::size_t c = 0; c < C; ++c) (*gb)[c] += sum_g[c];
  };
  return tape.record(OpKind::batchnorm, std::move(y), {x.id(), gid, beta.id()}, std::move(pull));
}

// ---------------------------------------------------------------------------
// Losses and distances

/// Mean over rows of -sum_k t_k log softmax(logits)_k, computed with
/// max-subtraction. `targets` is either class indices or a [B,K] row-stochastic
/// tensor of soft targets.
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::variant<std::vector<int>, Tensor<T>>& targets) {
  Tape<T>& tape = logits.tape();
  const Tensor<T>& z = logits.value();
  if (z.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [B,K], got " + shape_str(z.shape()));
  const std::size_t B = z.dim(0), K = z.dim(1);
  Tensor<T> target({B, K});
  if (const auto* labels = std::get_if<std::vector<int>>(&targets)) {
    if (labels->size() != B) throw ShapeError("softmax_cross_entropy: label count does not match batch");
    for (std::size_t b = 0; b < B; ++b) {
      const int l = (*labels)[b];
      if (l < 0 || static_cast<std::size_t>(l) >= K) {
        throw Error("softmax_cross_entropy: label " + std::to_string(l) + " out of range [0," + std::to_string(K) + ")");
      }
      target[b * K + static_cast<std::size_t>(l)] = T(1);
    }
  } else {
    target = std::get<Tensor<T>>(targets);
    if (target.shape() != z.shape()) throw ShapeError("softmax_cross_entropy: soft target shape mismatch");
  }
  Tensor<T> prob({B, K});
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = z.raw() + b * K;
    const T m = *std::max_element(row, row + K);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - m);
    const T lse = m + std::log(s);
    for (std::size_t k = 0; k < K; ++k) {
      prob[b * K + k] = std::exp(row[k] - lse);
      loss -= target[b * K + k] * (row[k] - lse);
    }
  }
  loss /= static_cast<T>(B);
  auto pull = [prob = std::move(prob), target = std::move(target), B](const Tensor<T>& g, GradSink<T>& sink) {
    Tensor<T>* gz = sink.slot(0);
    if (!gz) return;
    const T scale = g[0] / static_cast<T>(B);
    for (std::size_t i = 0; i < prob.size(); ++i) (*gz)[i] += scale * (prob[i] - target[i]);
  };
  return tape.record(OpKind::softmax_cross_entropy, Tensor<T>::scalar(loss), {logits.id()}, std::move(pull));
}

/// D[i,j] = ||a_i - b_j||^2 for a [m,F], b [n,F].
template <class T>
Var<T> pairwise_sq_dist(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw ShapeError("pairwise_sq_dist: feature width mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), n = bv.dim(0), F = av.dim(1);
  Tensor<T> d({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t f = 0; f < F; ++f) {
        const T diff = av[i * F + f] - bv[j * F + f];
        s += diff * diff;
      }
      d[i * n + j] = s;
    }
  const std::size_t aid = a.id(), bid = b.id();
  auto pull = [&tape, aid, bid, m, n, F](const Tensor<T>& g, GradSink<T>& sink) {
    Tensor<T>* ga = sink.slot(0);
    Tensor<T>* gb = sink.slot(1);
    const Tensor<T>& A = tape.node(aid).value;
    const Tensor<T>& Bm = tape.node(bid).value;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const T w = T(2) * g[i * n + j];
        for (std::size_t f = 0; f < F; ++f) {
          const T diff = A[i * F + f] - Bm[j * F + f];
          if (ga) (*ga)[i * F + f] += w * diff;
          if (gb) (*gb)[j * F + f] -= w * diff;
        }
      }
  };
  return tape.record(OpKind::pairwise_sq_dist, std::move(d), {aid, bid}, std::move(pull));
}

// ---------------------------------------------------------------------------
// Verification

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for the scalar function built by `builder` at `point`. Throws if the builder
/// is not deterministic.
template <class F>
double finite_diff_check(F builder, const Tensor<double>& point, double step) {
  auto eval = [&](const Tensor<double>& p) {
    Tape<double> tape;
    tape.set_recording(false);
    Var<double> x = tape.leaf(p, false);
    return builder(tape, x).value().item();
  };
  const double f0 = eval(point);
  const double f1 = eval(point);
  if (std::memcmp(&f0, &f1, sizeof f0) != 0) throw Error("finite_diff_check: builder is not deterministic");

  Tape<double> tape;
  Var<double> x = tape.leaf(point, true);
  Var<double> out = builder(tape, x);
  const Tensor<double> analytic = tape.backward(out).at(x);

  double worst = 0;
  Tensor<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double fp = eval(probe);
    probe[i] = orig - step;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace odgq
