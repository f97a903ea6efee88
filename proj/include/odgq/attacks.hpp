#pragma once

// l-infinity white-box attacks on inputs in [0,1]: Gaussian noise, FGSM, BIM,
// PGD and TPGD. Every attack works against an abstract input-gradient or
// logits callable, so tests can drive them with closed-form toy models.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "odgq/autodiff.hpp"
#include "odgq/model.hpp"
#include "odgq/random.hpp"
#include "odgq/tensor.hpp"

namespace odgq {

enum class AttackKind { natural, gn, fgsm, bim, pgd, tpgd };

inline const char* attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::natural: return "natural";
    case AttackKind::gn: return "gn";
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::bim: return "bim";
    case AttackKind::pgd: return "pgd";
    case AttackKind::tpgd: return "tpgd";
  }
  return "?";
}

inline AttackKind parse_attack(const std::string& s) {
  for (AttackKind k : {AttackKind::natural, AttackKind::gn, AttackKind::fgsm, AttackKind::bim, AttackKind::pgd, AttackKind::tpgd}) {
    if (s == attack_name(k)) return k;
  }
  throw ConfigError("unknown attack '" + s + "'");
}

/// Budgets are in [0,1] pixel units.
struct AttackSpec {
  AttackKind kind = AttackKind::pgd;
  double eps = 8.0 / 255.0;
  double alpha = 4.0 / 255.0;
  std::size_t steps = 20;
  double rho = 1.0;
  std::uint64_t seed = 0;
};

inline void validate(const AttackSpec& a) {
  if (!(a.eps >= 0)) throw ConfigError("attack eps must be non-negative");
  if (!(a.alpha >= 0)) throw ConfigError("attack alpha must be non-negative");
  if (!(a.rho > 0)) throw ConfigError("TPGD rho must be positive");
}

template <class T>
using InputGradFn = std::function<Tensor<T>(const Tensor<T>&)>;

template <class T>
using LogitsFn = std::function<Var<T>(Tape<T>&, const Var<T>&)>;

/// sign with sign(0) = 0.
template <class T>
Tensor<T> sign_of(const Tensor<T>& g) {
  return detail::map_unary(g, [](T v) { return static_cast<T>((v > T(0)) - (v < T(0))); });
}

template <class T>
Tensor<T> clamp01(Tensor<T> x) {
  for (T& v : x.data()) v = std::clamp(v, T(0), T(1));
  return x;
}

/// Clamp x_adv into [x0 - eps, x0 + eps], then into [0,1].
template <class T>
Tensor<T> clip_project(const Tensor<T>& x_adv, const Tensor<T>& x0, T eps) {
  if (eps < T(0)) throw ConfigError("clip_project: eps must be non-negative");
  if (x_adv.shape() != x0.shape()) throw ShapeError("clip_project: shape mismatch");
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const T v = std::min(std::max(x_adv[i], x0[i] - eps), x0[i] + eps);
    out[i] = std::clamp(v, T(0), T(1));
  }
  return out;
}

namespace detail {

// Row r of the batch draws from stream (row_offset + r), so results do not
// depend on how a split is cut into batches.
template <class T, class Dist, class F>
Tensor<T> per_row_noise(const Tensor<T>& x0, std::uint64_t seed, std::uint64_t row_offset, Dist dist, F f) {
  Tensor<T> out = x0;
  const std::size_t rows = x0.rank() == 0 ? 1 : x0.dim(0);
  const std::size_t per = x0.size() / rows;
  for (std::size_t r = 0; r < rows; ++r) {
    Rng rng(derive_seed(seed, row_offset + r));
    for (std::size_t i = r * per; i < (r + 1) * per; ++i) out[i] = f(out[i], static_cast<T>(dist(rng)));
  }
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> gaussian_noise(const Tensor<T>& x0, T eps, std::uint64_t seed, std::uint64_t row_offset = 0) {
  if (eps < T(0)) throw ConfigError("gaussian_noise: eps must be non-negative");
  return detail::per_row_noise(x0, seed, row_offset, std::normal_distribution<double>(0.0, 1.0),
                               [eps](T v, T z) { return std::clamp(v + eps * z, T(0), T(1)); });
}

template <class T>
Tensor<T> fgsm(const InputGradFn<T>& grad, const Tensor<T>& x0, T eps) {
  if (eps < T(0)) throw ConfigError("fgsm: eps must be non-negative");
  if (eps == T(0)) return x0;
  const Tensor<T> s = sign_of(grad(x0));
  Tensor<T> out = x0;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x0[i] + eps * s[i], T(0), T(1));
  return out;
}

namespace detail {

template <class T, class Direction>
Tensor<T> iterate_projected(Direction direction, const Tensor<T>& x0, Tensor<T> x, T eps, T alpha, std::size_t steps) {
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor<T> s = direction(x);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += alpha * s[i];
    x = clip_project(x, x0, eps);
  }
  return x;
}

}  // namespace detail

template <class T>
Tensor<T> bim(const InputGradFn<T>& grad, const Tensor<T>& x0, T eps, T alpha, std::size_t steps) {
  if (eps < T(0) || alpha < T(0)) throw ConfigError("bim: eps and alpha must be non-negative");
  return detail::iterate_projected([&](const Tensor<T>& x) { return sign_of(grad(x)); }, x0, x0, eps, alpha, steps);
}

/// BIM from a uniform random start inside the eps-ball.
template <class T>
Tensor<T> pgd(const InputGradFn<T>& grad, const Tensor<T>& x0, T eps, T alpha, std::size_t steps, std::uint64_t seed,
              std::uint64_t row_offset = 0) {
  if (eps < T(0) || alpha < T(0)) throw ConfigError("pgd: eps and alpha must be non-negative");
  Tensor<T> start = detail::per_row_noise(x0, seed, row_offset, std::uniform_real_distribution<double>(-1.0, 1.0),
                                          [eps](T v, T u) { return v + eps * u; });
  start = clip_project(start, x0, eps);
  return detail::iterate_projected([&](const Tensor<T>& x) { return sign_of(grad(x)); }, x0, std::move(start), eps, alpha,
                                   steps);
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.raw() + b * K;
    const T m = *std::max_element(row, row + K);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - m);
    for (std::size_t k = 0; k < K; ++k) p[b * K + k] = std::exp(row[k] - m) / s;
  }
  return p;
}

/// sign of grad_x [ CE(h(x), y) + KL(p_clean || softmax h(x)) / rho ], with
/// p_clean held constant.
template <class T>
Tensor<T> tpgd_direction(const LogitsFn<T>& logits_fn, const std::vector<int>& labels, const Tensor<T>& x,
                         const Tensor<T>& p_clean, T rho) {
  Tape<T> tape;
  Var<T> xv = tape.leaf(x, true);
  Var<T> z = logits_fn(tape, xv);
  T entropy = 0;
  for (T p : p_clean.data())
    if (p > T(0)) entropy -= p * std::log(p);
  entropy /= static_cast<T>(p_clean.dim(0));
  Var<T> ce = softmax_cross_entropy<T>(z, labels);
  Var<T> kl = add_scalar(softmax_cross_entropy<T>(z, p_clean), -entropy);
  Var<T> loss = add(ce, mul_scalar(kl, T(1) / rho));
  return sign_of(tape.backward(loss).at(xv));
}

template <class T>
Tensor<T> tpgd(const LogitsFn<T>& logits_fn, const std::vector<int>& labels, const Tensor<T>& x0, T eps, T alpha,
               std::size_t steps, T rho, std::uint64_t seed, std::uint64_t row_offset = 0) {
  if (eps < T(0) || alpha < T(0)) throw ConfigError("tpgd: eps and alpha must be non-negative");
  if (!(rho > T(0))) throw ConfigError("tpgd: rho must be positive");
  Tensor<T> p_clean;
  {
    Tape<T> tape;
    tape.set_recording(false);
    p_clean = softmax_rows(logits_fn(tape, tape.leaf(x0, false)).value());
  }
  Tensor<T> start = detail::per_row_noise(x0, seed, row_offset, std::normal_distribution<double>(0.0, 1.0),
                                          [](T v, T z) { return v + T(0.001) * z; });
  start = clip_project(start, x0, eps);
  return detail::iterate_projected([&](const Tensor<T>& x) { return tpgd_direction(logits_fn, labels, x, p_clean, rho); },
                                   x0, std::move(start), eps, alpha, steps);
}

// ---------------------------------------------------------------------------
// Model adapters

/// Eval-mode logits of a frozen model.
template <class T>
LogitsFn<T> model_logits_fn(const Model& model, Parameters<T>& params) {
  return [&model, &params](Tape<T>& tape, const Var<T>& x) {
    BoundParams<T> bp = bind(tape, params, false);
    return forward(model, params, bp, x, {Mode::eval, false}).logits;
  };
}

/// grad_x of mean cross-entropy under `logits_fn`.
template <class T>
InputGradFn<T> cross_entropy_gradient(LogitsFn<T> logits_fn, std::vector<int> labels) {
  return [logits_fn = std::move(logits_fn), labels = std::move(labels)](const Tensor<T>& x) {
    Tape<T> tape;
    Var<T> xv = tape.leaf(x, true);
    Var<T> loss = softmax_cross_entropy<T>(logits_fn(tape, xv), labels);
    return tape.backward(loss).at(xv);
  };
}

/// Runs `spec` against a classifier. `row_offset` is the split index of the
/// batch's first row; random starts are drawn per sample from spec.seed.
template <class T>
Tensor<T> run_attack(const AttackSpec& spec, const LogitsFn<T>& logits_fn, const std::vector<int>& labels,
                     const Tensor<T>& x0, std::uint64_t row_offset = 0) {
  validate(spec);
  const T eps = static_cast<T>(spec.eps), alpha = static_cast<T>(spec.alpha);
  const std::uint64_t seed = spec.seed;
  switch (spec.kind) {
    case AttackKind::natural: return x0;
    case AttackKind::gn: return gaussian_noise(x0, eps, seed, row_offset);
    case AttackKind::fgsm: return fgsm(cross_entropy_gradient(logits_fn, labels), x0, eps);
    case AttackKind::bim: return bim(cross_entropy_gradient(logits_fn, labels), x0, eps, alpha, spec.steps);
    case AttackKind::pgd: return pgd(cross_entropy_gradient(logits_fn, labels), x0, eps, alpha, spec.steps, seed, row_offset);
    case AttackKind::tpgd:
      return tpgd(logits_fn, labels, x0, eps, alpha, spec.steps, static_cast<T>(spec.rho), seed, row_offset);
  }
  throw ConfigError("unhandled attack kind");
}

}  // namespace odgq
