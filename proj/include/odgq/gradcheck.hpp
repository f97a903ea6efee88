#pragma once

// Finite-difference gradient checks for every differentiable primitive and
// for a small full model, in 64-bit mode.

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "odgq/autodiff.hpp"
#include "odgq/mmd.hpp"
#include "odgq/model.hpp"
#include "odgq/random.hpp"

namespace odgq {

struct GradCheckCase {
  std::string name;
  std::function<Var<double>(Tape<double>&, Var<double>)> builder;
  Tensor<double> point;
};

struct GradCheckResult {
  std::string name;
  double error = 0;
  bool passed = false;
};

namespace detail {

// Uniform values whose magnitude stays at least `gap` away from zero.
inline Tensor<double> away_from_zero(const Shape& s, Rng& rng, double gap = 0.1) {
  std::uniform_real_distribution<double> u(gap, 1.0);
  std::bernoulli_distribution neg(0.5);
  Tensor<double> t(s);
  for (double& v : t.data()) v = neg(rng) ? -u(rng) : u(rng);
  return t;
}

// Smallest |input| over all relu nodes on the tape.
template <class T>
double min_kink_distance(const Tape<T>& tape) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const auto& n = tape.node(i);
    if (n.kind != OpKind::relu) continue;
    for (T v : tape.node(n.inputs.at(0)).value.data()) m = std::min(m, std::abs(static_cast<double>(v)));
  }
  return m;
}

}  // namespace detail

inline std::vector<GradCheckCase> gradcheck_cases(std::uint64_t seed = 0) {
  using V = Var<double>;
  using Tp = Tape<double>;
  Rng rng(derive_seed(seed, 0x9c));
  auto normal = [&](const Shape& s) { return normal_tensor<double>(s, rng, 0.0, 1.0); };
  std::vector<GradCheckCase> c;

  const Tensor<double> A = normal({3, 4}), Bm = normal({4, 2});
  c.push_back({"matmul (lhs)", [Bm](Tp& t, V x) { return sum(square(matmul(x, t.constant(Bm)))); }, A});
  c.push_back({"matmul (rhs)", [A](Tp& t, V x) { return sum(square(matmul(t.constant(A), x))); }, Bm});

  const Tensor<double> img = normal({2, 2, 5, 5}), ker = normal({3, 2, 3, 3});
  c.push_back({"conv2d (input, stride 2, pad 1)",
               [ker](Tp& t, V x) { return sum(square(conv2d(x, t.constant(ker), {2, 1}))); }, img});
  c.push_back({"conv2d (kernel)", [img](Tp& t, V x) { return sum(square(conv2d(t.constant(img), x, {1, 1}))); }, ker});

  const Tensor<double> M = normal({3, 4}), bias = normal({4});
  const Tensor<double> W4 = normal({3, 4});
  c.push_back({"add (row-broadcast bias)", [M, W4](Tp& t, V x) { return sum(mul(add(t.constant(M), x), t.constant(W4))); }, bias});
  c.push_back({"add", [M](Tp& t, V x) { return sum(square(add(x, t.constant(M)))); }, normal({3, 4})});
  c.push_back({"sub", [M](Tp& t, V x) { return sum(square(sub(t.constant(M), x))); }, normal({3, 4})});
  c.push_back({"mul", [M](Tp& t, V x) { return sum(square(mul(x, t.constant(M)))); }, normal({3, 4})});
  c.push_back({"mul-scalar", [W4](Tp& t, V x) { return sum(mul(mul_scalar(x, -1.7), t.constant(W4))); }, normal({3, 4})});
  c.push_back({"add-scalar", [](Tp&, V x) { return sum(square(add_scalar(x, 0.3))); }, normal({3, 4})});
  c.push_back({"relu", [W4](Tp& t, V x) { return sum(mul(relu(x), t.constant(W4))); }, detail::away_from_zero({3, 4}, rng)});

  const Tensor<double> bn_in = normal({4, 3, 2, 2}), bn_w = normal({4, 3, 2, 2});
  const Tensor<double> gamma = normal({3}), beta = normal({3});
  auto bn_state = [] {
    auto m = std::make_shared<Tensor<double>>(Shape{3}, 0.1);
    auto v = std::make_shared<Tensor<double>>(Shape{3}, 1.3);
    return std::make_pair(m, v);
  };
  auto bn_case = [&](const std::string& name, int which, bool training) {
    auto [rm, rv] = bn_state();
    GradCheckCase k;
    k.name = name;
    k.builder = [=](Tp& t, V x) {
      BatchNormAttrs a;
      a.training = training;
      a.update_running_stats = false;
      BatchNormState<double> st{rm.get(), rv.get()};
      V in = which == 0 ? x : t.constant(bn_in);
      V g = which == 1 ? x : t.constant(gamma);
      V b = which == 2 ? x : t.constant(beta);
      return sum(mul(batchnorm(in, g, b, st, a), t.constant(bn_w)));
    };
    k.point = which == 0 ? bn_in : which == 1 ? gamma : beta;
    c.push_back(k);
  };
  bn_case("batchnorm (input, train)", 0, true);
  bn_case("batchnorm (gamma)", 1, true);
  bn_case("batchnorm (beta)", 2, true);
  bn_case("batchnorm (input, eval)", 0, false);

  const Tensor<double> pool_in = normal({2, 2, 4, 4});
  const Tensor<double> pool_w2 = normal({2, 2, 2, 2}), pool_wg = normal({2, 2, 1, 1});
  c.push_back({"avgpool2d (2x2)", [pool_w2](Tp& t, V x) { return sum(mul(avgpool2d(x, 2), t.constant(pool_w2))); }, pool_in});
  c.push_back({"avgpool2d (global)", [pool_wg](Tp& t, V x) { return sum(mul(avgpool2d(x), t.constant(pool_wg))); }, pool_in});
  const Tensor<double> flat_w = normal({2, 8});
  c.push_back({"flatten", [flat_w](Tp& t, V x) { return sum(mul(flatten(x), t.constant(flat_w))); }, normal({2, 2, 2, 2})});

  const std::vector<int> labels{2, 0, 1};
  c.push_back({"softmax-cross-entropy (labels)",
               [labels](Tp&, V x) { return softmax_cross_entropy<double>(x, labels); }, normal({3, 4})});
  Tensor<double> soft({3, 4});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < 4; ++k) soft[r * 4 + k] = 0.1 + 0.1 * static_cast<double>((r + k) % 4);
  c.push_back({"softmax-cross-entropy (soft targets)",
               [soft](Tp&, V x) { return softmax_cross_entropy<double>(x, soft); }, normal({3, 4})});

  c.push_back({"sum", [W4](Tp& t, V x) { return sum(mul(x, t.constant(W4))); }, normal({3, 4})});
  c.push_back({"mean", [](Tp&, V x) { return mean(square(x)); }, normal({3, 4})});
  c.push_back({"exp", [](Tp&, V x) { return sum(exp(x)); }, normal({3, 4})});
  c.push_back({"square", [W4](Tp& t, V x) { return sum(mul(square(x), t.constant(W4))); }, normal({3, 4})});
  Tensor<double> pos = normal({3, 4});
  for (double& v : pos.data()) v = 0.5 + std::abs(v);
  c.push_back({"sqrt", [W4](Tp& t, V x) { return sum(mul(sqrt(x), t.constant(W4))); }, pos});

  const Tensor<double> P = normal({4, 3});
  c.push_back({"pairwise-sq-dist (lhs)", [P](Tp& t, V x) { return sum(exp(mul_scalar(pairwise_sq_dist(x, t.constant(P)), -0.1))); },
               normal({3, 3})});
  c.push_back({"pairwise-sq-dist (rhs)", [P](Tp& t, V x) { return sum(exp(mul_scalar(pairwise_sq_dist(t.constant(P), x), -0.1))); },
               normal({2, 3})});

  Tensor<double> clip_pt = normal({3, 4});
  for (double& v : clip_pt.data()) v = std::abs(std::abs(v) - 0.5) < 0.05 ? v + 0.2 : v;
  c.push_back({"clip", [W4](Tp& t, V x) { return sum(mul(clip(x, -0.5, 0.5), t.constant(W4))); }, clip_pt});
  const Tensor<double> sl_w = normal({2, 4});
  c.push_back({"slice-rows", [sl_w](Tp& t, V x) { return sum(mul(slice_rows(x, 1, 3), t.constant(sl_w))); }, normal({4, 4})});

  const Tensor<double> Tf = normal({4, 3});
  KernelConfig kc;
  kc.sigma = 1.5;
  c.push_back({"mmd-squared (fixed bandwidth)", [Tf, kc](Tp& t, V x) { return mmd_squared(x, t.constant(Tf), kc); }, normal({3, 3})});

  // Full graph: conv -> bn -> relu -> residual stages -> pool -> linear -> CE.
  ArchConfig arch;
  arch.in_height = arch.in_width = 6;
  arch.widths = {2, 3};
  arch.classes = 3;
  const Model model = make_model(arch);
  auto params = std::make_shared<Parameters<double>>(init_parameters<double>(model, seed));
  // Small non-zero bias keeps logits generic.
  for (double& v : params->at("fc.bias").data()) v = 0.05;
  const std::vector<int> ys{0, 2, 1, 1};
  // Central differences are meaningless across a relu kink, so the input is
  // redrawn until every relu pre-activation is at least 2e-3 from zero.
  Tensor<double> xin;
  for (int attempt = 0;; ++attempt) {
    xin = uniform_tensor<double>({4, 1, 6, 6}, rng, 0.0, 1.0);
    Tape<double> t;
    BoundParams<double> bp = bind(t, *params, true);
    forward(model, *params, bp, t.leaf(xin, true), {Mode::train, false});
    if (detail::min_kink_distance(t) >= 2e-3 || attempt == 200) break;
  }
  c.push_back({"model graph (input)",
               [model, params, ys](Tp& t, V x) {
                 BoundParams<double> bp = bind(t, *params, false);
                 return cross_entropy(forward(model, *params, bp, x, {Mode::train, false}).logits, ys);
               },
               xin});
  c.push_back({"model graph (stem weight)",
               [model, params, ys, xin](Tp& t, V x) {
                 BoundParams<double> bp = bind(t, *params, false);
                 bp.vars.insert_or_assign("stem.conv.weight", x);
                 return cross_entropy(forward(model, *params, bp, t.constant(xin), {Mode::train, false}).logits, ys);
               },
               params->at("stem.conv.weight")});
  c.push_back({"model graph (fc weight, eval)",
               [model, params, ys, xin](Tp& t, V x) {
                 BoundParams<double> bp = bind(t, *params, false);
                 bp.vars.insert_or_assign("fc.weight", x);
                 return cross_entropy(forward(model, *params, bp, t.constant(xin), {Mode::eval, false}).logits, ys);
               },
               params->at("fc.weight")});
  return c;
}

inline std::vector<GradCheckResult> run_gradcheck(double tolerance = 1e-4, double step = 1e-4, std::uint64_t seed = 0) {
  std::vector<GradCheckResult> out;
  for (auto& c : gradcheck_cases(seed)) {
    GradCheckResult r;
    r.name = c.name;
    r.error = finite_diff_check(c.builder, c.point, step);
    r.passed = r.error <= tolerance;
    out.push_back(r);
  }
  return out;
}

}  // namespace odgq
