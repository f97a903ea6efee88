#pragma once

// Online domain-generalization adversarial training (ODG-Q) with the global
// perturbation roulette, plus the natural-training baseline.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "odgq/attacks.hpp"
#include "odgq/autodiff.hpp"
#include "odgq/checkpoint.hpp"
#include "odgq/data.hpp"
#include "odgq/mmd.hpp"
#include "odgq/model.hpp"
#include "odgq/random.hpp"
#include "odgq/tensor.hpp"

namespace odgq {

struct TrainConfig {
  std::size_t natural_epochs = 40;         // N_e; ODG-Q runs floor(N_e / 2)
  std::optional<std::size_t> run_epochs;   // overrides either budget
  std::size_t batch = 128;
  double lr = 0.1;
  double lr_decay = 0.1;
  std::size_t lr_decay_every = 0;  // 0: ceil(run epochs / 3)
  double momentum = 0.9;
  double weight_decay = 0.0;
  double lambda = 3.0;
  double eps = 8.0 / 255.0;
  std::optional<double> eps_local;  // unset: eps
  std::size_t nk = 4;
  bool reclip_total = false;
  bool shuffle = true;
  bool augment = false;
  bool check_invariants = true;
  std::uint64_t seed = 0;
  KernelConfig kernel{};
};

inline double default_lambda(int weight_bits) { return weight_bits == 1 ? 0.003 : 3.0; }

inline void validate(const TrainConfig& c) {
  if (c.batch == 0) throw ConfigError("batch size must be at least 1");
  if (c.nk == 0) throw ConfigError("N_k must be at least 1");
  if (!(c.lr > 0)) throw ConfigError("learning rate must be positive");
  if (!(c.eps >= 0)) throw ConfigError("eps must be non-negative");
  if (c.eps_local && !(*c.eps_local >= 0)) throw ConfigError("eps_local must be non-negative");
  if (!(c.lambda >= 0)) throw ConfigError("lambda must be non-negative");
  if (!(c.momentum >= 0 && c.momentum < 1)) throw ConfigError("momentum must lie in [0,1)");
}

inline std::size_t natural_epoch_count(const TrainConfig& c) { return c.run_epochs.value_or(c.natural_epochs); }
inline std::size_t odgq_epoch_count(const TrainConfig& c) { return c.run_epochs.value_or(c.natural_epochs / 2); }

/// Step decay: lr * decay^floor(epoch / interval).
inline double learning_rate(const TrainConfig& c, std::size_t epoch, std::size_t run_epochs) {
  const std::size_t every = c.lr_decay_every ? c.lr_decay_every : std::max<std::size_t>(1, (run_epochs + 2) / 3);
  return c.lr * std::pow(c.lr_decay, static_cast<double>(epoch / every));
}

// ---------------------------------------------------------------------------
// Perturbation set

template <class T>
struct PerturbationSet {
  Tensor<T> store;  // [N_k, B, C, H, W]
  // increments[j][e]: accumulation updates slot j received during epoch e
  std::vector<std::vector<std::size_t>> increments;

  std::size_t slots() const { return store.dim(0); }
  std::size_t batch() const { return store.dim(1); }
  std::size_t slot_size() const { return store.size() / slots(); }
  Shape sample_shape() const { return {store.dim(2), store.dim(3), store.dim(4)}; }

  T max_abs_value() const { return max_abs(store); }
};

template <class T>
PerturbationSet<T> make_perturbation_set(std::size_t nk, std::size_t batch, const Shape& sample) {
  if (nk == 0) throw ConfigError("N_k must be at least 1");
  if (sample.size() != 3) throw ShapeError("perturbation set needs a (C,H,W) sample shape");
  PerturbationSet<T> p;
  p.store = Tensor<T>({nk, batch, sample[0], sample[1], sample[2]});
  p.increments.assign(nk, {});
  return p;
}

/// clamp01(x0 + clip(store[k, :rows], -eps, eps)); store unmodified.
template <class T>
Tensor<T> apply_global(const Tensor<T>& x0, const PerturbationSet<T>& pset, std::size_t k, T eps) {
  if (k >= pset.slots()) throw ShapeError("apply_global: slot " + std::to_string(k) + " out of range");
  const std::size_t rows = x0.dim(0);
  if (rows > pset.batch()) {
    throw ShapeError("apply_global: batch of " + std::to_string(rows) + " rows exceeds slot capacity " +
                     std::to_string(pset.batch()));
  }
  if (Shape{x0.dim(1), x0.dim(2), x0.dim(3)} != pset.sample_shape()) throw ShapeError("apply_global: sample shape mismatch");
  const T* slot = pset.store.raw() + k * pset.slot_size();
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = std::clamp(x0[i] + std::clamp(slot[i], -eps, eps), T(0), T(1));
  return out;
}

/// eps_l * sign(grad), sign(0) = 0.
template <class T>
Tensor<T> local_perturbation(const InputGradFn<T>& grad, const Tensor<T>& x_g, T eps_l) {
  if (eps_l < T(0)) throw ConfigError("local magnitude must be non-negative");
  Tensor<T> s = sign_of(grad(x_g));
  for (T& v : s.data()) v *= eps_l;
  return s;
}

/// Input gradient of the task loss in train mode (batch statistics) without
/// touching the running statistics.
template <class T>
InputGradFn<T> train_mode_input_gradient(const Model& model, Parameters<T>& params, const std::vector<int>& labels) {
  return [&model, &params, &labels](const Tensor<T>& x) {
    Tape<T> tape;
    BoundParams<T> bp = bind(tape, params, false);
    Var<T> xv = tape.leaf(x, true);
    Var<T> loss = cross_entropy(forward(model, params, bp, xv, {Mode::train, false}).logits, labels);
    return tape.backward(loss).at(xv);
  };
}

template <class T>
Tensor<T> local_perturbation(const Model& model, Parameters<T>& params, const Tensor<T>& x_g, const std::vector<int>& y,
                             T eps_l) {
  return local_perturbation(train_mode_input_gradient(model, params, y), x_g, eps_l);
}

/// P[k:N_k] += p_l on the leading rows. `epoch` indexes the bookkeeping matrix.
template <class T>
void roulette_update(PerturbationSet<T>& pset, std::size_t k, const Tensor<T>& p_l, std::size_t epoch) {
  if (k >= pset.slots()) throw ShapeError("roulette_update: slot " + std::to_string(k) + " out of range");
  if (p_l.rank() != 4 || p_l.dim(0) > pset.batch() || Shape{p_l.dim(1), p_l.dim(2), p_l.dim(3)} != pset.sample_shape()) {
    throw ShapeError("roulette_update: perturbation " + shape_str(p_l.shape()) + " does not fit slot " +
                     shape_str(slice_leading(pset.store, 0, 1).shape()));
  }
  for (std::size_t j = k; j < pset.slots(); ++j) {
    T* slot = pset.store.raw() + j * pset.slot_size();
    for (std::size_t i = 0; i < p_l.size(); ++i) slot[i] += p_l[i];
    auto& row = pset.increments[j];
    if (row.size() <= epoch) row.resize(epoch + 1, 0);
    ++row[epoch];
  }
}

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
struct OptimizerState {
  std::map<std::string, Tensor<T>> momentum;
  std::size_t step = 0;
  double lr = 0.1;
};

/// v = m v + (g + wd w); w -= lr v.
template <class T>
void sgd_step(Parameters<T>& params, const BoundParams<T>& bp, const GradientMap<T>& grads, OptimizerState<T>& opt,
              const TrainConfig& cfg) {
  const T lr = static_cast<T>(opt.lr), m = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay);
  for (const auto& name : params.trainable) {
    Tensor<T>& w = params.at(name);
    const Tensor<T>& g = grads.at(bp(name));
    auto [it, fresh] = opt.momentum.try_emplace(name, w.shape());
    Tensor<T>& v = it->second;
    if (v.shape() != w.shape()) throw ShapeError("momentum buffer for '" + name + "' does not match its parameter");
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = m * v[i] + g[i] + wd * w[i];
      w[i] -= lr * v[i];
    }
  }
  ++opt.step;
}

// ---------------------------------------------------------------------------
// Steps

struct StepMetrics {
  double task_loss = 0;
  double mmd_loss = 0;
  std::size_t correct = 0;
  std::size_t rows = 0;
};

namespace detail {

inline std::size_t count_correct(const std::vector<int>& pred, const std::vector<int>& y) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < y.size(); ++i) c += pred[i] == y[i];
  return c;
}

template <class T>
void check_adversarial_batch(const Tensor<T>& x_adv, const Tensor<T>& x0, T bound) {
  const T tol = T(1e-6);
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (!(x_adv[i] >= T(0) && x_adv[i] <= T(1))) throw NumericError("adversarial input left [0,1]");
    if (std::abs(x_adv[i] - x0[i]) > bound + tol) {
      throw NumericError("adversarial input exceeds its budget: |dx| = " + std::to_string(std::abs(x_adv[i] - x0[i])) +
                         " > " + std::to_string(bound));
    }
  }
}

}  // namespace detail

template <class T>
StepMetrics natural_step(const Model& model, Parameters<T>& params, OptimizerState<T>& opt, const Tensor<T>& x0,
                         const std::vector<int>& y, const TrainConfig& cfg) {
  Tape<T> tape;
  BoundParams<T> bp = bind(tape, params, true);
  Var<T> xv = tape.leaf(x0, false);
  ModelOutput<T> out = forward(model, params, bp, xv, {Mode::train, true});
  Var<T> loss = cross_entropy(out.logits, y);
  StepMetrics m;
  m.task_loss = static_cast<double>(loss.value().item());
  m.correct = detail::count_correct(argmax_rows(out.logits.value()), y);
  m.rows = y.size();
  const GradientMap<T> g = tape.backward(loss);
  sgd_step(params, bp, g, opt, cfg);
  return m;
}

/// One ODG-Q batch: global perturbation, one-step local perturbation,
/// roulette update, then a weight update on task + lambda * MMD.
template <class T>
StepMetrics odgq_step(const Model& model, Parameters<T>& params, OptimizerState<T>& opt, PerturbationSet<T>& pset,
                      std::size_t k, const Tensor<T>& x0, const std::vector<int>& y, const TrainConfig& cfg,
                      std::size_t epoch = 0) {
  const T eps = static_cast<T>(cfg.eps);
  const T eps_l = static_cast<T>(cfg.eps_local.value_or(cfg.eps));

  const Tensor<T> x_g = apply_global(x0, pset, k, eps);
  const Tensor<T> p_l = local_perturbation(model, params, x_g, y, eps_l);
  roulette_update(pset, k, p_l, epoch);
  Tensor<T> x_adv(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) x_adv[i] = std::clamp(x_g[i] + std::clamp(p_l[i], -eps, eps), T(0), T(1));
  if (cfg.reclip_total) x_adv = clip_project(x_adv, x0, eps);
  if (cfg.check_invariants) detail::check_adversarial_batch(x_adv, x0, cfg.reclip_total ? eps : T(2) * eps);

  Tape<T> tape;
  BoundParams<T> bp = bind(tape, params, true);
  const std::size_t B = y.size();
  StepMetrics m;
  m.rows = B;
  Var<T> loss;
  if (cfg.lambda == 0) {
    ModelOutput<T> out = forward(model, params, bp, tape.leaf(x_adv, false), {Mode::train, true});
    loss = cross_entropy(out.logits, y);
    m.task_loss = static_cast<double>(loss.value().item());
    m.correct = detail::count_correct(argmax_rows(out.logits.value()), y);
  } else {
    ModelOutput<T> out = forward(model, params, bp, tape.leaf(concat_leading(x_adv, x0), false), {Mode::train, true});
    Var<T> logits_adv = slice_rows(out.logits, 0, B);
    Var<T> task = cross_entropy(logits_adv, y);
    Var<T> mmd = mmd_squared(slice_rows(out.features, 0, B), slice_rows(out.features, B, 2 * B), cfg.kernel);
    loss = add(task, mul_scalar(mmd, static_cast<T>(cfg.lambda)));
    m.task_loss = static_cast<double>(task.value().item());
    m.mmd_loss = static_cast<double>(mmd.value().item());
    m.correct = detail::count_correct(argmax_rows(logits_adv.value()), y);
  }
  const GradientMap<T> g = tape.backward(loss);
  sgd_step(params, bp, g, opt, cfg);
  return m;
}

// ---------------------------------------------------------------------------
// Epoch loops

struct EpochRecord {
  std::size_t epoch = 0;
  std::optional<std::size_t> k;  // roulette index (ODG-Q only)
  double lr = 0;
  double task_loss = 0;
  double mmd_loss = 0;
  double train_accuracy = 0;
  double wall_seconds = 0;
  double max_store_abs = 0;
  std::uint64_t backward_passes = 0;
  std::size_t batches = 0;
};

template <class T>
struct TrainResult {
  Parameters<T> params;
  std::vector<EpochRecord> log;
  std::optional<PerturbationSet<T>> pset;
  OptimizerState<T> opt;
  double total_seconds = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

namespace detail {

template <class T, class Step>
TrainResult<T> run_epochs(const Model& model, Parameters<T> params, const Dataset<T>& ds, const TrainConfig& cfg,
                          std::size_t epochs, Step step, const EpochCallback& on_epoch) {
  if (ds.size() == 0) throw ConfigError("training dataset is empty");
  validate(cfg);
  check_parameters(model, params);
  TrainResult<T> res;
  res.opt.lr = cfg.lr;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t bw0 = EngineStats::backward_passes().load();
    res.opt.lr = learning_rate(cfg, e, epochs);
    EpochRecord rec;
    rec.epoch = e;
    rec.lr = res.opt.lr;
    double task = 0, mmd = 0;
    std::size_t correct = 0, rows = 0;
    Rng aug(derive_seed(cfg.seed, 0xa09e0000ULL + e));
    for (const auto& idx : batches(ds.size(), cfg.batch, cfg.seed, cfg.shuffle, e)) {
      auto [x, y] = gather(ds, idx);
      if (cfg.augment) augment_pad_crop_flip(x, aug);
      const StepMetrics m = step(params, res, x, y, e, rec);
      task += m.task_loss * static_cast<double>(m.rows);
      mmd += m.mmd_loss * static_cast<double>(m.rows);
      correct += m.correct;
      rows += m.rows;
      ++rec.batches;
    }
    rec.task_loss = task / static_cast<double>(rows);
    rec.mmd_loss = mmd / static_cast<double>(rows);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(rows);
    rec.backward_passes = EngineStats::backward_passes().load() - bw0;
    if (res.pset) rec.max_store_abs = static_cast<double>(res.pset->max_abs_value());
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  res.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  res.params = std::move(params);
  return res;
}

}  // namespace detail

template <class T>
TrainResult<T> train_natural(const Model& model, Parameters<T> params, const Dataset<T>& ds, const TrainConfig& cfg,
                             const EpochCallback& on_epoch = {}) {
  auto step = [&](Parameters<T>& p, TrainResult<T>& res, const Tensor<T>& x, const std::vector<int>& y, std::size_t,
                  EpochRecord&) { return natural_step(model, p, res.opt, x, y, cfg); };
  return detail::run_epochs(model, std::move(params), ds, cfg, natural_epoch_count(cfg), step, on_epoch);
}

/// Runs floor(N_e / 2) epochs (or cfg.run_epochs); k = epoch mod N_k.
template <class T>
TrainResult<T> train_odgq(const Model& model, Parameters<T> params, const Dataset<T>& ds, const TrainConfig& cfg,
                          const EpochCallback& on_epoch = {}) {
  std::size_t k = 0;
  std::size_t current_epoch = 0;
  auto step = [&](Parameters<T>& p, TrainResult<T>& res, const Tensor<T>& x, const std::vector<int>& y, std::size_t e,
                  EpochRecord& rec) {
    if (!res.pset) res.pset = make_perturbation_set<T>(cfg.nk, cfg.batch, ds.sample_shape());
    if (e != current_epoch) {
      current_epoch = e;
      k = (k + 1) % cfg.nk;
    }
    rec.k = k;
    return odgq_step(model, p, res.opt, *res.pset, k, x, y, cfg, e);
  };
  TrainResult<T> res = detail::run_epochs(model, std::move(params), ds, cfg, odgq_epoch_count(cfg), step, on_epoch);
  if (!res.pset) res.pset = make_perturbation_set<T>(cfg.nk, cfg.batch, ds.sample_shape());
  for (auto& row : res.pset->increments) row.resize(res.log.size(), 0);
  return res;
}

// ---------------------------------------------------------------------------
// Perturbation set persistence (same container as model checkpoints)

template <class T>
Checkpoint perturbation_checkpoint(const PerturbationSet<T>& pset, const std::string& config_text) {
  Checkpoint ck;
  ck.config_text = config_text;
  ck.tensors.push_back({"perturbation.store", dtype_of<T>(), pset.store.template cast<double>()});
  std::size_t epochs = 0;
  for (const auto& r : pset.increments) epochs = std::max(epochs, r.size());
  if (epochs > 0) {
    Tensor<double> inc({pset.slots(), epochs});
    for (std::size_t j = 0; j < pset.slots(); ++j)
      for (std::size_t e = 0; e < pset.increments[j].size(); ++e) inc[j * epochs + e] = static_cast<double>(pset.increments[j][e]);
    ck.tensors.push_back({"perturbation.increments", DType::f64, std::move(inc)});
  }
  return ck;
}

template <class T>
PerturbationSet<T> perturbation_set_from(const Checkpoint& ck) {
  const CheckpointTensor* s = ck.find("perturbation.store");
  if (!s) throw FormatError("checkpoint holds no perturbation set");
  if (s->values.rank() != 5) throw ShapeError("perturbation store must be rank 5, got " + shape_str(s->values.shape()));
  PerturbationSet<T> p;
  p.store = s->values.template cast<T>();
  p.increments.assign(p.slots(), {});
  if (const CheckpointTensor* inc = ck.find("perturbation.increments")) {
    const std::size_t epochs = inc->values.dim(1);
    for (std::size_t j = 0; j < p.slots() && j < inc->values.dim(0); ++j)
      for (std::size_t e = 0; e < epochs; ++e) p.increments[j].push_back(static_cast<std::size_t>(inc->values[j * epochs + e]));
  }
  return p;
}

}  // namespace odgq
