#pragma once

// Robust-accuracy evaluation (white-box and transfer black-box), loss
// surfaces along random/adversarial directions, and the domain-risk bound
// report.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "odgq/attacks.hpp"
#include "odgq/data.hpp"
#include "odgq/mmd.hpp"
#include "odgq/model.hpp"
#include "odgq/trainer.hpp"

namespace odgq {

/// ODGQ_THREADS if set, else the hardware concurrency.
inline std::size_t thread_count() {
  if (const char* env = std::getenv("ODGQ_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls fn(i) for i in [0, n) on up to `threads` workers.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

template <class T>
std::vector<double> per_sample_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<double> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.raw() + b * K;
    const double m = static_cast<double>(*std::max_element(row, row + K));
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(row[k]) - m);
    out[b] = m + std::log(s) - static_cast<double>(row[labels[b]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Robust accuracy

inline std::string attack_label(const AttackSpec& a, bool blackbox) {
  std::string s;
  switch (a.kind) {
    case AttackKind::natural: s = "Natural"; break;
    case AttackKind::gn: s = "GN"; break;
    case AttackKind::fgsm: s = "FGSM"; break;
    case AttackKind::pgd: s = "PGD-" + std::to_string(a.steps); break;
    case AttackKind::bim: s = "BIM-" + std::to_string(a.steps); break;
    case AttackKind::tpgd: s = "TPGD-" + std::to_string(a.steps); break;
  }
  return blackbox ? s + "(B)" : s;
}

struct AttackResult {
  AttackSpec spec;
  bool blackbox = false;
  double robust_accuracy = 0;
  double mean_loss = 0;
  std::size_t samples = 0;
  double seconds = 0;
};

struct EvalReport {
  std::string split;
  std::size_t samples = 0;
  double clean_accuracy = 0;
  std::vector<AttackResult> results;

  const AttackResult* find(AttackKind k, bool blackbox = false) const {
    for (const auto& r : results)
      if (r.spec.kind == k && r.blackbox == blackbox) return &r;
    return nullptr;
  }
};

template <class T>
struct Classifier {
  const Model* model = nullptr;
  Parameters<T>* params = nullptr;
};

struct EvalOptions {
  std::size_t batch = 256;
  std::size_t threads = 1;
  bool whitebox = true;
  bool blackbox = false;
};

namespace detail {

template <class T>
AttackResult attack_split(const AttackSpec& spec, const Classifier<T>& target, const Classifier<T>* source,
                          const Dataset<T>& ds, const EvalOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto bl = batches(ds.size(), opt.batch, 0, false);
  std::vector<std::size_t> correct(bl.size(), 0);
  std::vector<double> loss(bl.size(), 0);
  const LogitsFn<T> attacker = model_logits_fn(source ? *source->model : *target.model,
                                               source ? *source->params : *target.params);
  parallel_for(bl.size(), opt.threads, [&](std::size_t b) {
    auto [x, y] = gather(ds, bl[b]);
    const Tensor<T> xa = run_attack(spec, attacker, y, x, bl[b].front());
    const Tensor<T> logits = predict_logits(*target.model, *target.params, xa);
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < y.size(); ++i) correct[b] += pred[i] == y[i];
    for (double l : per_sample_cross_entropy(logits, y)) loss[b] += l;
  });
  AttackResult r;
  r.spec = spec;
  r.blackbox = source != nullptr;
  r.samples = ds.size();
  std::size_t c = 0;
  double l = 0;
  for (std::size_t b = 0; b < bl.size(); ++b) {
    c += correct[b];
    l += loss[b];
  }
  r.robust_accuracy = static_cast<double>(c) / static_cast<double>(ds.size());
  r.mean_loss = l / static_cast<double>(ds.size());
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace detail

/// Clean accuracy plus one entry per attack. Black-box entries craft the
/// inputs on `surrogate` and score them on `target`.
template <class T>
EvalReport evaluate(const Classifier<T>& target, const Dataset<T>& ds, const std::vector<AttackSpec>& attacks,
                    const std::type_identity_t<Classifier<T>>* surrogate = nullptr, const EvalOptions& opt = {}) {
  if (ds.size() == 0) throw ConfigError("evaluation split is empty");
  if (opt.blackbox && (!surrogate || !surrogate->model || !surrogate->params)) {
    throw ConfigError("black-box evaluation requested but no surrogate model was given");
  }
  for (const auto& a : attacks) validate(a);
  EvalReport rep;
  rep.split = ds.split;
  rep.samples = ds.size();
  AttackSpec nat;
  nat.kind = AttackKind::natural;
  rep.clean_accuracy = detail::attack_split(nat, target, static_cast<const Classifier<T>*>(nullptr), ds, opt).robust_accuracy;
  for (const auto& a : attacks) {
    if (opt.whitebox) rep.results.push_back(detail::attack_split(a, target, static_cast<const Classifier<T>*>(nullptr), ds, opt));
  }
  if (opt.blackbox) {
    for (const auto& a : attacks) {
      if (a.kind != AttackKind::natural) rep.results.push_back(detail::attack_split(a, target, surrogate, ds, opt));
    }
  }
  return rep;
}

inline nlohmann::json to_json(const AttackSpec& a) {
  return {{"kind", attack_name(a.kind)}, {"eps", a.eps}, {"alpha", a.alpha}, {"steps", a.steps}, {"rho", a.rho}, {"seed", a.seed}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["split"] = r.split;
  j["samples"] = r.samples;
  j["clean_accuracy"] = r.clean_accuracy;
  j["results"] = nlohmann::json::array();
  for (const auto& a : r.results) {
    j["results"].push_back({{"label", attack_label(a.spec, a.blackbox)},
                            {"attack", to_json(a.spec)},
                            {"blackbox", a.blackbox},
                            {"robust_accuracy", a.robust_accuracy},
                            {"mean_loss", a.mean_loss},
                            {"samples", a.samples},
                            {"seconds", a.seconds}});
  }
  return j;
}

/// One header row and one value row, accuracies in percent.
inline std::string eval_table(const EvalReport& r) {
  std::vector<std::pair<std::string, double>> cols{{"Natural", r.clean_accuracy}};
  for (const auto& a : r.results) {
    if (a.spec.kind == AttackKind::natural && !a.blackbox) continue;
    cols.emplace_back(attack_label(a.spec, a.blackbox), a.robust_accuracy);
  }
  std::ostringstream head, vals;
  for (const auto& [name, v] : cols) {
    const int w = std::max<int>(9, static_cast<int>(name.size()) + 2);
    head << std::setw(w) << name;
    vals << std::setw(w) << std::fixed << std::setprecision(2) << 100.0 * v;
  }
  return head.str() + "\n" + vals.str() + "\n";
}

// ---------------------------------------------------------------------------
// Loss surfaces

enum class SurfaceLoss { cross_entropy, mmd };

inline const char* surface_loss_name(SurfaceLoss l) { return l == SurfaceLoss::cross_entropy ? "ce" : "mmd"; }

inline SurfaceLoss parse_surface_loss(const std::string& s) {
  if (s == "ce" || s == "cross-entropy") return SurfaceLoss::cross_entropy;
  if (s == "mmd") return SurfaceLoss::mmd;
  throw ConfigError("unknown surface loss '" + s + "'");
}

struct SurfaceGrid {
  std::size_t index = 0;
  SurfaceLoss loss = SurfaceLoss::cross_entropy;
  std::string model;
  std::size_t resolution = 0;
  std::vector<double> eps;     // axis values, shared by both directions
  std::vector<double> values;  // [i * resolution + j]: eps1 = eps[i] (random), eps2 = eps[j] (adversarial)
  std::uint64_t seed = 0;

  double at(std::size_t i, std::size_t j) const { return values[i * resolution + j]; }
  double max() const { return *std::max_element(values.begin(), values.end()); }
};

struct SurfaceOptions {
  double eps_max = 8.0 / 255.0;
  std::size_t resolution = 33;
  std::uint64_t seed = 0;
  std::size_t mmd_batch = 64;  // clean batch size for the MMD variant
  KernelConfig kernel{};
};

/// Losses on x0 + e1 r + e2 d (clamped to [0,1]) over an e1 x e2 grid. r is a
/// seeded random sign pattern, d = sign(grad_x CE) at x0.
template <class T>
SurfaceGrid loss_surface(const Classifier<T>& clf, const Dataset<T>& ds, std::size_t index, SurfaceLoss kind,
                         const SurfaceOptions& opt) {
  if (opt.resolution < 2) throw ConfigError("surface resolution must be at least 2");
  if (!(opt.eps_max >= 0)) throw ConfigError("surface eps_max must be non-negative");
  if (index >= ds.size()) {
    throw ConfigError("image index " + std::to_string(index) + " out of range for a split of " + std::to_string(ds.size()));
  }
  SurfaceGrid g;
  g.index = index;
  g.loss = kind;
  g.resolution = opt.resolution;
  g.seed = opt.seed;
  for (std::size_t i = 0; i < opt.resolution; ++i) {
    g.eps.push_back(static_cast<double>(i) * opt.eps_max / static_cast<double>(opt.resolution - 1));
  }
  const std::size_t n_clean = kind == SurfaceLoss::cross_entropy ? 1 : std::min(opt.mmd_batch, ds.size());
  std::vector<std::size_t> idx(n_clean);
  for (std::size_t i = 0; i < n_clean; ++i) idx[i] = (index + i) % ds.size();
  auto [x0, y] = gather(ds, idx);
  const LogitsFn<T> lf = model_logits_fn(*clf.model, *clf.params);
  const Tensor<T> d = sign_of(cross_entropy_gradient(lf, y)(x0));
  Rng rng(derive_seed(opt.seed, 0x5a7f));
  const Tensor<T> r = random_sign_tensor<T>(x0.shape(), rng);

  auto perturbed = [&](double e1, double e2) {
    Tensor<T> x(x0.shape());
    for (std::size_t p = 0; p < x.size(); ++p) {
      x[p] = std::clamp(static_cast<T>(x0[p] + static_cast<T>(e1) * r[p] + static_cast<T>(e2) * d[p]), T(0), T(1));
    }
    return x;
  };
  const std::size_t R = opt.resolution;
  g.values.assign(R * R, 0.0);
  if (kind == SurfaceLoss::cross_entropy) {
    const std::size_t per = x0.size();
    const std::size_t chunk = 256;
    for (std::size_t start = 0; start < R * R; start += chunk) {
      const std::size_t n = std::min(chunk, R * R - start);
      Tensor<T> xb({n, x0.dim(1), x0.dim(2), x0.dim(3)});
      for (std::size_t c = 0; c < n; ++c) {
        const std::size_t cell = start + c;
        const Tensor<T> x = perturbed(g.eps[cell / R], g.eps[cell % R]);
        std::copy_n(x.raw(), per, xb.raw() + c * per);
      }
      const auto losses = per_sample_cross_entropy(predict_logits(*clf.model, *clf.params, xb), std::vector<int>(n, y[0]));
      std::copy(losses.begin(), losses.end(), g.values.begin() + static_cast<std::ptrdiff_t>(start));
    }
  } else {
    auto features = [&](const Tensor<T>& x) {
      Tape<T> tape;
      tape.set_recording(false);
      BoundParams<T> bp = bind(tape, *clf.params, false);
      return forward(*clf.model, *clf.params, bp, tape.leaf(x, false), {Mode::eval, false}).features.value().template cast<double>();
    };
    const Tensor<double> f0 = features(x0);
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < R; ++j) g.values[i * R + j] = mmd_squared_value(features(perturbed(g.eps[i], g.eps[j])), f0, opt.kernel);
  }
  for (double v : g.values)
    if (!std::isfinite(v)) throw NumericError("non-finite loss on the surface grid");
  return g;
}

/// Rows "eps1,eps2,loss".
inline std::string surface_csv(const SurfaceGrid& g) {
  std::ostringstream os;
  os << "eps1,eps2," << surface_loss_name(g.loss) << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < g.resolution; ++i)
    for (std::size_t j = 0; j < g.resolution; ++j) os << g.eps[i] << ',' << g.eps[j] << ',' << g.at(i, j) << '\n';
  return os.str();
}

inline nlohmann::json to_json(const SurfaceGrid& g) {
  return {{"index", g.index},          {"loss", surface_loss_name(g.loss)}, {"model", g.model},
          {"resolution", g.resolution}, {"eps", g.eps},                      {"seed", g.seed},
          {"max", g.max()},             {"values", g.values}};
}

// ---------------------------------------------------------------------------
// Bound report

struct DomainEntry {
  std::size_t k = 0;  // 0 = natural domain S_0
  double risk = 0;    // 0/1 error
  double d_mmd = 0;   // sqrt of the squared MMD to S_0 on alignment features
};

struct BoundReport {
  std::vector<DomainEntry> domains;  // S_0 .. S_{N_k}
  AttackSpec target;
  double target_risk = 0;
  double lambda_hat = 0;
  double lhs = 0;
  double rhs = 0;
  bool holds = false;
  std::size_t samples = 0;
  std::string lambda_note =
      "lambda_hat = max(0, max_k (R_T - R_Sk) / d_k) over domains with d_k > 0; a fitted descriptive constant, not the "
      "Lipschitz-derived per-domain constant";
};

struct BoundOptions {
  double eps = 8.0 / 255.0;
  std::optional<double> eps_local;
  std::size_t batch = 0;  // 0: perturbation-set batch size
  std::size_t threads = 1;
  KernelConfig kernel{};
};

/// Target risk versus the average source-domain risk plus lambda_hat times the
/// average MMD distance of each source domain to the natural one.
template <class T>
BoundReport bound_report(const Classifier<T>& clf, const PerturbationSet<T>& pset, const Dataset<T>& ds,
                         const AttackSpec& target, const BoundOptions& opt = {}) {
  if (ds.size() == 0) throw ConfigError("bound split is empty");
  if (pset.store.rank() != 5 || pset.slots() == 0) throw ConfigError("bound report needs a perturbation set");
  if (Shape{ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)} != pset.sample_shape()) {
    throw ShapeError("perturbation set sample shape does not match the dataset");
  }
  validate(target);
  const std::size_t nk = pset.slots();
  const std::size_t B = opt.batch ? std::min(opt.batch, pset.batch()) : pset.batch();
  const T eps = static_cast<T>(opt.eps), eps_l = static_cast<T>(opt.eps_local.value_or(opt.eps));
  const LogitsFn<T> lf = model_logits_fn(*clf.model, *clf.params);
  const auto bl = batches(ds.size(), B, 0, false);

  auto features_and_errors = [&](const Tensor<T>& x, const std::vector<int>& y, Tensor<double>& feat, std::size_t& wrong) {
    Tape<T> tape;
    tape.set_recording(false);
    BoundParams<T> bp = bind(tape, *clf.params, false);
    ModelOutput<T> out = forward(*clf.model, *clf.params, bp, tape.leaf(x, false), {Mode::eval, false});
    feat = out.features.value().template cast<double>();
    const auto pred = argmax_rows(out.logits.value());
    wrong = 0;
    for (std::size_t i = 0; i < y.size(); ++i) wrong += pred[i] != y[i];
  };

  const std::size_t F = clf.model->layers.back().in_channels;
  std::vector<Tensor<double>> feats(nk + 1, Tensor<double>({ds.size(), F}));
  std::vector<std::vector<std::size_t>> wrong(nk + 1, std::vector<std::size_t>(bl.size(), 0));
  std::vector<std::size_t> target_wrong(bl.size(), 0);
  parallel_for(bl.size(), opt.threads, [&](std::size_t b) {
    auto [x0, y] = gather(ds, bl[b]);
    const std::size_t row0 = bl[b].front();
    for (std::size_t k = 0; k <= nk; ++k) {
      Tensor<T> x = x0;
      if (k > 0) {
        const Tensor<T> x_g = apply_global(x0, pset, k - 1, eps);
        const Tensor<T> p_l = local_perturbation(cross_entropy_gradient(lf, y), x_g, eps_l);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x_g[i] + std::clamp(p_l[i], -eps, eps), T(0), T(1));
      }
      Tensor<double> f;
      features_and_errors(x, y, f, wrong[k][b]);
      std::copy_n(f.raw(), f.size(), feats[k].raw() + row0 * F);
    }
    const Tensor<T> xt = run_attack(target, lf, y, x0, row0);
    Tensor<double> f;
    features_and_errors(xt, y, f, target_wrong[b]);
  });

  BoundReport rep;
  rep.target = target;
  rep.samples = ds.size();
  const double n = static_cast<double>(ds.size());
  auto total = [](const std::vector<std::size_t>& v) {
    std::size_t s = 0;
    for (std::size_t x : v) s += x;
    return s;
  };
  rep.target_risk = static_cast<double>(total(target_wrong)) / n;
  for (std::size_t k = 0; k <= nk; ++k) {
    DomainEntry d;
    d.k = k;
    d.risk = static_cast<double>(total(wrong[k])) / n;
    d.d_mmd = k == 0 ? 0.0 : std::sqrt(std::max(0.0, mmd_squared_value(feats[k], feats[0], opt.kernel)));
    rep.domains.push_back(d);
  }
  double lam = 0, mean_risk = 0, mean_d = 0;
  for (std::size_t k = 1; k <= nk; ++k) {
    const DomainEntry& d = rep.domains[k];
    if (d.d_mmd > 0) lam = std::max(lam, (rep.target_risk - d.risk) / d.d_mmd);
    mean_risk += d.risk;
    mean_d += d.d_mmd;
  }
  rep.lambda_hat = lam;
  rep.lhs = rep.target_risk;
  rep.rhs = mean_risk / static_cast<double>(nk) + lam * mean_d / static_cast<double>(nk);
  rep.holds = rep.rhs >= rep.lhs;
  return rep;
}

inline nlohmann::json to_json(const BoundReport& r) {
  nlohmann::json j;
  j["domains"] = nlohmann::json::array();
  for (const auto& d : r.domains) j["domains"].push_back({{"k", d.k}, {"risk", d.risk}, {"d_mmd", d.d_mmd}});
  j["target"] = to_json(r.target);
  j["target_risk"] = r.target_risk;
  j["lambda_hat"] = r.lambda_hat;
  j["lambda_note"] = r.lambda_note;
  j["lhs"] = r.lhs;
  j["rhs"] = r.rhs;
  j["holds"] = r.holds;
  j["samples"] = r.samples;
  return j;
}

}  // namespace odgq
