// Acceptance run: one PASS/FAIL line per criterion, INFO lines for the
// measured numbers. Exit status is non-zero only if a check could not run
// (or, with --strict, if any criterion failed).

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>

#include "odgq/odgq.hpp"

namespace fs = std::filesystem;
using namespace odgq;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and sizes.
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60;
constexpr std::size_t kAttackCases = 10000;
constexpr double kBudgetSlack = 1e-6;
constexpr double kAttackSeconds = 120;
constexpr std::size_t kMmdInstances = 200;
constexpr double kMmdOracleTol = 1e-10;
constexpr double kMmdIdentityTol = 1e-9;
constexpr double kMmdSingletonTol = 1e-12;
constexpr std::size_t kMonotonePairs = 1000000;
constexpr double kXnorTol = 1e-7;
constexpr double kRobustGainPts = 15;
constexpr double kCleanGapPts = 5;
constexpr double kEpochRatio = 2.5;
constexpr double kTotalRatio = 1.3;
constexpr std::size_t kSurfaceImages = 100;
constexpr double kSurfaceFraction = 0.8;
constexpr std::size_t kFuzzCases = 1200;

struct Outcome {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Outcome> outcomes;
json summary;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  outcomes.push_back({id, name, pass, detail});
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << detail << std::endl;
  summary["criteria"][std::to_string(id)] = {{"name", name}, {"pass", pass}, {"detail", detail}};
}

void info(const std::string& s) { std::cout << "INFO " << s << std::endl; }

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

// ---------------------------------------------------------------------------
// 1

void gradient_oracle() {
  const auto t0 = Clock::now();
  const auto results = run_gradcheck(kGradTol);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_name, failed;
  for (const auto& r : results) {
    if (r.error > worst) worst = r.error, worst_name = r.name;
    if (!r.passed) failed += (failed.empty() ? "" : ", ") + r.name;
  }
  bool graph = false;
  for (const auto& r : results) graph = graph || r.name.rfind("model graph", 0) == 0;
  const bool ok = failed.empty() && graph && secs < kGradSeconds;
  report(1, "gradient oracle", ok,
         std::to_string(results.size()) + " cases, worst " + fmt(worst) + " (" + worst_name + "), " + fmt(secs, 3) + " s" +
             (failed.empty() ? "" : "; failed: " + failed));
}

// ---------------------------------------------------------------------------
// 2

void attack_budgets() {
  const auto t0 = Clock::now();
  Rng rng(20240611);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t violations = 0, fgsm_mismatch = 0, gn_box = 0;
  std::map<std::string, std::size_t> per_kind;
  for (AttackKind kind : {AttackKind::gn, AttackKind::fgsm, AttackKind::bim, AttackKind::pgd, AttackKind::tpgd}) {
    for (std::size_t c = 0; c < kAttackCases; ++c) {
      const std::size_t B = 1 + rng() % 4, D = 1 + rng() % 12, K = 2 + rng() % 3;
      Tensor<float> x0({B, D});
      for (float& v : x0.data()) {
        const double r = u(rng);
        v = r < 0.1 ? 0.0f : r < 0.2 ? 1.0f : static_cast<float>(u(rng));
      }
      const Tensor<float> W = normal_tensor<float>({D, K}, rng, 0.0f, 3.0f);
      std::vector<int> y(B);
      for (int& l : y) l = static_cast<int>(rng() % K);
      LogitsFn<float> logits = [&W](Tape<float>& t, const Var<float>& x) { return matmul(x, t.leaf(W, false)); };
      AttackSpec s;
      s.kind = kind;
      s.eps = u(rng) < 0.05 ? 0.0 : 0.3 * u(rng);
      s.alpha = s.eps * u(rng) * 1.5;
      s.steps = rng() % 8;
      s.rho = 1.0;
      s.seed = rng();
      const Tensor<float> xa = run_attack(s, logits, y, x0, rng() % 1000);
      bool in_box = true, in_ball = true;
      for (std::size_t i = 0; i < x0.size(); ++i) {
        in_box = in_box && xa[i] >= 0.0f && xa[i] <= 1.0f;
        in_ball = in_ball && std::abs(static_cast<double>(xa[i]) - x0[i]) <= s.eps + kBudgetSlack;
      }
      // Gaussian noise is unclipped in l-inf by design; only the box applies.
      const bool bad = kind == AttackKind::gn ? !in_box : !(in_box && in_ball);
      if (bad) ++violations;
      if (kind == AttackKind::gn && !in_box) ++gn_box;
      ++per_kind[attack_name(kind)];
      if (kind == AttackKind::fgsm) {
        auto grad = cross_entropy_gradient(logits, y);
        const float eps = static_cast<float>(s.eps);
        if (!(fgsm(grad, x0, eps) == bim(grad, x0, eps, eps, 1))) ++fgsm_mismatch;
      }
    }
  }
  const double secs = seconds_since(t0);
  std::string counts;
  for (const auto& [k, n] : per_kind) counts += (counts.empty() ? "" : " ") + k + "=" + std::to_string(n);
  report(2, "attack budget suite", violations == 0 && fgsm_mismatch == 0 && secs < kAttackSeconds,
         counts + "; violations " + std::to_string(violations) + ", FGSM vs 1-step BIM mismatches " +
             std::to_string(fgsm_mismatch) + ", " + fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------------------
// 3

double oracle_mmd(const std::vector<std::vector<double>>& s, const std::vector<std::vector<double>>& t,
                  std::optional<double> sigma) {
  auto d2 = [](const std::vector<double>& a, const std::vector<double>& b) {
    double r = 0;
    for (std::size_t i = 0; i < a.size(); ++i) r += (a[i] - b[i]) * (a[i] - b[i]);
    return r;
  };
  double bw;
  if (sigma) {
    bw = *sigma;
  } else {
    std::vector<std::vector<double>> all = s;
    all.insert(all.end(), t.begin(), t.end());
    std::vector<double> d;
    for (std::size_t i = 0; i < all.size(); ++i)
      for (std::size_t j = i + 1; j < all.size(); ++j) d.push_back(d2(all[i], all[j]));
    std::sort(d.begin(), d.end());
    const double med = d.size() % 2 ? d[d.size() / 2] : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
    bw = std::max(med / 2, 1e-3);
  }
  auto k = [&](const auto& a, const auto& b) { return std::exp(-d2(a, b) / (2 * bw)); };
  double ss = 0, tt = 0, st = 0;
  for (const auto& a : s)
    for (const auto& b : s) ss += k(a, b);
  for (const auto& a : t)
    for (const auto& b : t) tt += k(a, b);
  for (const auto& a : s)
    for (const auto& b : t) st += k(a, b);
  const double m = static_cast<double>(s.size()), n = static_cast<double>(t.size());
  return ss / (m * m) + tt / (n * n) - 2 * st / (m * n);
}

void mmd_oracle() {
  Rng rng(77);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  double worst = 0, worst_identity = 0;
  std::size_t asymmetric = 0;
  for (std::size_t c = 0; c < kMmdInstances; ++c) {
    const std::size_t m = 1 + rng() % 8, n = 1 + rng() % 8, F = 1 + rng() % 6;
    std::vector<std::vector<double>> s(m, std::vector<double>(F)), t(n, std::vector<double>(F));
    for (auto& r : s)
      for (double& v : r) v = u(rng);
    for (auto& r : t)
      for (double& v : r) v = u(rng) + 0.5;
    auto to_tensor = [F](const std::vector<std::vector<double>>& rows) {
      Tensor<double> x({rows.size(), F});
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t f = 0; f < F; ++f) x[i * F + f] = rows[i][f];
      return x;
    };
    const Tensor<double> S = to_tensor(s), T = to_tensor(t);
    std::optional<double> sigma;
    if (c % 2) sigma = 0.1 + 2.0 * std::abs(u(rng));
    const KernelConfig cfg{sigma};
    worst = std::max(worst, std::abs(mmd_squared_value(S, T, cfg) - oracle_mmd(s, t, sigma)));
    if (mmd_squared_value(S, T, cfg) != mmd_squared_value(T, S, cfg)) ++asymmetric;
    worst_identity = std::max(worst_identity, std::abs(mmd_squared_value(S, S, cfg)));
  }
  // One source point, one target point, D / (2 sigma) = 1.
  const double singleton =
      mmd_squared_value(Tensor<double>::matrix({{0.0, 1.0}}), Tensor<double>::matrix({{1.0, 2.0}}), KernelConfig{1.0});
  const double singleton_err = std::abs(singleton - (2.0 - 2.0 * std::exp(-1.0)));
  const bool ok = worst <= kMmdOracleTol && asymmetric == 0 && worst_identity <= kMmdIdentityTol && singleton_err <= kMmdSingletonTol;
  report(3, "MMD oracle", ok,
         std::to_string(kMmdInstances) + " instances, max |impl - oracle| " + fmt(worst) + ", asymmetric " +
             std::to_string(asymmetric) + ", max identity " + fmt(worst_identity) + ", singleton error " + fmt(singleton_err));
}

// ---------------------------------------------------------------------------
// 4

void quantizer_suite() {
  Rng rng(404);
  std::size_t not_idempotent = 0, too_many_levels = 0, non_monotone = 0;
  std::uniform_real_distribution<float> wide(-1.5f, 1.5f);
  for (int bits : {2, 3, 4, 8}) {
    for (int act = 0; act < 2; ++act) {
      auto q = [&](const Tensor<float>& v) { return act ? quantize_activation(v, bits) : quantize_weight(v, bits); };
      Tensor<float> a({kMonotonePairs}), b({kMonotonePairs});
      for (std::size_t i = 0; i < kMonotonePairs; ++i) {
        float x = wide(rng), y = wide(rng);
        if (x > y) std::swap(x, y);
        a[i] = x;
        b[i] = y;
      }
      const Tensor<float> qa = q(a), qb = q(b);
      for (std::size_t i = 0; i < kMonotonePairs; ++i)
        if (qa[i] > qb[i]) ++non_monotone;
      if (!(q(qa) == qa)) ++not_idempotent;
      std::set<float> levels(qa.data().begin(), qa.data().end());
      levels.insert(qb.data().begin(), qb.data().end());
      if (levels.size() > (std::size_t{1} << bits)) ++too_many_levels;
    }
  }
  double worst_alpha = 0;
  std::size_t sign_flips = 0;
  for (int c = 0; c < 50; ++c) {
    const std::size_t co = 1 + rng() % 16, ci = 1 + rng() % 8;
    const Tensor<double> w = normal_tensor<double>({co, ci, 3, 3}, rng, 0.0, 0.5);
    for (auto g : {ScaleGranularity::per_layer, ScaleGranularity::per_output_channel}) {
      const auto alpha = xnor_scales(w, g);
      const std::size_t groups = g == ScaleGranularity::per_layer ? 1 : co, per = w.size() / groups;
      for (std::size_t k = 0; k < groups; ++k) {
        double s = 0;
        for (std::size_t i = 0; i < per; ++i) s += std::abs(w[k * per + i]);
        worst_alpha = std::max(worst_alpha, std::abs(alpha[k] - s / static_cast<double>(per)));
      }
      const Tensor<double> b = binarize_xnor(w, g);
      for (std::size_t i = 0; i < w.size(); ++i)
        if ((b[i] >= 0) != (w[i] >= 0)) ++sign_flips;
    }
  }
  const bool ok = not_idempotent == 0 && too_many_levels == 0 && non_monotone == 0 && worst_alpha <= kXnorTol && sign_flips == 0;
  report(4, "quantizer suite", ok,
         "bits {2,3,4,8} x {weight, activation}: non-idempotent " + std::to_string(not_idempotent) +
             ", level overflow " + std::to_string(too_many_levels) + ", monotonicity violations " +
             std::to_string(non_monotone) + " of " + std::to_string(8 * kMonotonePairs) + " pairs; XNOR max alpha error " +
             fmt(worst_alpha) + ", sign flips " + std::to_string(sign_flips));
}

// ---------------------------------------------------------------------------
// 5

void roulette_counting() {
  constexpr std::size_t kBatches = 5, kCycles = 3;
  std::string bad;
  for (std::size_t nk : {1u, 2u, 4u, 6u}) {
    PerturbationSet<float> ps = make_perturbation_set<float>(nk, 2, {1, 2, 2});
    const Tensor<float> ones({2, 1, 2, 2}, 1.0f);
    std::size_t k = 0;
    for (std::size_t e = 0; e < kCycles * nk; ++e) {
      for (std::size_t b = 0; b < kBatches; ++b) roulette_update(ps, k, ones, e);
      k = (k + 1) % nk;
    }
    for (auto& row : ps.increments) row.resize(kCycles * nk, 0);
    for (std::size_t j = 0; j < nk; ++j) {
      for (std::size_t c = 0; c < kCycles; ++c) {
        std::size_t n = 0;
        for (std::size_t e = c * nk; e < (c + 1) * nk; ++e) n += ps.increments[j][e];
        if (n != (j + 1) * kBatches) bad += " Nk=" + std::to_string(nk) + " slot " + std::to_string(j) + " count";
      }
      if (ps.store[j * ps.slot_size()] != static_cast<float>(kCycles * (j + 1) * kBatches))
        bad += " Nk=" + std::to_string(nk) + " slot " + std::to_string(j) + " store";
    }
    for (std::size_t e = 0; e < kCycles * nk; ++e) {
      const bool slot0 = ps.increments[0][e] > 0, last = ps.increments[nk - 1][e] > 0;
      if (slot0 != (e % nk == 0)) bad += " Nk=" + std::to_string(nk) + " slot-0 cadence";
      if (!last) bad += " Nk=" + std::to_string(nk) + " last-slot cadence";
    }
  }
  report(5, "roulette counting", bad.empty(),
         bad.empty() ? "N_k in {1,2,4,6}, 3 cycles of 5 batches: counts (j+1)*N_b per cycle; slot 0 every N_k epochs, last slot every epoch"
                     : "mismatches:" + bad);
}

// ---------------------------------------------------------------------------
// 6

void degenerate_equivalence(const Dataset<float>& train, const RunConfig& base) {
  const Dataset<float> part = take(train, 2048);
  RunConfig rc = base;
  const Model model = make_model(arch_config(rc));
  TrainConfig nat = train_config(rc);
  nat.natural_epochs = 3;
  TrainConfig odg = nat;
  odg.natural_epochs = 6;
  odg.lambda = 0;
  odg.eps = 0;
  odg.eps_local = 0;
  const auto init = init_parameters<float>(model, rc.seed);
  const auto a = train_natural(model, init, part, nat);
  const auto b = train_odgq(model, init, part, odg);
  bool same = a.log.size() == 3 && b.log.size() == 3 && a.params.tensors == b.params.tensors;
  for (std::size_t e = 0; same && e < 3; ++e) {
    same = a.log[e].task_loss == b.log[e].task_loss && a.log[e].train_accuracy == b.log[e].train_accuracy &&
           a.log[e].lr == b.log[e].lr && a.log[e].batches == b.log[e].batches;
  }
  report(6, "degenerate equivalence", same,
         "3 epochs on 2048 images: " + std::string(same ? "losses, accuracies, learning rates and final parameters identical"
                                                          : "logs or parameters differ"));
}

// ---------------------------------------------------------------------------
// 7-11

struct Run {
  Model model;
  TrainResult<float> result;
  double total_seconds = 0;
};

Run train_run(const RunConfig& rc, const Dataset<float>& train, const fs::path& out) {
  Run r;
  r.model = make_model(arch_config(rc));
  std::ofstream log(out / (rc.mode + "_log.jsonl"));
  auto cb = [&](const EpochRecord& e) {
    log << json{{"epoch", e.epoch},
                {"k", e.k ? json(*e.k) : json(nullptr)},
                {"lr", e.lr},
                {"task_loss", e.task_loss},
                {"mmd_loss", e.mmd_loss},
                {"train_accuracy", e.train_accuracy},
                {"wall_seconds", e.wall_seconds}}
               .dump()
        << '\n'
        << std::flush;
    info(rc.mode + " epoch " + std::to_string(e.epoch) + ": loss " + fmt(e.task_loss) + ", train acc " +
         fmt(e.train_accuracy) + ", " + fmt(e.wall_seconds, 3) + " s");
  };
  auto params = init_parameters<float>(r.model, rc.seed);
  r.result = rc.mode == "natural" ? train_natural(r.model, params, train, train_config(rc), cb)
                                  : train_odgq(r.model, params, train, train_config(rc), cb);
  for (const auto& e : r.result.log) r.total_seconds += e.wall_seconds;
  std::ostringstream prov;
  prov << to_text(rc) << "checkpoint.seed=" << rc.seed << "\ncheckpoint.config_hash=" << config_hash(rc)
       << "\ncheckpoint.epoch=" << r.result.log.size() << '\n';
  save_checkpoint(make_checkpoint(r.result.params, prov.str()), (out / (rc.mode + ".ckpt")).string());
  if (r.result.pset) save_checkpoint(perturbation_checkpoint(*r.result.pset, prov.str()), (out / "odgq.pset").string());
  return r;
}

AttackSpec default_attack(AttackKind kind) {
  AttackSpec s;
  s.kind = kind;
  s.eps = 8.0 / 255.0;
  s.alpha = 4.0 / 255.0;
  s.steps = 20;
  return s;
}

void fuzz_and_roundtrip(const Run& odgq_run, const fs::path& out) {
  // Round trip of the trained model and its perturbation set.
  const Checkpoint ck = make_checkpoint(odgq_run.result.params, "mode=odgq\n");
  const fs::path p = out / "roundtrip.ckpt";
  save_checkpoint(ck, p.string());
  const Checkpoint back = load_checkpoint(p.string());
  bool exact = serialize(back) == serialize(ck) &&
               parameters_from<float>(back, odgq_run.model).tensors == odgq_run.result.params.tensors;
  const Checkpoint pck = perturbation_checkpoint(*odgq_run.result.pset, "");
  exact = exact && perturbation_set_from<float>(deserialize(serialize(pck))).store == odgq_run.result.pset->store;

  // Fuzz corpus: mutated IDX headers, CIFAR label and length damage, random buffers.
  using Bytes = std::vector<std::uint8_t>;
  auto be32 = [](Bytes& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
  };
  Bytes img, lab;
  be32(img, 0x803), be32(img, 3), be32(img, 28), be32(img, 28);
  img.resize(16 + 3 * 784, 7);
  be32(lab, 0x801), be32(lab, 3);
  lab.insert(lab.end(), {1, 2, 3});
  Bytes cifar(3 * kCifarRecord, 9);
  for (std::size_t r = 0; r < 3; ++r) cifar[r * kCifarRecord] = static_cast<std::uint8_t>(r);

  Rng rng(1103);
  std::size_t rejected = 0, wrong_error = 0, accepted = 0;
  auto expect_reject = [&](const std::function<void()>& f) {
    try {
      f();
      ++accepted;
    } catch (const FormatError&) {
      ++rejected;
    } catch (...) {
      ++wrong_error;
    }
  };
  for (std::size_t c = 0; c < kFuzzCases; ++c) {
    switch (c % 4) {
      case 0: {  // image header byte
        Bytes m = img;
        const std::size_t pos = rng() % 16;
        m[pos] = static_cast<std::uint8_t>(m[pos] ^ (1 + rng() % 255));
        expect_reject([&] { parse_mnist<float>(m, lab); });
        break;
      }
      case 1: {  // label header byte
        Bytes m = lab;
        const std::size_t pos = rng() % 8;
        m[pos] = static_cast<std::uint8_t>(m[pos] ^ (1 + rng() % 255));
        expect_reject([&] { parse_mnist<float>(img, m); });
        break;
      }
      case 2: {  // CIFAR: label byte above 9, or a length that is not whole records
        Bytes m = cifar;
        if (rng() % 2) {
          m[(rng() % 3) * kCifarRecord] = static_cast<std::uint8_t>(10 + rng() % 246);
        } else {
          std::size_t n;
          do n = 1 + rng() % (m.size() - 1);
          while (n % kCifarRecord == 0);
          m.resize(n);
        }
        expect_reject([&] { parse_cifar10<float>({m}); });
        break;
      }
      default: {  // random short buffers
        Bytes a(rng() % 64), b(rng() % 16);
        for (auto& v : a) v = static_cast<std::uint8_t>(rng());
        for (auto& v : b) v = static_cast<std::uint8_t>(rng());
        expect_reject([&] { parse_mnist<float>(a, b); });
        break;
      }
    }
  }
  fs::remove(p);
  report(11, "format round-trips", exact && rejected == kFuzzCases,
         std::string("checkpoint and perturbation set ") + (exact ? "bit-exact" : "NOT bit-exact") + "; fuzz " +
             std::to_string(rejected) + "/" + std::to_string(kFuzzCases) + " rejected with FormatError, " +
             std::to_string(accepted) + " accepted, " + std::to_string(wrong_error) + " other exceptions");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string out_dir = "acceptance";
  std::string data_dir = ODGQ_DATA_DIR;
  bool strict = false;
  app.add_option("--out", out_dir, "directory for checkpoints, logs and the summary");
  app.add_option("--data-dir", data_dir, "MNIST directory");
  app.add_flag("--strict", strict, "exit non-zero when any criterion fails");
  CLI11_PARSE(app, argc, argv);
  const fs::path out(out_dir);
  fs::create_directories(out);
  const auto start = Clock::now();

  try {
    gradient_oracle();
    attack_budgets();
    mmd_oracle();
    quantizer_suite();
    roulette_counting();

    RunConfig rc;
    rc.data_dir = data_dir;
    rc.deterministic = true;
    auto [train, test] = load_splits<float>(rc);
    info("MNIST subset: " + std::to_string(train.size()) + " train, " + std::to_string(test.size()) + " test");
    degenerate_equivalence(train, rc);

    RunConfig nat_rc = rc, odgq_rc = rc;
    nat_rc.mode = "natural";
    odgq_rc.mode = "odgq";
    Run nat = train_run(nat_rc, train, out);
    Run odg = train_run(odgq_rc, train, out);

    Classifier<float> nat_clf{&nat.model, &nat.result.params};
    Classifier<float> odg_clf{&odg.model, &odg.result.params};
    EvalOptions eo;
    eo.threads = thread_count();
    const std::vector<AttackSpec> attacks{default_attack(AttackKind::fgsm), default_attack(AttackKind::pgd)};
    const EvalReport er_nat = evaluate(nat_clf, test, attacks, nullptr, eo);
    const EvalReport er_odg = evaluate(odg_clf, test, attacks, nullptr, eo);
    std::ofstream(out / "eval_natural.json") << to_json(er_nat).dump(2) << '\n';
    std::ofstream(out / "eval_odgq.json") << to_json(er_odg).dump(2) << '\n';
    info("natural: clean " + fmt(100 * er_nat.clean_accuracy) + "%, FGSM " +
         fmt(100 * er_nat.find(AttackKind::fgsm)->robust_accuracy) + "%, PGD-20 " +
         fmt(100 * er_nat.find(AttackKind::pgd)->robust_accuracy) + "%");
    info("odgq:    clean " + fmt(100 * er_odg.clean_accuracy) + "%, FGSM " +
         fmt(100 * er_odg.find(AttackKind::fgsm)->robust_accuracy) + "%, PGD-20 " +
         fmt(100 * er_odg.find(AttackKind::pgd)->robust_accuracy) + "%");
    const double gain = 100 * (er_odg.find(AttackKind::pgd)->robust_accuracy - er_nat.find(AttackKind::pgd)->robust_accuracy);
    const double clean_gap = 100 * std::abs(er_odg.clean_accuracy - er_nat.clean_accuracy);
    report(7, "desk-scale robustness", gain >= kRobustGainPts && clean_gap <= kCleanGapPts,
           "PGD-20 gain " + fmt(gain) + " pts (need >= " + fmt(kRobustGainPts) + "), clean gap " + fmt(clean_gap) +
               " pts (need <= " + fmt(kCleanGapPts) + ")");
    summary["natural"] = to_json(er_nat);
    summary["odgq"] = to_json(er_odg);

    const double nat_epoch = nat.total_seconds / static_cast<double>(nat.result.log.size());
    const double odg_epoch = odg.total_seconds / static_cast<double>(odg.result.log.size());
    const double epoch_ratio = odg_epoch / nat_epoch, total_ratio = odg.total_seconds / nat.total_seconds;
    report(8, "training-time parity", epoch_ratio <= kEpochRatio && total_ratio <= kTotalRatio,
           "per-epoch " + fmt(odg_epoch, 3) + " s vs " + fmt(nat_epoch, 3) + " s, ratio " + fmt(epoch_ratio, 3) +
               " (need <= " + fmt(kEpochRatio) + "); total " + fmt(odg.total_seconds, 4) + " s vs " +
               fmt(nat.total_seconds, 4) + " s, ratio " + fmt(total_ratio, 3) + " (need <= " + fmt(kTotalRatio) + ")");
    summary["timing"] = {{"natural_total", nat.total_seconds}, {"odgq_total", odg.total_seconds},
                         {"epoch_ratio", epoch_ratio}, {"total_ratio", total_ratio}};

    std::size_t lower = 0;
    std::ofstream surf(out / "surface_max.csv");
    surf << "index,natural_max,odgq_max\n";
    for (std::size_t i = 0; i < kSurfaceImages; ++i) {
      SurfaceOptions so;
      so.seed = i;
      const double a = loss_surface(nat_clf, test, i, SurfaceLoss::cross_entropy, so).max();
      const double b = loss_surface(odg_clf, test, i, SurfaceLoss::cross_entropy, so).max();
      surf << i << ',' << a << ',' << b << '\n';
      if (b < a) ++lower;
    }
    const double frac = static_cast<double>(lower) / kSurfaceImages;
    report(9, "loss-surface ordering", frac >= kSurfaceFraction,
           std::to_string(lower) + "/" + std::to_string(kSurfaceImages) + " images have a lower max CE for ODG-Q (need >= " +
               fmt(100 * kSurfaceFraction) + "%)");

    BoundOptions bo;
    bo.eps = 8.0 / 255.0;
    bo.eps_local = 8.0 / 255.0;
    bo.threads = thread_count();
    const BoundReport br = bound_report(odg_clf, *odg.result.pset, test, default_attack(AttackKind::pgd), bo);
    std::ofstream(out / "bound.json") << to_json(br).dump(2) << '\n';
    bool sane = br.target_risk >= 0 && br.target_risk <= 1;
    std::string dom;
    for (const auto& d : br.domains) {
      sane = sane && d.d_mmd >= 0 && d.risk >= 0 && d.risk <= 1;
      dom += " [" + fmt(d.risk, 3) + ", " + fmt(d.d_mmd, 3) + "]";
    }
    report(10, "bound-report consistency", sane && br.rhs >= br.target_risk,
           "target risk " + fmt(br.target_risk) + " <= rhs " + fmt(br.rhs) + " at lambda_hat " + fmt(br.lambda_hat) +
               "; domains [risk, d]:" + dom);

    fuzz_and_roundtrip(odg, out);
  } catch (const std::exception& e) {
    std::cout << "ERROR acceptance run aborted: " << e.what() << std::endl;
    return 2;
  }

  std::size_t passed = 0;
  for (const auto& o : outcomes) passed += o.pass;
  summary["passed"] = passed;
  summary["total"] = outcomes.size();
  summary["seconds"] = seconds_since(start);
  std::ofstream(out / "acceptance.json") << summary.dump(2) << '\n';
  std::cout << "SUMMARY " << passed << "/" << outcomes.size() << " criteria passed in " << fmt(seconds_since(start), 4)
            << " s" << std::endl;
  return strict && passed != outcomes.size() ? 1 : 0;
}
