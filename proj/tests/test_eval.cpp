#include <gtest/gtest.h>

#include "odgq/eval.hpp"
#include "odgq/trainer.hpp"

using namespace odgq;

namespace {

constexpr std::size_t kTestImages = 200;

struct Fixture {
  Model model;
  Parameters<float> params;
  Model other_model;
  Parameters<float> other;
  Dataset<float> test;
};

// Two briefly trained small models: the evaluated one and a surrogate with a
// different seed.
Fixture& fixture() {
  static Fixture f = [] {
    const std::string dir = ODGQ_DATA_DIR "/";
    auto train = take(load_mnist<float>(dir + "train-images-idx3-ubyte.gz", dir + "train-labels-idx1-ubyte.gz"), 2048);
    auto test = take(load_mnist<float>(dir + "t10k-images-idx3-ubyte.gz", dir + "t10k-labels-idx1-ubyte.gz"), kTestImages);
    ArchConfig a;
    a.widths = {8, 16};
    a.quant = {32, 32, ScaleGranularity::per_output_channel};
    TrainConfig c;
    c.batch = 32;
    c.run_epochs = 4;
    c.lr_decay_every = 3;
    auto [m, p] = build_model<float>(a, 1);
    auto trained = train_natural(m, p, train, c);
    c.seed = 9;
    auto [m2, p2] = build_model<float>(a, 2);
    auto trained2 = train_natural(m2, p2, train, c);
    return Fixture{m, trained.params, m2, trained2.params, test};
  }();
  return f;
}

Classifier<float> target() { return {&fixture().model, &fixture().params}; }

AttackSpec spec(AttackKind k, double eps, std::size_t steps = 5) {
  AttackSpec a;
  a.kind = k;
  a.eps = eps;
  a.alpha = eps / 2;
  a.steps = steps;
  a.seed = 3;
  return a;
}

}  // namespace

TEST(Evaluate, TrainedModelBeatsChance) {
  auto rep = evaluate(target(), fixture().test, {});
  EXPECT_GT(rep.clean_accuracy, 0.5);
  EXPECT_EQ(rep.samples, kTestImages);
}

TEST(Evaluate, ZeroEpsMatchesCleanAccuracy) {
  std::vector<AttackSpec> attacks;
  for (auto k : {AttackKind::gn, AttackKind::fgsm, AttackKind::bim, AttackKind::pgd, AttackKind::tpgd})
    attacks.push_back(spec(k, 0.0));
  auto rep = evaluate(target(), fixture().test, attacks);
  for (const auto& r : rep.results) EXPECT_EQ(r.robust_accuracy, rep.clean_accuracy) << attack_name(r.spec.kind);
}

TEST(Evaluate, SelfTransferEqualsWhiteBox) {
  Classifier<float> self = target();
  EvalOptions opt;
  opt.blackbox = true;
  auto rep = evaluate(target(), fixture().test, {spec(AttackKind::fgsm, 0.1), spec(AttackKind::bim, 0.1)}, &self, opt);
  for (auto k : {AttackKind::fgsm, AttackKind::bim}) {
    ASSERT_NE(rep.find(k, true), nullptr);
    EXPECT_EQ(rep.find(k, true)->robust_accuracy, rep.find(k, false)->robust_accuracy);
  }
}

TEST(Evaluate, TransferFromOtherModelIsWeaker) {
  Classifier<float> sur{&fixture().other_model, &fixture().other};
  EvalOptions opt;
  opt.blackbox = true;
  auto rep = evaluate(target(), fixture().test, {spec(AttackKind::pgd, 0.15, 10)}, &sur, opt);
  EXPECT_GE(rep.find(AttackKind::pgd, true)->robust_accuracy, rep.find(AttackKind::pgd, false)->robust_accuracy);
}

TEST(Evaluate, BlackBoxWithoutSurrogateRejected) {
  EvalOptions opt;
  opt.blackbox = true;
  EXPECT_THROW(evaluate(target(), fixture().test, {spec(AttackKind::fgsm, 0.1)}, nullptr, opt), ConfigError);
}

TEST(Evaluate, BatchSizeAndThreadsDoNotChangeResults) {
  const std::vector<AttackSpec> attacks{spec(AttackKind::gn, 0.2), spec(AttackKind::pgd, 0.1), spec(AttackKind::tpgd, 0.1)};
  EvalOptions a;
  a.batch = 96;
  EvalOptions b;
  b.batch = 16;
  b.threads = 3;
  auto ra = evaluate(target(), fixture().test, attacks, nullptr, a);
  auto rb = evaluate(target(), fixture().test, attacks, nullptr, b);
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    EXPECT_EQ(ra.results[i].robust_accuracy, rb.results[i].robust_accuracy) << attack_name(attacks[i].kind);
  }
}

TEST(Evaluate, PgdAccuracyNonIncreasingInEps) {
  double prev = 2.0;
  for (double e : {0.0, 2.0, 4.0, 8.0}) {
    auto rep = evaluate(target(), fixture().test, {spec(AttackKind::pgd, e / 255.0, 10)});
    EXPECT_LE(rep.results[0].robust_accuracy, prev) << "eps " << e;
    prev = rep.results[0].robust_accuracy;
  }
}

TEST(Evaluate, LabelsAndJson) {
  EXPECT_EQ(attack_label(spec(AttackKind::pgd, 0.1, 20), false), "PGD-20");
  EXPECT_EQ(attack_label(spec(AttackKind::fgsm, 0.1), true), "FGSM(B)");
  auto rep = evaluate(target(), take(fixture().test, 8), {spec(AttackKind::fgsm, 0.1)});
  auto j = to_json(rep);
  EXPECT_EQ(j["samples"], 8);
  EXPECT_FALSE(eval_table(rep).empty());
}

TEST(Surface, OriginIsCleanLoss) {
  SurfaceOptions opt;
  opt.resolution = 5;
  auto g = loss_surface(target(), fixture().test, 3, SurfaceLoss::cross_entropy, opt);
  auto [x, y] = gather(fixture().test, {3});
  const double clean = per_sample_cross_entropy(predict_logits(*target().model, *target().params, x), y)[0];
  EXPECT_NEAR(g.at(0, 0), clean, 1e-6);
  EXPECT_EQ(g.values.size(), 25u);
  EXPECT_DOUBLE_EQ(g.eps.back(), 8.0 / 255.0);
}

TEST(Surface, AdversarialAxisRaisesLoss) {
  SurfaceOptions opt;
  opt.resolution = 3;
  auto g = loss_surface(target(), fixture().test, 0, SurfaceLoss::cross_entropy, opt);
  EXPECT_GT(g.at(0, 2), g.at(0, 0));
}

TEST(Surface, AdversarialCornerUsuallyAboveOrigin) {
  SurfaceOptions opt;
  opt.resolution = 2;
  auto& f = fixture();
  const auto pred = argmax_rows(predict_logits(f.model, f.params, f.test.images));
  std::size_t correct = 0, raised = 0;
  for (std::size_t i = 0; i < f.test.size(); ++i) {
    if (pred[i] != f.test.labels[i]) continue;
    ++correct;
    auto g = loss_surface(target(), f.test, i, SurfaceLoss::cross_entropy, opt);
    if (g.at(0, 1) >= g.at(0, 0)) ++raised;
  }
  ASSERT_GE(correct, 100u);
  EXPECT_GE(static_cast<double>(raised), 0.9 * static_cast<double>(correct));
}

TEST(Surface, MmdOriginIsZero) {
  SurfaceOptions opt;
  opt.resolution = 2;
  opt.mmd_batch = 16;
  auto g = loss_surface(target(), fixture().test, 5, SurfaceLoss::mmd, opt);
  EXPECT_NEAR(g.at(0, 0), 0.0, 1e-9);
  EXPECT_GE(g.at(1, 1), 0.0);
}

TEST(Surface, InvalidRequests) {
  SurfaceOptions opt;
  opt.resolution = 1;
  EXPECT_THROW(loss_surface(target(), fixture().test, 0, SurfaceLoss::cross_entropy, opt), ConfigError);
  opt.resolution = 3;
  EXPECT_THROW(loss_surface(target(), fixture().test, kTestImages, SurfaceLoss::cross_entropy, opt), ConfigError);
  EXPECT_THROW(parse_surface_loss("l2"), ConfigError);
}

TEST(Surface, CsvHasOneRowPerCell) {
  SurfaceOptions opt;
  opt.resolution = 3;
  auto csv = surface_csv(loss_surface(target(), fixture().test, 1, SurfaceLoss::cross_entropy, opt));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 10);
}

TEST(Bound, ZeroEpsTargetRiskIsCleanError) {
  auto pset = make_perturbation_set<float>(2, 32, {1, 28, 28});
  auto rep = bound_report(target(), pset, fixture().test, spec(AttackKind::pgd, 0.0));
  const double clean = evaluate(target(), fixture().test, {}).clean_accuracy;
  EXPECT_DOUBLE_EQ(rep.target_risk, 1.0 - clean);
  EXPECT_DOUBLE_EQ(rep.domains[0].risk, 1.0 - clean);
}

TEST(Bound, SingleZeroSlotIsFgsmDomain) {
  auto pset = make_perturbation_set<float>(1, 32, {1, 28, 28});
  BoundOptions opt;
  opt.eps = 0.1;
  auto rep = bound_report(target(), pset, fixture().test, spec(AttackKind::pgd, 0.1, 10), opt);
  ASSERT_EQ(rep.domains.size(), 2u);
  EvalOptions eo;
  eo.batch = 32;
  auto fg = evaluate(target(), fixture().test, {spec(AttackKind::fgsm, 0.1)}, nullptr, eo);
  EXPECT_DOUBLE_EQ(rep.domains[1].risk, 1.0 - fg.results[0].robust_accuracy);
}

TEST(Bound, ReportIsConsistent) {
  auto pset = make_perturbation_set<float>(3, 32, {1, 28, 28});
  Rng rng(4);
  pset.store = normal_tensor<float>(pset.store.shape(), rng, 0.0f, 0.05f);
  BoundOptions opt;
  opt.eps = 0.1;
  auto rep = bound_report(target(), pset, fixture().test, spec(AttackKind::pgd, 0.1, 10), opt);
  ASSERT_EQ(rep.domains.size(), 4u);
  for (const auto& d : rep.domains) {
    EXPECT_GE(d.d_mmd, 0.0);
    EXPECT_GE(d.risk, 0.0);
    EXPECT_LE(d.risk, 1.0);
  }
  EXPECT_TRUE(rep.holds);
  EXPECT_GE(rep.rhs, rep.lhs);
  EXPECT_EQ(to_json(rep)["domains"].size(), 4u);
}

TEST(Bound, ShapeMismatchRejected) {
  auto pset = make_perturbation_set<float>(1, 4, {3, 32, 32});
  EXPECT_THROW(bound_report(target(), pset, fixture().test, spec(AttackKind::pgd, 0.1)), ShapeError);
}
