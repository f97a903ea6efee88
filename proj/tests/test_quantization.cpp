#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "odgq/quantization.hpp"
#include "odgq/random.hpp"

using namespace odgq;

namespace {

double qa(double a, int bits) { return quantize_activation(Tensor<double>::vector({a}), bits)[0]; }
double qw(double w, int bits) { return quantize_weight(Tensor<double>::vector({w}), bits)[0]; }

}  // namespace

TEST(QuantizeActivation, HalfRoundsAwayFromZero) { EXPECT_DOUBLE_EQ(qa(0.5, 2), 2.0 / 3.0); }

TEST(QuantizeActivation, ZeroIsFixed) {
  for (int b : {2, 3, 4, 8}) EXPECT_EQ(qa(0.0, b), 0.0);
}

TEST(QuantizeActivation, ClipsAboveOne) { EXPECT_EQ(qa(1.7, 2), 1.0); }

TEST(QuantizeActivation, RejectsUnsupportedBits) {
  EXPECT_THROW(quantize_activation(Tensor<double>::vector({0.3}), 5), ConfigError);
  EXPECT_THROW(quantize_activation(Tensor<double>::vector({0.3}), 1), ConfigError);
}

TEST(QuantizeWeight, ZeroGoesToPositiveThird) { EXPECT_DOUBLE_EQ(qw(0.0, 2), 1.0 / 3.0); }

TEST(QuantizeWeight, MinusOneIsFixed) {
  for (int b : {2, 3, 4, 8}) EXPECT_EQ(qw(-1.0, b), -1.0);
}

TEST(QuantizeWeight, EightBitStepBound) { EXPECT_LE(std::abs(qw(0.123456, 8) - 0.123456), 1.0 / 255.0); }

TEST(QuantizeWeight, TwoBitLevels) {
  std::set<double> levels;
  for (double w = -1.5; w <= 1.5; w += 0.01) levels.insert(qw(w, 2));
  const std::vector<double> want{-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0};
  ASSERT_EQ(levels.size(), want.size());
  std::size_t i = 0;
  for (double l : levels) EXPECT_NEAR(l, want[i++], 1e-15);
}

TEST(Quantizers, IdempotentAndMonotone) {
  Rng rng(11);
  for (int b : {2, 3, 4, 8}) {
    auto a = uniform_tensor<float>({20000}, rng, -0.5f, 1.5f);
    auto w = uniform_tensor<float>({20000}, rng, -1.5f, 1.5f);
    auto a1 = quantize_activation(a, b), w1 = quantize_weight(w, b);
    EXPECT_EQ(quantize_activation(a1, b), a1);
    EXPECT_EQ(quantize_weight(w1, b), w1);
    std::sort(a.data().begin(), a.data().end());
    auto as = quantize_activation(a, b);
    for (std::size_t i = 1; i < as.size(); ++i) ASSERT_LE(as[i - 1], as[i]);
    std::set<float> distinct(as.data().begin(), as.data().end());
    EXPECT_LE(distinct.size(), std::size_t{1} << b);
  }
}

TEST(Binarize, HandExample) {
  auto wb = binarize_xnor(Tensor<double>::vector({0.5, -1.5, 1.0}), ScaleGranularity::per_layer);
  EXPECT_EQ(wb, Tensor<double>::vector({1.0, -1.0, 1.0}));
}

TEST(Binarize, AllZeros) {
  auto wb = binarize_xnor(Tensor<double>({4}, 0.0), ScaleGranularity::per_layer);
  EXPECT_EQ(wb, Tensor<double>({4}, 0.0));
}

TEST(Binarize, FixedPointOfScaledSigns) {
  auto w = Tensor<double>::vector({0.25, -0.25, -0.25, 0.25});
  EXPECT_EQ(binarize_xnor(w, ScaleGranularity::per_layer), w);
}

TEST(Binarize, PerChannelScales) {
  Tensor<double> w({2, 2}, std::vector<double>{1.0, -3.0, 0.5, 0.0});
  auto a = xnor_scales(w, ScaleGranularity::per_output_channel);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_DOUBLE_EQ(a[0], 2.0);
  EXPECT_DOUBLE_EQ(a[1], 0.25);
  // sgn(0) = +1 keeps each group two-valued.
  EXPECT_EQ(binarize_xnor(w, ScaleGranularity::per_output_channel), (Tensor<double>({2, 2}, std::vector<double>{2, -2, 0.25, 0.25})));
}

TEST(Binarize, Idempotent) {
  Rng rng(2);
  auto w = normal_tensor<double>({8, 3, 3, 3}, rng);
  for (auto g : {ScaleGranularity::per_layer, ScaleGranularity::per_output_channel}) {
    auto b = binarize_xnor(w, g);
    EXPECT_LE(max_abs_diff(binarize_xnor(b, g), b), 1e-12);
  }
}

TEST(SteBackward, MaskDefinition) {
  auto g = ste_backward(Tensor<double>({3}, 1.0), Tensor<double>::vector({-2, 0.5, 2}), -1.0, 1.0);
  EXPECT_EQ(g, Tensor<double>::vector({0, 1, 0}));
}

TEST(SteBackward, PassThroughInRange) {
  auto up = Tensor<double>::vector({0.3, -4.0, 7.0});
  EXPECT_EQ(ste_backward(up, Tensor<double>::vector({0.0, 0.2, 1.0}), 0.0, 1.0), up);
}

TEST(SteBackward, RejectsEmptyRange) {
  EXPECT_THROW(ste_backward(Tensor<double>({1}), Tensor<double>({1}), 1.0, 1.0), Error);
}

TEST(FakeQuantize, RecordedGradientUsesSte) {
  Tape<double> t;
  auto w = t.leaf(Tensor<double>::vector({-1.5, -0.2, 0.4, 1.2}), true);
  auto up = Tensor<double>::vector({1, 2, 3, 4});
  auto g = t.backward(sum(mul(fake_quantize_weight(w, 4), t.constant(up)))).at(w);
  EXPECT_EQ(g, Tensor<double>::vector({0, 2, 3, 0}));
}

TEST(FakeQuantize, QuantizedLinearPassesInputGradient) {
  Rng rng(4);
  Tape<double> t;
  auto x = t.leaf(uniform_tensor<double>({2, 5}, rng, 0.0, 1.0), true);
  auto w = t.leaf(uniform_tensor<double>({5, 3}, rng, -0.9, 0.9), false);
  auto y = matmul(fake_quantize_activation(x, 4), fake_quantize_weight(w, 4));
  auto g = t.backward(sum(y)).at(x);
  EXPECT_GT(max_abs(g), 0.0);
}

TEST(FakeQuantize, BinarizeGradientScaledByAlpha) {
  Tape<double> t;
  auto w = t.leaf(Tensor<double>::vector({0.5, -1.5, 1.0}), true);
  auto g = t.backward(sum(fake_binarize(w, ScaleGranularity::per_layer))).at(w);
  // alpha = 1; |w| <= 1 passes, -1.5 is masked.
  EXPECT_EQ(g, Tensor<double>::vector({1, 0, 1}));
}
