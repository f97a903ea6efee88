#include <gtest/gtest.h>

#include "odgq/config.hpp"

using namespace odgq;

TEST(RunConfig, DefaultsValidate) { EXPECT_NO_THROW(validate(RunConfig{})); }

TEST(RunConfig, UnknownKeyRejected) {
  try {
    parse_run_config("epochs=3\nepoch=4\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(RunConfig, BadValuesRejected) {
  EXPECT_THROW(parse_run_config("epochs=-1"), ConfigError);
  EXPECT_THROW(parse_run_config("lr=fast"), ConfigError);
  EXPECT_THROW(parse_run_config("augment=maybe"), ConfigError);
  EXPECT_THROW(validate(parse_run_config("nk=0")), ConfigError);
  EXPECT_THROW(validate(parse_run_config("bits_w=5")), ConfigError);
  EXPECT_THROW(validate(parse_run_config("mode=fancy")), ConfigError);
}

TEST(RunConfig, ResolvedTextRoundTrips) {
  RunConfig c = parse_run_config("epochs=7\nwidths=4,8\nlambda=0.5\neps=6\nattacks=pgd,fgsm\n");
  const std::string text = to_text(c);
  EXPECT_EQ(to_text(parse_run_config(text)), text);
  EXPECT_EQ(config_hash(parse_run_config(text)), config_hash(c));
}

TEST(RunConfig, ProvenanceKeysIgnored) {
  RunConfig c = parse_run_config("checkpoint.seed=3\ncheckpoint.config_hash=123\nseed=4\n");
  EXPECT_EQ(c.seed, 4u);
}

TEST(RunConfig, LambdaDefaultsFollowBitwidth) {
  EXPECT_EQ(train_config(parse_run_config("bits_w=4")).lambda, 3.0);
  EXPECT_EQ(train_config(parse_run_config("bits_w=1\nbits_a=1")).lambda, 0.003);
  EXPECT_EQ(train_config(parse_run_config("bits_w=1\nlambda=2")).lambda, 2.0);
}

TEST(RunConfig, BudgetsConvertFromPixelUnits) {
  RunConfig c = parse_run_config("eps=8\neps_local=4\nattack_eps=2\nattack_alpha=1\nattacks=pgd");
  TrainConfig t = train_config(c);
  EXPECT_DOUBLE_EQ(t.eps, 8.0 / 255.0);
  EXPECT_DOUBLE_EQ(*t.eps_local, 4.0 / 255.0);
  auto a = attack_specs(c);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_DOUBLE_EQ(a[0].eps, 2.0 / 255.0);
  EXPECT_DOUBLE_EQ(a[0].alpha, 1.0 / 255.0);
}

TEST(RunConfig, DecayIntervalFollowsMode) {
  RunConfig c = parse_run_config("lr_decay_every_natural=50\nlr_decay_every_odgq=100\n");
  c.mode = "natural";
  EXPECT_EQ(train_config(c).lr_decay_every, 50u);
  c.mode = "odgq";
  EXPECT_EQ(train_config(c).lr_decay_every, 100u);
}

TEST(RunConfig, CifarArchitecture) {
  ArchConfig a = arch_config(parse_run_config("dataset=cifar10"));
  EXPECT_EQ(a.in_channels, 3u);
  EXPECT_EQ(a.in_height, 32u);
}

TEST(RunConfig, UnknownAttackRejected) { EXPECT_THROW(attack_specs(parse_run_config("attacks=pgd,cw")), ConfigError); }

TEST(RunConfig, LoadSplitsFromShippedSubset) {
  RunConfig c;
  c.data_dir = ODGQ_DATA_DIR;
  c.train_limit = 100;
  c.test_limit = 50;
  auto [train, test] = load_splits<float>(c);
  EXPECT_EQ(train.size(), 100u);
  EXPECT_EQ(test.size(), 50u);
  c.data_dir = "/nonexistent";
  EXPECT_THROW(load_splits<float>(c), IoError);
}
