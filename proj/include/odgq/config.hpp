#pragma once

// Flat key=value run configuration shared by the command-line tools. Every
// key has a default; unknown keys are rejected. Budgets (eps, alpha) are in
// /255 pixel units here and converted on use.

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "odgq/attacks.hpp"
#include "odgq/checkpoint.hpp"
#include "odgq/data.hpp"
#include "odgq/model.hpp"
#include "odgq/trainer.hpp"

namespace odgq {

struct RunConfig {
  // data
  std::string dataset = "mnist";
  std::string data_dir = "data/mnist-subset";
  std::size_t train_limit = 0;  // 0 = whole split
  std::size_t test_limit = 0;
  bool augment = false;
  // architecture
  std::vector<std::size_t> widths{8, 16, 32};
  std::size_t blocks_per_stage = 1;
  int bits_w = 4;
  int bits_a = 4;
  std::string binarize_granularity = "per-output-channel";
  bool quantize_first_last = false;
  // training
  std::string mode = "odgq";
  std::size_t epochs = 40;  // natural budget N_e
  std::size_t batch = 128;
  double lr = 0.1;
  double lr_decay = 0.1;
  std::size_t lr_decay_every_natural = 0;  // 0: ceil(run epochs / 3)
  std::size_t lr_decay_every_odgq = 0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::optional<double> lambda;  // unset: 3, or 0.003 at 1 bit
  double eps = 8;
  std::optional<double> eps_local;
  std::size_t nk = 4;
  bool reclip_total = false;
  std::uint64_t seed = 0;
  bool deterministic = false;
  // evaluation
  std::string attacks = "gn,fgsm,pgd,bim,tpgd";
  double attack_eps = 8;
  double attack_alpha = 4;
  std::size_t attack_steps = 20;
  double tpgd_rho = 1.0;
  std::uint64_t attack_seed = 0;
  std::size_t eval_batch = 256;
  // output
  std::string out = "runs/default";
};

namespace detail {

inline bool parse_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + k + "': expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& k, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + k + "': expected a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& k, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("key '" + k + "': expected a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError("key '" + k + "': integer out of range: '" + v + "'");
  }
}

inline std::vector<std::size_t> parse_sizes(const std::string& k, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(k, item));
  if (out.empty()) throw ConfigError("key '" + k + "': empty list");
  return out;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

/// Keys under "checkpoint." are provenance written into checkpoints and are
/// skipped here.
inline void apply_key(RunConfig& c, const std::string& k, const std::string& v) {
  using namespace detail;
  if (k.starts_with("checkpoint.")) return;
  if (k == "dataset") c.dataset = v;
  else if (k == "data_dir") c.data_dir = v;
  else if (k == "train_limit") c.train_limit = parse_uint(k, v);
  else if (k == "test_limit") c.test_limit = parse_uint(k, v);
  else if (k == "augment") c.augment = parse_bool(k, v);
  else if (k == "widths") c.widths = parse_sizes(k, v);
  else if (k == "blocks_per_stage") c.blocks_per_stage = parse_uint(k, v);
  else if (k == "bits_w") c.bits_w = static_cast<int>(parse_uint(k, v));
  else if (k == "bits_a") c.bits_a = static_cast<int>(parse_uint(k, v));
  else if (k == "binarize_granularity") c.binarize_granularity = v;
  else if (k == "quantize_first_last") c.quantize_first_last = parse_bool(k, v);
  else if (k == "mode") c.mode = v;
  else if (k == "epochs") c.epochs = parse_uint(k, v);
  else if (k == "batch") c.batch = parse_uint(k, v);
  else if (k == "lr") c.lr = parse_double(k, v);
  else if (k == "lr_decay") c.lr_decay = parse_double(k, v);
  else if (k == "lr_decay_every_natural") c.lr_decay_every_natural = parse_uint(k, v);
  else if (k == "lr_decay_every_odgq") c.lr_decay_every_odgq = parse_uint(k, v);
  else if (k == "momentum") c.momentum = parse_double(k, v);
  else if (k == "weight_decay") c.weight_decay = parse_double(k, v);
  else if (k == "lambda") c.lambda = v == "auto" ? std::nullopt : std::optional<double>(parse_double(k, v));
  else if (k == "eps") c.eps = parse_double(k, v);
  else if (k == "eps_local") c.eps_local = v == "auto" ? std::nullopt : std::optional<double>(parse_double(k, v));
  else if (k == "nk") c.nk = parse_uint(k, v);
  else if (k == "reclip_total") c.reclip_total = parse_bool(k, v);
  else if (k == "seed") c.seed = parse_uint(k, v);
  else if (k == "deterministic") c.deterministic = parse_bool(k, v);
  else if (k == "attacks") c.attacks = v;
  else if (k == "attack_eps") c.attack_eps = parse_double(k, v);
  else if (k == "attack_alpha") c.attack_alpha = parse_double(k, v);
  else if (k == "attack_steps") c.attack_steps = parse_uint(k, v);
  else if (k == "tpgd_rho") c.tpgd_rho = parse_double(k, v);
  else if (k == "attack_seed") c.attack_seed = parse_uint(k, v);
  else if (k == "eval_batch") c.eval_batch = parse_uint(k, v);
  else if (k == "out") c.out = v;
  else throw ConfigError("unknown config key '" + k + "'");
}

inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  for (const auto& [k, v] : parse_key_values(text)) apply_key(base, k, v);
  return base;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

inline void validate(const RunConfig& c) {
  if (c.dataset != "mnist" && c.dataset != "cifar10") throw ConfigError("dataset must be mnist or cifar10");
  if (c.mode != "natural" && c.mode != "odgq") throw ConfigError("mode must be natural or odgq");
  if (c.nk == 0) throw ConfigError("nk must be at least 1");
  if (c.batch == 0) throw ConfigError("batch must be at least 1");
  if (c.eval_batch == 0) throw ConfigError("eval_batch must be at least 1");
  if (c.epochs == 0) throw ConfigError("epochs must be at least 1");
  if (c.eps < 0 || (c.eps_local && *c.eps_local < 0)) throw ConfigError("eps values must be non-negative");
  if (c.attack_eps < 0 || c.attack_alpha < 0) throw ConfigError("attack eps/alpha must be non-negative");
  parse_granularity(c.binarize_granularity);
  QuantConfig q{c.bits_w, c.bits_a, ScaleGranularity::per_output_channel};
  validate(q);
}

/// Fully expanded text form with defaults resolved.
inline std::string to_text(const RunConfig& c) {
  using detail::fmt;
  std::ostringstream os;
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "dataset=" << c.dataset << '\n'
     << "data_dir=" << c.data_dir << '\n'
     << "train_limit=" << c.train_limit << '\n'
     << "test_limit=" << c.test_limit << '\n'
     << "augment=" << b(c.augment) << '\n'
     << "widths=" << join_sizes(c.widths) << '\n'
     << "blocks_per_stage=" << c.blocks_per_stage << '\n'
     << "bits_w=" << c.bits_w << '\n'
     << "bits_a=" << c.bits_a << '\n'
     << "binarize_granularity=" << c.binarize_granularity << '\n'
     << "quantize_first_last=" << b(c.quantize_first_last) << '\n'
     << "mode=" << c.mode << '\n'
     << "epochs=" << c.epochs << '\n'
     << "batch=" << c.batch << '\n'
     << "lr=" << fmt(c.lr) << '\n'
     << "lr_decay=" << fmt(c.lr_decay) << '\n'
     << "lr_decay_every_natural=" << c.lr_decay_every_natural << '\n'
     << "lr_decay_every_odgq=" << c.lr_decay_every_odgq << '\n'
     << "momentum=" << fmt(c.momentum) << '\n'
     << "weight_decay=" << fmt(c.weight_decay) << '\n'
     << "lambda=" << (c.lambda ? fmt(*c.lambda) : fmt(default_lambda(c.bits_w))) << '\n'
     << "eps=" << fmt(c.eps) << '\n'
     << "eps_local=" << fmt(c.eps_local.value_or(c.eps)) << '\n'
     << "nk=" << c.nk << '\n'
     << "reclip_total=" << b(c.reclip_total) << '\n'
     << "seed=" << c.seed << '\n'
     << "deterministic=" << b(c.deterministic) << '\n'
     << "attacks=" << c.attacks << '\n'
     << "attack_eps=" << fmt(c.attack_eps) << '\n'
     << "attack_alpha=" << fmt(c.attack_alpha) << '\n'
     << "attack_steps=" << c.attack_steps << '\n'
     << "tpgd_rho=" << fmt(c.tpgd_rho) << '\n'
     << "attack_seed=" << c.attack_seed << '\n'
     << "eval_batch=" << c.eval_batch << '\n'
     << "out=" << c.out << '\n';
  return os.str();
}

inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a(to_text(c)); }

inline ArchConfig arch_config(const RunConfig& c) {
  ArchConfig a;
  if (c.dataset == "cifar10") {
    a.in_channels = 3;
    a.in_height = a.in_width = 32;
  }
  a.widths = c.widths;
  a.blocks_per_stage = c.blocks_per_stage;
  a.quant = {c.bits_w, c.bits_a, parse_granularity(c.binarize_granularity)};
  a.quantize_first_last = c.quantize_first_last;
  return a;
}

inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.natural_epochs = c.epochs;
  t.batch = c.batch;
  t.lr = c.lr;
  t.lr_decay = c.lr_decay;
  t.lr_decay_every = c.mode == "natural" ? c.lr_decay_every_natural : c.lr_decay_every_odgq;
  t.momentum = c.momentum;
  t.weight_decay = c.weight_decay;
  t.lambda = c.lambda.value_or(default_lambda(c.bits_w));
  t.eps = c.eps / 255.0;
  if (c.eps_local) t.eps_local = *c.eps_local / 255.0;
  t.nk = c.nk;
  t.reclip_total = c.reclip_total;
  t.augment = c.augment;
  t.seed = c.seed;
  return t;
}

inline std::vector<AttackSpec> attack_specs(const RunConfig& c) {
  std::vector<AttackSpec> out;
  std::stringstream ss(c.attacks);
  std::string name;
  while (std::getline(ss, name, ',')) {
    if (name.empty()) continue;
    AttackSpec a;
    a.kind = parse_attack(name);
    a.eps = c.attack_eps / 255.0;
    a.alpha = c.attack_alpha / 255.0;
    a.steps = c.attack_steps;
    a.rho = c.tpgd_rho;
    a.seed = c.attack_seed;
    validate(a);
    out.push_back(a);
  }
  return out;
}

/// Train and test splits named by the config. MNIST expects the standard IDX
/// file names (optionally .gz); CIFAR-10 the data_batch_*.bin / test_batch.bin files.
template <class T = float>
std::pair<Dataset<T>, Dataset<T>> load_splits(const RunConfig& c) {
  namespace fs = std::filesystem;
  const fs::path dir(c.data_dir);
  auto pick = [&](const std::string& base) {
    for (const std::string& cand : {base, base + ".gz"})
      if (fs::exists(dir / cand)) return (dir / cand).string();
    throw IoError("missing dataset file " + (dir / base).string() + "[.gz]");
  };
  Dataset<T> train, test;
  if (c.dataset == "mnist") {
    train = load_mnist<T>(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"));
    test = load_mnist<T>(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"));
  } else {
    std::vector<std::string> files;
    for (int i = 1; i <= 5; ++i) files.push_back(pick("data_batch_" + std::to_string(i) + ".bin"));
    train = load_cifar10<T>(files);
    test = load_cifar10<T>({pick("test_batch.bin")});
  }
  train = take(train, c.train_limit);
  test = take(test, c.test_limit);
  train.split = "train";
  test.split = "test";
  return {std::move(train), std::move(test)};
}

}  // namespace odgq
