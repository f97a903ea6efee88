// odgq: train, evaluate and inspect quantized models.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "odgq/odgq.hpp"

namespace fs = std::filesystem;
using namespace odgq;
using json = nlohmann::json;

namespace {

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << s;
  if (!f) throw IoError("write failed for " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string provenance_value(const std::string& config_text, const std::string& key) {
  for (const auto& [k, v] : parse_key_values(config_text))
    if (k == key) return v;
  return {};
}

struct Loaded {
  RunConfig rc;
  Model model;
  Parameters<float> params;
};

// Rebuilds the model a checkpoint was trained with. Bitwidth overrides are
// allowed since quantization is applied on the fly.
Loaded load_model(const std::string& path, std::optional<int> bits_w, std::optional<int> bits_a) {
  const Checkpoint ck = load_checkpoint(path);
  Loaded l;
  l.rc = parse_run_config(ck.config_text);
  if ((bits_w && *bits_w != l.rc.bits_w) || (bits_a && *bits_a != l.rc.bits_a)) {
    std::cerr << "warning: " << path << " was trained with bits_w=" << l.rc.bits_w << " bits_a=" << l.rc.bits_a
              << "; evaluating with bits_w=" << bits_w.value_or(l.rc.bits_w) << " bits_a=" << bits_a.value_or(l.rc.bits_a)
              << '\n';
    l.rc.bits_w = bits_w.value_or(l.rc.bits_w);
    l.rc.bits_a = bits_a.value_or(l.rc.bits_a);
  }
  validate(l.rc);
  l.model = make_model(arch_config(l.rc));
  l.params = parameters_from<float>(ck, l.model);
  return l;
}

json epoch_json(const EpochRecord& r, bool with_time) {
  json j{{"epoch", r.epoch},
         {"k", r.k ? json(*r.k) : json(nullptr)},
         {"lr", r.lr},
         {"task_loss", r.task_loss},
         {"mmd_loss", r.mmd_loss},
         {"train_accuracy", r.train_accuracy},
         {"max_store_abs", r.max_store_abs},
         {"batches", r.batches},
         {"backward_passes", r.backward_passes}};
  if (with_time) j["wall_seconds"] = r.wall_seconds;
  return j;
}

// ---------------------------------------------------------------------------

struct TrainFlags {
  std::string config;
  std::string mode;
  std::string out;
  std::string data_dir;
  std::optional<std::size_t> nk, epochs, batch, train_limit;
  std::optional<double> eps, eps_local, lambda;
  std::optional<int> bits_w, bits_a;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

int cmd_train(const TrainFlags& f) {
  RunConfig rc = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (!f.mode.empty()) rc.mode = f.mode;
  if (!f.out.empty()) rc.out = f.out;
  if (!f.data_dir.empty()) rc.data_dir = f.data_dir;
  if (f.nk) rc.nk = *f.nk;
  if (f.epochs) rc.epochs = *f.epochs;
  if (f.batch) rc.batch = *f.batch;
  if (f.train_limit) rc.train_limit = *f.train_limit;
  if (f.eps) rc.eps = *f.eps;
  if (f.eps_local) rc.eps_local = *f.eps_local;
  if (f.lambda) rc.lambda = *f.lambda;
  if (f.bits_w) rc.bits_w = *f.bits_w;
  if (f.bits_a) rc.bits_a = *f.bits_a;
  if (f.seed) rc.seed = *f.seed;
  if (f.deterministic) rc.deterministic = true;
  validate(rc);

  const fs::path out(rc.out);
  fs::create_directories(out);
  const std::string resolved = to_text(rc);
  write_text(out / "config.txt", resolved);

  auto [train, test] = load_splits<float>(rc);
  const Model model = make_model(arch_config(rc));
  Parameters<float> params = init_parameters<float>(model, rc.seed);
  const TrainConfig tc = train_config(rc);

  std::ofstream log(out / "log.jsonl", std::ios::binary);
  std::ofstream timing;
  if (rc.deterministic) timing.open(out / "timing.jsonl", std::ios::binary);
  auto on_epoch = [&](const EpochRecord& r) {
    log << epoch_json(r, !rc.deterministic).dump() << '\n' << std::flush;
    if (rc.deterministic) timing << json{{"epoch", r.epoch}, {"wall_seconds", r.wall_seconds}}.dump() << '\n' << std::flush;
    std::cerr << rc.mode << " epoch " << r.epoch << " loss " << r.task_loss << " acc " << r.train_accuracy << " ("
              << r.wall_seconds << " s)\n";
  };

  TrainResult<float> res = rc.mode == "natural" ? train_natural(model, params, train, tc, on_epoch)
                                                : train_odgq(model, params, train, tc, on_epoch);
  std::ostringstream prov;
  prov << resolved << "checkpoint.seed=" << rc.seed << '\n'
       << "checkpoint.config_hash=" << config_hash(rc) << '\n'
       << "checkpoint.epoch=" << res.log.size() << '\n';
  save_checkpoint(make_checkpoint(res.params, prov.str()), (out / "model.ckpt").string());
  if (res.pset) save_checkpoint(perturbation_checkpoint(*res.pset, prov.str()), (out / "pertset.ckpt").string());

  // Clean test accuracy as a summary line.
  Classifier<float> clf{&model, &res.params};
  EvalOptions eo;
  eo.batch = rc.eval_batch;
  const EvalReport rep = evaluate(clf, test, {}, nullptr, eo);
  std::cout << "trained " << res.log.size() << " epochs; clean test accuracy " << rep.clean_accuracy << "; wrote "
            << (out / "model.ckpt").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalFlags {
  std::string ckpt, surrogate, out, attacks = "natural,gn,fgsm,pgd,bim,tpgd", data_dir;
  double eps = 8, alpha = 4, rho = 1;
  std::size_t steps = 20, batch = 256, test_limit = 0;
  std::uint64_t seed = 0;
  bool blackbox = false;
  std::optional<int> bits_w, bits_a;
  std::optional<std::size_t> threads;
};

int cmd_eval(const EvalFlags& f) {
  if (f.blackbox && f.surrogate.empty()) throw ConfigError("--blackbox needs --surrogate <checkpoint>");
  Loaded tgt = load_model(f.ckpt, f.bits_w, f.bits_a);
  RunConfig rc = tgt.rc;
  if (!f.data_dir.empty()) rc.data_dir = f.data_dir;
  rc.test_limit = f.test_limit;
  rc.train_limit = 1;
  rc.attacks = f.attacks;
  rc.attack_eps = f.eps;
  rc.attack_alpha = f.alpha;
  rc.attack_steps = f.steps;
  rc.tpgd_rho = f.rho;
  rc.attack_seed = f.seed;
  std::vector<AttackSpec> specs;
  for (const auto& a : attack_specs(rc))
    if (a.kind != AttackKind::natural) specs.push_back(a);
  auto [train, test] = load_splits<float>(rc);
  test.split = "test";

  std::optional<Loaded> sur;
  if (f.blackbox) sur = load_model(f.surrogate, f.bits_w, f.bits_a);
  Classifier<float> target{&tgt.model, &tgt.params};
  Classifier<float> surrogate{sur ? &sur->model : nullptr, sur ? &sur->params : nullptr};
  EvalOptions eo;
  eo.batch = f.batch;
  eo.threads = f.threads.value_or(rc.deterministic ? 1 : thread_count());
  eo.blackbox = f.blackbox;
  const EvalReport rep = evaluate(target, test, specs, sur ? &surrogate : nullptr, eo);

  const std::string table = eval_table(rep);
  std::cout << table;
  if (!f.out.empty()) {
    const fs::path out(f.out);
    fs::create_directories(out);
    json j = to_json(rep);
    j["checkpoint"] = f.ckpt;
    if (f.blackbox) j["surrogate"] = f.surrogate;
    write_text(out / "eval.json", j.dump(2) + "\n");
    write_text(out / "eval.txt", table);
    write_text(out / "config.txt", to_text(rc));
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct SurfaceFlags {
  std::string ckpt, loss = "ce", out, data_dir;
  std::size_t index = 0, grid = 33, mmd_batch = 64;
  double eps_max = 8;
  std::uint64_t seed = 0;
};

int cmd_surface(const SurfaceFlags& f) {
  SurfaceOptions so;
  so.resolution = f.grid;
  so.eps_max = f.eps_max / 255.0;
  so.seed = f.seed;
  so.mmd_batch = f.mmd_batch;
  if (so.resolution < 2) throw ConfigError("--grid must be at least 2");
  const SurfaceLoss kind = parse_surface_loss(f.loss);
  Loaded m = load_model(f.ckpt, std::nullopt, std::nullopt);
  if (!f.data_dir.empty()) m.rc.data_dir = f.data_dir;
  m.rc.train_limit = 1;
  m.rc.test_limit = 0;
  auto [train, test] = load_splits<float>(m.rc);
  SurfaceGrid g = loss_surface(Classifier<float>{&m.model, &m.params}, test, f.index, kind, so);
  g.model = f.ckpt;
  const std::string csv = surface_csv(g);
  if (f.out.empty()) {
    std::cout << csv;
  } else {
    const fs::path out(f.out);
    fs::create_directories(out);
    const std::string stem = "surface_" + std::to_string(f.index) + "_" + surface_loss_name(kind);
    write_text(out / (stem + ".csv"), csv);
    write_text(out / (stem + ".json"), to_json(g).dump() + "\n");
    std::cout << "max loss " << g.max() << "; wrote " << (out / (stem + ".csv")).string() << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct BoundFlags {
  std::string ckpt, pertset, attack = "pgd", out, data_dir;
  double eps = 8, alpha = 4, rho = 1;
  std::optional<double> eps_local;
  std::size_t steps = 20, test_limit = 0;
  std::uint64_t seed = 0;
  std::optional<std::size_t> threads;
};

int cmd_bound(const BoundFlags& f) {
  Loaded m = load_model(f.ckpt, std::nullopt, std::nullopt);
  const PerturbationSet<float> pset = perturbation_set_from<float>(load_checkpoint(f.pertset));
  if (!f.data_dir.empty()) m.rc.data_dir = f.data_dir;
  m.rc.train_limit = 1;
  m.rc.test_limit = f.test_limit;
  auto [train, test] = load_splits<float>(m.rc);
  AttackSpec target;
  target.kind = parse_attack(f.attack);
  target.eps = f.eps / 255.0;
  target.alpha = f.alpha / 255.0;
  target.steps = f.steps;
  target.rho = f.rho;
  target.seed = f.seed;
  BoundOptions bo;
  // Source domains use the training-time budgets recorded in the checkpoint.
  bo.eps = m.rc.eps / 255.0;
  bo.eps_local = f.eps_local ? *f.eps_local / 255.0 : m.rc.eps_local.value_or(m.rc.eps) / 255.0;
  bo.threads = f.threads.value_or(thread_count());
  const BoundReport rep = bound_report(Classifier<float>{&m.model, &m.params}, pset, test, target, bo);
  const json j = to_json(rep);
  if (f.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    const fs::path out(f.out);
    fs::create_directories(out);
    write_text(out / "bound.json", j.dump(2) + "\n");
    std::cout << "target risk " << rep.target_risk << ", rhs " << rep.rhs << " (lambda_hat " << rep.lambda_hat << "); "
              << (rep.holds ? "holds" : "violated") << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(double tol, std::uint64_t seed) {
  bool ok = true;
  for (const auto& r : run_gradcheck(tol, 1e-4, seed)) {
    std::cout << (r.passed ? "pass " : "FAIL ") << std::scientific << std::setprecision(2) << r.error << "  " << r.name << '\n';
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

int cmd_dataset_verify(const std::string& kind, const std::string& path) {
  RunConfig rc;
  rc.dataset = kind;
  rc.data_dir = path;
  validate(rc);
  auto [train, test] = load_splits<float>(rc);
  json j;
  j["kind"] = kind;
  for (const auto* ds : {&train, &test}) {
    std::vector<std::size_t> hist(ds->classes, 0);
    for (int l : ds->labels) ++hist[static_cast<std::size_t>(l)];
    std::string raw(reinterpret_cast<const char*>(ds->images.raw()), ds->images.size() * sizeof(float));
    std::string labels(ds->labels.begin(), ds->labels.end());
    const std::string name = ds == &train ? "train" : "test";
    j[name] = {{"count", ds->size()},
               {"shape", ds->images.shape()},
               {"label_histogram", hist},
               {"image_checksum", fnv1a(raw)},
               {"label_checksum", fnv1a(labels)}};
    std::cout << name << ": " << ds->size() << " samples, labels";
    for (std::size_t h : hist) std::cout << ' ' << h;
    std::cout << '\n';
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online domain-generalized adversarial training for quantized networks"};
  app.require_subcommand(1);

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train a natural or ODG-Q model");
  train->add_option("--config", tf.config, "key=value config file");
  train->add_option("--mode", tf.mode, "natural or odgq")->check(CLI::IsMember({"natural", "odgq"}));
  train->add_option("--out", tf.out, "output directory");
  train->add_option("--data-dir", tf.data_dir, "dataset directory");
  train->add_option("--nk", tf.nk, "number of online adversarial domains");
  train->add_option("--eps", tf.eps, "perturbation bound, /255 units");
  train->add_option("--eps-local", tf.eps_local, "local step magnitude, /255 units");
  train->add_option("--lambda", tf.lambda, "MMD weight");
  train->add_option("--bits-w", tf.bits_w, "weight bits");
  train->add_option("--bits-a", tf.bits_a, "activation bits");
  train->add_option("--epochs", tf.epochs, "natural epoch budget N_e (ODG-Q runs half)");
  train->add_option("--batch", tf.batch, "batch size");
  train->add_option("--train-limit", tf.train_limit, "use only the first n training images");
  train->add_option("--seed", tf.seed, "seed");
  train->add_flag("--deterministic", tf.deterministic, "keep wall times out of the log");

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "robust accuracy under attacks");
  eval->add_option("--ckpt", ef.ckpt, "model checkpoint")->required();
  eval->add_option("--attacks", ef.attacks, "comma-separated: natural,gn,fgsm,pgd,bim,tpgd");
  eval->add_option("--eps", ef.eps, "attack budget, /255 units");
  eval->add_option("--alpha", ef.alpha, "attack step, /255 units");
  eval->add_option("--steps", ef.steps, "iterations");
  eval->add_option("--rho", ef.rho, "TPGD boundary-loss divisor");
  eval->add_option("--seed", ef.seed, "attack seed");
  eval->add_flag("--blackbox", ef.blackbox, "also transfer attacks from --surrogate");
  eval->add_option("--surrogate", ef.surrogate, "surrogate checkpoint");
  eval->add_option("--out", ef.out, "output directory");
  eval->add_option("--data-dir", ef.data_dir, "dataset directory");
  eval->add_option("--batch", ef.batch, "evaluation batch size");
  eval->add_option("--test-limit", ef.test_limit, "use only the first n test images");
  eval->add_option("--bits-w", ef.bits_w, "override weight bits");
  eval->add_option("--bits-a", ef.bits_a, "override activation bits");
  eval->add_option("--threads", ef.threads, "worker threads (default ODGQ_THREADS or all cores)");

  SurfaceFlags sf;
  auto* surface = app.add_subcommand("surface", "loss surface around one test image");
  surface->add_option("--ckpt", sf.ckpt, "model checkpoint")->required();
  surface->add_option("--index", sf.index, "test image index");
  surface->add_option("--loss", sf.loss, "ce or mmd");
  surface->add_option("--eps-max", sf.eps_max, "grid extent, /255 units");
  surface->add_option("--grid", sf.grid, "points per axis");
  surface->add_option("--seed", sf.seed, "random direction seed");
  surface->add_option("--mmd-batch", sf.mmd_batch, "clean batch size for the mmd surface");
  surface->add_option("--out", sf.out, "output directory (default: CSV to stdout)");
  surface->add_option("--data-dir", sf.data_dir, "dataset directory");

  BoundFlags bf;
  auto* bound = app.add_subcommand("bound", "domain-generalization bound report");
  bound->add_option("--ckpt", bf.ckpt, "ODG-Q checkpoint")->required();
  bound->add_option("--pertset", bf.pertset, "saved perturbation set")->required();
  bound->add_option("--attack", bf.attack, "target attack");
  bound->add_option("--eps", bf.eps, "target attack budget, /255 units");
  bound->add_option("--alpha", bf.alpha, "target attack step, /255 units");
  bound->add_option("--steps", bf.steps, "target attack iterations");
  bound->add_option("--rho", bf.rho, "TPGD boundary-loss divisor");
  bound->add_option("--seed", bf.seed, "attack seed");
  bound->add_option("--eps-local", bf.eps_local, "local step for source domains, /255 units");
  bound->add_option("--test-limit", bf.test_limit, "use only the first n test images");
  bound->add_option("--out", bf.out, "output directory");
  bound->add_option("--data-dir", bf.data_dir, "dataset directory");
  bound->add_option("--threads", bf.threads, "worker threads");

  double gc_tol = 1e-4;
  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every primitive");
  gradcheck->add_option("--tolerance", gc_tol, "max relative error");
  gradcheck->add_option("--seed", gc_seed, "seed for the check points");

  std::string ds_kind = "mnist", ds_path;
  auto* dataset = app.add_subcommand("dataset", "dataset utilities");
  auto* verify = dataset->add_subcommand("verify", "parse a dataset and summarize it");
  dataset->require_subcommand(1);
  verify->add_option("--kind", ds_kind, "mnist or cifar10")->check(CLI::IsMember({"mnist", "cifar10"}));
  verify->add_option("--path", ds_path, "dataset directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(tf);
    if (*eval) return cmd_eval(ef);
    if (*surface) return cmd_surface(sf);
    if (*bound) return cmd_bound(bf);
    if (*gradcheck) return cmd_gradcheck(gc_tol, gc_seed);
    if (*verify) return cmd_dataset_verify(ds_kind, ds_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
