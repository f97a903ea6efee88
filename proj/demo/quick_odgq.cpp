// A few minutes of ODG-Q on 2000 digits, then clean and PGD accuracy.

#include <iostream>

#include "odgq/odgq.hpp"

using namespace odgq;

int main(int argc, char** argv) {
  const std::string dir = argc > 1 ? argv[1] : ODGQ_DATA_DIR;
  RunConfig rc;
  rc.data_dir = dir;
  rc.train_limit = 2000;
  rc.test_limit = 500;
  rc.epochs = 6;
  rc.widths = {8, 16};
  auto [train, test] = load_splits<float>(rc);
  const Model model = make_model(arch_config(rc));
  auto params = init_parameters<float>(model, rc.seed);
  auto res = train_odgq(model, params, train, train_config(rc), [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " k=" << *r.k << " loss " << r.task_loss << " mmd " << r.mmd_loss << " acc "
              << r.train_accuracy << '\n';
  });
  Classifier<float> clf{&model, &res.params};
  std::cout << eval_table(evaluate(clf, test, attack_specs(rc)));
}
