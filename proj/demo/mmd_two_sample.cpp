// MMD^2 between Gaussian clouds as one of them drifts away.

#include <iostream>

#include "odgq/mmd.hpp"
#include "odgq/random.hpp"

using namespace odgq;

int main() {
  Rng rng(7);
  const auto x = normal_tensor<double>({64, 5}, rng, 0.0, 1.0);
  for (double shift : {0.0, 0.25, 0.5, 1.0, 2.0}) {
    auto y = normal_tensor<double>({64, 5}, rng, 0.0, 1.0);
    for (double& v : y.data()) v += shift;
    const double sigma = median_bandwidth(concat_leading(x, y));
    std::cout << "shift " << shift << "  sigma " << sigma << "  mmd2 " << mmd_squared_value(x, y, KernelConfig{sigma}) << '\n';
  }
}
