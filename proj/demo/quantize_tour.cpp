// Prints how each bitwidth maps a ramp of weights and activations.

#include <iomanip>
#include <iostream>

#include "odgq/quantization.hpp"

using namespace odgq;

int main() {
  std::vector<double> ramp;
  for (int i = -8; i <= 8; ++i) ramp.push_back(i / 8.0);
  const Tensor<double> w({ramp.size()}, ramp);
  std::cout << std::fixed << std::setprecision(3);
  std::cout << "input   ";
  for (double v : ramp) std::cout << std::setw(7) << v;
  std::cout << '\n';
  for (int bits : {2, 3, 4, 8}) {
    std::cout << "w" << bits << "-bit  ";
    for (double v : quantize_weight(w, bits).data()) std::cout << std::setw(7) << v;
    std::cout << '\n';
  }
  for (int bits : {2, 4}) {
    std::cout << "a" << bits << "-bit  ";
    for (double v : quantize_activation(w, bits).data()) std::cout << std::setw(7) << v;
    std::cout << '\n';
  }
  // XNOR: one scale per output channel
  auto k = Tensor<double>::matrix({{0.5, -0.25, 0.0, 1.0}, {-2.0, 2.0, 1.0, -1.0}});
  std::cout << "xnor    ";
  for (double v : binarize_xnor(k, ScaleGranularity::per_output_channel).data()) std::cout << std::setw(7) << v;
  std::cout << '\n';
}
