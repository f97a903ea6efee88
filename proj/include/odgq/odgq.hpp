#pragma once

#include "odgq/tensor.hpp"
#include "odgq/random.hpp"
#include "odgq/autodiff.hpp"
#include "odgq/quantization.hpp"
#include "odgq/model.hpp"
#include "odgq/attacks.hpp"
#include "odgq/mmd.hpp"
#include "odgq/data.hpp"
#include "odgq/checkpoint.hpp"
#include "odgq/trainer.hpp"
#include "odgq/eval.hpp"
#include "odgq/config.hpp"
#include "odgq/gradcheck.hpp"
