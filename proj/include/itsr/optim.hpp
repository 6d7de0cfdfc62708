#pragma once

#include "itsr/abi.hpp"

#include <span>
#include <string>
#include <vector>

#include "itsr/tensor.hpp"

namespace itsr::inline ITSR_ABI {

struct SgdHyper {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// One parameter under optimisation and its velocity buffer.
struct SgdSlot {
  std::string name;
  Tensor param;
  std::vector<Real> velocity;  // zero-initialised, same length as param
  bool decay = true;           // weight decay applies to this parameter
};

/// v <- momentum*v + (grad + wd*param); param <- param - lr*v.
/// Parameters without a gradient are treated as having a zero gradient.
/// Throws ConfigError when lr <= 0.
void sgd_momentum_step(std::span<SgdSlot> slots, const SgdHyper& hyper);

}  // namespace itsr
