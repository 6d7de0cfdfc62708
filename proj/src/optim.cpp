#include "itsr/optim.hpp"

#include "itsr/errors.hpp"

namespace itsr::inline ITSR_ABI {

void sgd_momentum_step(std::span<SgdSlot> slots, const SgdHyper& hyper) {
  if (!(hyper.lr > 0.0)) {
    throw ConfigError("learning rate must be positive, got " +
                      std::to_string(hyper.lr));
  }
  if (hyper.momentum < 0.0 || hyper.weight_decay < 0.0) {
    throw ConfigError("momentum and weight decay must be non-negative");
  }
  const Real lr = static_cast<Real>(hyper.lr);
  const Real mu = static_cast<Real>(hyper.momentum);
  for (auto& slot : slots) {
    auto values = slot.param.data();
    auto grad = slot.param.grad();
    if (slot.velocity.size() != values.size()) slot.velocity.assign(values.size(), Real(0));
    const Real wd = slot.decay ? static_cast<Real>(hyper.weight_decay) : Real(0);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Real g = grad.empty() ? Real(0) : grad[i];
      slot.velocity[i] = mu * slot.velocity[i] + (g + wd * values[i]);
      values[i] -= lr * slot.velocity[i];
    }
  }
}

}  // namespace itsr
