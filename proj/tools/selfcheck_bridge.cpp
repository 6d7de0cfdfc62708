#include "selfcheck_bridge.hpp"

#include "itsr/selfcheck.hpp"

namespace itsr::cli {

std::vector<BridgedOutcome> double_precision_gradient_checks(const std::string& fault_op) {
  std::vector<BridgedOutcome> out;
  for (auto& c : itsr::gradient_checks(fault_op)) {
    out.push_back({c.suite, c.name, c.passed, c.error, c.detail});
  }
  return out;
}

double double_precision_tolerance() { return itsr::gradient_tolerance(); }

}  // namespace itsr::cli
