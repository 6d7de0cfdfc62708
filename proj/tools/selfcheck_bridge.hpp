#pragma once

#include <string>
#include <vector>

namespace itsr::cli {

struct BridgedOutcome {
  std::string suite;
  std::string name;
  bool passed;
  double error;
  std::string detail;
};

/// Gradient checks run by the double-precision build.
std::vector<BridgedOutcome> double_precision_gradient_checks(const std::string& fault_op);
double double_precision_tolerance();

}  // namespace itsr::cli
