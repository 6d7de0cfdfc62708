#pragma once

#include "itsr/abi.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace itsr::inline ITSR_ABI {

struct CheckOutcome {
  std::string suite;
  std::string name;
  bool passed = false;
  double error = 0.0;
  std::string detail;
};

/// Relative-error bound used by the gradient checks of this build.
double gradient_tolerance();

/// Finite-difference checks of every differentiable op and of the contrastive
/// loss. A non-empty `fault_op` scales that op's upstream gradient on every
/// tape (a deliberately broken backward rule for exercising the checker).
std::vector<CheckOutcome> gradient_checks(std::string_view fault_op = {});

/// query_topk against a brute-force sort on random archives with planted ties.
std::vector<CheckOutcome> retrieval_checks();

/// Caption metrics against pinned hand-computed values.
std::vector<CheckOutcome> metric_checks();

}  // namespace itsr
