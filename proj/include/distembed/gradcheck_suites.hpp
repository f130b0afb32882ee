#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "distembed/gradcheck.hpp"

namespace distembed {

inline constexpr double kGradCheckTolerance = 1e-4;

struct SuiteReport {
  std::string component;
  GradCheckResult result;
  bool passed = false;
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  double tolerance = kGradCheckTolerance;
  // Components whose analytic gradients are negated before comparison
  // (fault injection; the matching suite must then fail).
  std::vector<std::string> inject_sign_error;
};

/// Finite-difference checks for every differentiable component: tensor ops,
/// the variance heads, the distribution and GM losses (with prior
/// parameters) and the full model.
std::vector<SuiteReport> run_gradcheck_suites(const SuiteOptions& options = {});

std::vector<std::string> gradcheck_components();

}  // namespace distembed
