#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "distembed/tensor.hpp"

namespace distembed {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct GradCheckOptions {
  double step = 1e-5;
  // Entries sampled per tensor; 0 checks every entry.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double relative_floor = 1e-3;
  // Applied to each analytic gradient before comparison; used to confirm the
  // checker catches a broken backward pass.
  std::function<void(const std::string&, std::vector<double>&)> mutate_analytic;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_tensor;

  bool passed(double tolerance) const { return max_relative_error <= tolerance; }
};

/// Compares backward() of `loss_fn` against central finite differences for
/// the given leaf tensors. The leaves are perturbed in place and restored.
GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, const NamedTensors& leaves,
                                const GradCheckOptions& options = {});

}  // namespace distembed
