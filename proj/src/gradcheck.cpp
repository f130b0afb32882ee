#include "distembed/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "distembed/error.hpp"

namespace distembed {

GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, const NamedTensors& leaves,
                                const GradCheckOptions& options) {
  for (const auto& [name, t] : leaves) {
    auto leaf = t;
    leaf.zero_grad();
    if (!leaf.requires_grad()) leaf.set_requires_grad(true);
  }
  loss_fn().backward();

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  for (const auto& [name, t] : leaves) {
    auto leaf = t;
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    if (options.mutate_analytic) options.mutate_analytic(name, analytic);

    std::vector<std::size_t> entries(leaf.numel());
    std::iota(entries.begin(), entries.end(), 0);
    if (options.max_entries_per_tensor > 0 && entries.size() > options.max_entries_per_tensor) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_tensor);
      std::sort(entries.begin(), entries.end());
    }

    auto values = leaf.mutable_data();
    NoGradGuard no_grad;
    for (auto i : entries) {
      const double original = values[i];
      values[i] = original + options.step;
      const double plus = loss_fn().item();
      values[i] = original - options.step;
      const double minus = loss_fn().item();
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        throw Error(ErrorKind::NumericFailure, "non-finite gradient in " + name);
      }
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.relative_floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      if (err > result.max_relative_error || result.worst_tensor.empty()) {
        result.max_relative_error = std::max(err, result.max_relative_error);
        result.worst_tensor = name;
      }
      ++result.entries_checked;
    }
    leaf.zero_grad();
  }
  return result;
}

}  // namespace distembed
