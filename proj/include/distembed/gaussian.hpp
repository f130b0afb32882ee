#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace distembed {

inline constexpr double kVarianceFloor = 1e-8;

/// Diagonal Gaussian N(mean, diag(variance)). Variances, not standard
/// deviations, are stored; entries below kVarianceFloor are raised to it.
class DiagGaussian {
 public:
  DiagGaussian(std::vector<double> mean, std::vector<double> variance);

  static DiagGaussian isotropic(std::vector<double> mean, double variance);

  std::size_t dim() const { return mean_.size(); }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& variance() const { return variance_; }

  bool operator==(const DiagGaussian&) const = default;

 private:
  std::vector<double> mean_;
  std::vector<double> variance_;
};

/// Closed-form KL(q || p) for diagonal Gaussians.
double kl_divergence(const DiagGaussian& q, const DiagGaussian& p);

/// Squared 2-Wasserstein distance: |mq - mp|^2 + sum (sqrt vq - sqrt vp)^2.
double wasserstein_sq(const DiagGaussian& a, const DiagGaussian& b);

double log_pdf(const DiagGaussian& g, std::span<const double> z);

/// z = mean + sqrt(variance) * eps with eps ~ N(0, I); deterministic per seed.
std::vector<std::vector<double>> sample(const DiagGaussian& g, std::size_t n, std::uint64_t seed);

struct MonteCarloEstimate {
  double estimate;
  double standard_error;
};

/// Monte-Carlo estimate of E_q[ln q(z) - ln p(z)] with its standard error.
MonteCarloEstimate mc_kl_estimate(const DiagGaussian& q, const DiagGaussian& p, std::size_t n, std::uint64_t seed);

}  // namespace distembed
