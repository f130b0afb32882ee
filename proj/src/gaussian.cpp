#include "distembed/gaussian.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "distembed/error.hpp"

namespace distembed {

namespace {

void check_same_dim(const DiagGaussian& a, const DiagGaussian& b, const char* op) {
  if (a.dim() != b.dim()) {
    throw Error(ErrorKind::IncompatibleShape,
                std::string(op) + ": dimensions " + std::to_string(a.dim()) + " and " + std::to_string(b.dim()));
  }
}

}  // namespace

DiagGaussian::DiagGaussian(std::vector<double> mean, std::vector<double> variance)
    : mean_(std::move(mean)), variance_(std::move(variance)) {
  if (mean_.empty() || mean_.size() != variance_.size()) {
    throw Error(ErrorKind::IncompatibleShape, "DiagGaussian needs equal, non-zero mean/variance lengths (" +
                                                  std::to_string(mean_.size()) + " vs " +
                                                  std::to_string(variance_.size()) + ")");
  }
  for (std::size_t i = 0; i < mean_.size(); ++i) {
    if (!std::isfinite(mean_[i]) || !std::isfinite(variance_[i]) || variance_[i] < 0.0) {
      throw Error(ErrorKind::Domain, "DiagGaussian entry " + std::to_string(i) + " is not a valid mean/variance");
    }
    variance_[i] = std::max(variance_[i], kVarianceFloor);
  }
}

DiagGaussian DiagGaussian::isotropic(std::vector<double> mean, double variance) {
  const auto d = mean.size();
  return DiagGaussian(std::move(mean), std::vector<double>(d, variance));
}

double kl_divergence(const DiagGaussian& q, const DiagGaussian& p) {
  check_same_dim(q, p, "kl_divergence");
  double total = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double vq = q.variance()[i];
    const double vp = p.variance()[i];
    const double dm = q.mean()[i] - p.mean()[i];
    total += std::log(vp / vq) + vq / vp - 1.0 + dm * dm / vp;
  }
  return std::max(0.5 * total, 0.0);
}

double wasserstein_sq(const DiagGaussian& a, const DiagGaussian& b) {
  check_same_dim(a, b, "wasserstein_sq");
  double total = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    const double dm = a.mean()[i] - b.mean()[i];
    const double ds = std::sqrt(a.variance()[i]) - std::sqrt(b.variance()[i]);
    total += dm * dm + ds * ds;
  }
  return total;
}

double log_pdf(const DiagGaussian& g, std::span<const double> z) {
  if (z.size() != g.dim()) {
    throw Error(ErrorKind::IncompatibleShape, "log_pdf: point has dimension " + std::to_string(z.size()) +
                                                  ", distribution " + std::to_string(g.dim()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = g.variance()[i];
    const double dz = z[i] - g.mean()[i];
    total += std::log(2.0 * std::numbers::pi * v) + dz * dz / v;
  }
  return -0.5 * total;
}

std::vector<std::vector<double>> sample(const DiagGaussian& g, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> scale(g.dim());
  for (std::size_t i = 0; i < g.dim(); ++i) scale[i] = std::sqrt(g.variance()[i]);
  std::vector<std::vector<double>> out(n, std::vector<double>(g.dim()));
  for (auto& z : out) {
    for (std::size_t i = 0; i < g.dim(); ++i) z[i] = g.mean()[i] + scale[i] * normal(rng);
  }
  return out;
}

MonteCarloEstimate mc_kl_estimate(const DiagGaussian& q, const DiagGaussian& p, std::size_t n, std::uint64_t seed) {
  check_same_dim(q, p, "mc_kl_estimate");
  if (n < 2) throw Error(ErrorKind::InvalidConfig, "mc_kl_estimate needs at least 2 samples");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(q.dim());
  // Welford accumulation of the log-ratio.
  double mean = 0.0, m2 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < q.dim(); ++i) z[i] = q.mean()[i] + std::sqrt(q.variance()[i]) * normal(rng);
    const double x = log_pdf(q, z) - log_pdf(p, z);
    const double delta = x - mean;
    mean += delta / static_cast<double>(k + 1);
    m2 += delta * (x - mean);
  }
  const double var = m2 / static_cast<double>(n - 1);
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

}  // namespace distembed
