#include <cmath>
#include <numbers>
#include <random>

#include "distembed/error.hpp"
#include "distembed/gaussian.hpp"
#include "doctest.h"

using namespace distembed;

namespace {

DiagGaussian random_gaussian(std::mt19937_64& rng, std::size_t d) {
  std::uniform_real_distribution<double> mean(-2.0, 2.0);
  std::uniform_real_distribution<double> var(0.2, 3.0);
  std::vector<double> m(d), v(d);
  for (std::size_t i = 0; i < d; ++i) {
    m[i] = mean(rng);
    v[i] = var(rng);
  }
  return {m, v};
}

}  // namespace

TEST_CASE("kl_divergence closed form") {
  const DiagGaussian q({0.3, -1.0}, {0.5, 2.0});
  CHECK(kl_divergence(q, q) == doctest::Approx(0.0));

  CHECK(kl_divergence(DiagGaussian({0.0}, {1.0}), DiagGaussian({1.0}, {1.0})) == doctest::Approx(0.5));

  const DiagGaussian half({0.0}, {0.5});
  const DiagGaussian unit({0.0}, {1.0});
  const double expected = 0.5 * std::log(2.0) - 0.25;
  CHECK(expected == doctest::Approx(0.09657).epsilon(1e-4));
  CHECK(kl_divergence(half, unit) == doctest::Approx(expected).epsilon(1e-14));
  const auto mc = mc_kl_estimate(half, unit, 100000, 7);
  CHECK(std::abs(mc.estimate - expected) <= 3.0 * mc.standard_error);

  CHECK_THROWS_AS(kl_divergence(half, q), Error);
}

TEST_CASE("kl properties on random pairs") {
  std::mt19937_64 rng(1);
  bool saw_asymmetry = false;
  for (int i = 0; i < 10000; ++i) {
    const auto d = 1 + rng() % 8;
    const auto q = random_gaussian(rng, d);
    const auto p = random_gaussian(rng, d);
    CHECK(kl_divergence(q, p) >= 0.0);
    CHECK(std::abs(kl_divergence(q, q)) <= 1e-12);
    if (std::abs(kl_divergence(q, p) - kl_divergence(p, q)) > 1e-6) saw_asymmetry = true;
  }
  CHECK(saw_asymmetry);
}

TEST_CASE("wasserstein_sq") {
  const DiagGaussian a({0, 0}, {1, 4});
  const DiagGaussian b({3, 0}, {4, 1});
  CHECK(wasserstein_sq(a, a) == 0.0);
  CHECK(wasserstein_sq(a, b) == doctest::Approx(11.0).epsilon(1e-14));
  CHECK(wasserstein_sq(DiagGaussian({0, 0}, {2, 2}), DiagGaussian({0, 1}, {2, 2})) == doctest::Approx(1.0));

  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    const auto x = random_gaussian(rng, 5);
    const auto y = random_gaussian(rng, 5);
    CHECK(std::abs(wasserstein_sq(x, y) - wasserstein_sq(y, x)) <= 1e-12);
    CHECK(wasserstein_sq(x, y) > 0.0);
    CHECK(wasserstein_sq(x, x) == 0.0);
  }
  CHECK_THROWS_AS(wasserstein_sq(a, DiagGaussian({0}, {1})), Error);
}

TEST_CASE("log_pdf") {
  const double z0[] = {0.0};
  CHECK(log_pdf(DiagGaussian({0.0}, {1.0}), z0) == doctest::Approx(-0.5 * std::log(2 * std::numbers::pi)));
  CHECK(log_pdf(DiagGaussian({0.0}, {1.0}), z0) == doctest::Approx(-0.91894).epsilon(1e-5));

  const DiagGaussian g({1.0, -2.0}, {0.3, 2.5});
  const double at_mean = -0.5 * (std::log(2 * std::numbers::pi * 0.3) + std::log(2 * std::numbers::pi * 2.5));
  CHECK(log_pdf(g, g.mean()) == doctest::Approx(at_mean));

  // Midpoint quadrature over +-6 sd: the density must integrate to 1.
  const int steps = 600;
  const double sx = std::sqrt(0.3), sy = std::sqrt(2.5);
  const double hx = 12 * sx / steps, hy = 12 * sy / steps;
  double mass = 0.0;
  for (int i = 0; i < steps; ++i)
    for (int j = 0; j < steps; ++j) {
      const double z[] = {1.0 - 6 * sx + (i + 0.5) * hx, -2.0 - 6 * sy + (j + 0.5) * hy};
      mass += std::exp(log_pdf(g, z)) * hx * hy;
    }
  CHECK(std::abs(mass - 1.0) <= 1e-3);

  const double bad[] = {1.0};
  CHECK_THROWS_AS(log_pdf(g, bad), Error);
}

TEST_CASE("sample") {
  const DiagGaussian tight({1.0, -1.0}, {0.0, 0.0});
  CHECK(tight.variance()[0] == kVarianceFloor);
  for (const auto& z : sample(tight, 5, 3)) {
    CHECK(std::abs(z[0] - 1.0) <= 3 * std::sqrt(kVarianceFloor));
    CHECK(std::abs(z[1] + 1.0) <= 3 * std::sqrt(kVarianceFloor));
  }

  const auto zs = sample(DiagGaussian({0.0}, {1.0}), 100000, 4);
  double m = 0.0, v = 0.0;
  for (const auto& z : zs) m += z[0];
  m /= zs.size();
  for (const auto& z : zs) v += (z[0] - m) * (z[0] - m);
  v /= zs.size() - 1;
  CHECK(std::abs(m) <= 0.02);
  CHECK(std::abs(v - 1.0) <= 0.02);

  CHECK(sample(DiagGaussian({0.0}, {1.0}), 10, 9) == sample(DiagGaussian({0.0}, {1.0}), 10, 9));
}

TEST_CASE("mc_kl_estimate") {
  const DiagGaussian g({0.5, 1.0}, {1.0, 0.3});
  const auto same = mc_kl_estimate(g, g, 1000, 5);
  CHECK(std::abs(same.estimate) <= 3 * same.standard_error + 1e-12);

  const DiagGaussian q({0.0}, {0.5});
  const DiagGaussian p({0.0}, {1.0});
  // Average the SE ratio over a few seeds; a single pair is noisy.
  double ratio = 0.0;
  for (std::uint64_t s = 0; s < 8; ++s) {
    ratio += mc_kl_estimate(q, p, 20000, s).standard_error / mc_kl_estimate(q, p, 40000, s + 100).standard_error;
  }
  CHECK(ratio / 8 == doctest::Approx(std::sqrt(2.0)).epsilon(0.05));

  CHECK_THROWS_AS(mc_kl_estimate(q, p, 1, 0), Error);
  CHECK_THROWS_AS(mc_kl_estimate(q, g, 10, 0), Error);
}

TEST_CASE("construction errors") {
  CHECK_THROWS_AS(DiagGaussian({}, {}), Error);
  CHECK_THROWS_AS(DiagGaussian({1.0}, {1.0, 2.0}), Error);
  CHECK_THROWS_AS(DiagGaussian({1.0}, {-1.0}), Error);
}
