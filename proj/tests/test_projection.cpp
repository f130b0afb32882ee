#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "distembed/error.hpp"
#include "distembed/projection.hpp"
#include "distembed/seed.hpp"
#include "doctest.h"

using namespace distembed;

namespace {

std::vector<std::string> names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("id" + std::to_string(i));
  return out;
}

double dist2d(const ProjectedDistribution& a, const ProjectedDistribution& b) {
  return std::hypot(a.mean[0] - b.mean[0], a.mean[1] - b.mean[1]);
}

// Largest eigenvalue of the pooled sample covariance by power iteration.
double top_eigenvalue(const std::vector<std::vector<double>>& rows) {
  const std::size_t d = rows.front().size();
  std::vector<double> mu(d, 0.0);
  for (const auto& r : rows)
    for (std::size_t j = 0; j < d; ++j) mu[j] += r[j] / rows.size();
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (const auto& r : rows)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a][b] += (r[a] - mu[a]) * (r[b] - mu[b]) / (rows.size() - 1);
  std::vector<double> v(d, 1.0);
  double lambda = 0.0;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> w(d, 0.0);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) w[a] += cov[a][b] * v[b];
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    for (std::size_t a = 0; a < d; ++a) v[a] = w[a] / norm;
    lambda = norm;
  }
  return lambda;
}

}  // namespace

TEST_CASE("isotropic distribution projects to a round cloud") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = project_distributions({DiagGaussian::isotropic(std::vector<double>(8, 1.0), 2.0)}, {"a"}, 2000,
                                         ProjectionMethod::Pca, seed);
    REQUIRE(p.size() == 1);
    CHECK(p[0].points.size() == 2000);
    const double ratio = p[0].variance[0] / p[0].variance[1];
    CHECK(ratio >= 0.9);
    CHECK(ratio <= 1.1);
    CHECK(p[0].variance[0] >= p[0].variance[1]);
  }
}

TEST_CASE("first axis variance is the top eigenvalue of the pooled samples") {
  const std::vector<DiagGaussian> ds{DiagGaussian({0, 0, 0}, {1.0, 0.5, 2.0}), DiagGaussian({3, -1, 2}, {0.3, 1.0, 0.7})};
  const auto p = project_distributions(ds, names(2), 500, ProjectionMethod::Pca, 11);
  std::vector<std::vector<double>> pooled;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (auto& z : sample(ds[i], 500, derive_seed(11, i))) pooled.push_back(z);
  }
  double mx = 0.0, var = 0.0;
  for (const auto& d : p)
    for (const auto& q : d.points) mx += q[0] / 1000.0;
  for (const auto& d : p)
    for (const auto& q : d.points) var += (q[0] - mx) * (q[0] - mx) / 999.0;
  CHECK(std::abs(mx) <= 1e-9);
  CHECK(var == doctest::Approx(top_eigenvalue(pooled)).epsilon(1e-8));
}

TEST_CASE("well separated means stay separated") {
  std::vector<double> far(10, 0.0);
  far[3] = 30.0;
  const auto p = project_distributions({DiagGaussian::isotropic(std::vector<double>(10, 0.0), 1.0),
                                        DiagGaussian::isotropic(far, 1.0)},
                                       names(2), 2000, ProjectionMethod::Pca, 3);
  const double sd = std::sqrt(std::max({p[0].variance[0], p[0].variance[1], p[1].variance[0], p[1].variance[1]}));
  CHECK(dist2d(p[0], p[1]) > 6.0 * sd);
  CHECK(dist2d(p[0], p[1]) == doctest::Approx(30.0).epsilon(0.02));
}

TEST_CASE("largest separation remains the farthest pair") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 10; ++trial) {
    // One dominant direction carries the widest pair; the rest is small jitter.
    const std::size_t d = 12, m = 5;
    std::vector<double> dir(d);
    double norm = 0.0;
    for (auto& x : dir) norm += (x = n01(rng)) * x;
    for (auto& x : dir) x /= std::sqrt(norm);
    std::vector<DiagGaussian> ds;
    const double offsets[] = {-20.0, -4.0, 0.0, 5.0, 20.0};
    for (std::size_t i = 0; i < m; ++i) {
      std::vector<double> mean(d);
      for (std::size_t j = 0; j < d; ++j) mean[j] = offsets[i] * dir[j] + 1.5 * n01(rng);
      ds.push_back(DiagGaussian::isotropic(mean, 0.5));
    }
    const auto p = project_distributions(ds, names(m), 1000, ProjectionMethod::Pca, trial);
    std::size_t best_a = 0, best_b = 0, proj_a = 0, proj_b = 0;
    double best = -1, best_proj = -1;
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = a + 1; b < m; ++b) {
        double dd = 0.0;
        for (std::size_t j = 0; j < d; ++j) dd += std::pow(ds[a].mean()[j] - ds[b].mean()[j], 2);
        if (dd > best) best = dd, best_a = a, best_b = b;
        if (dist2d(p[a], p[b]) > best_proj) best_proj = dist2d(p[a], p[b]), proj_a = a, proj_b = b;
      }
    CHECK(best_a == proj_a);
    CHECK(best_b == proj_b);
  }
}

TEST_CASE("doubling source variance does not shrink any re-fit variance") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.2, 1.5);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<DiagGaussian> base, doubled;
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<double> mean(6, 0.0), var(6);
      mean[i % 6] = 15.0 * static_cast<double>(i);
      for (auto& v : var) v = u(rng);
      std::vector<double> var2 = var;
      for (auto& v : var2) v *= 2.0;
      base.emplace_back(mean, var);
      doubled.emplace_back(mean, var2);
    }
    const auto a = project_distributions(base, names(4), 1000, ProjectionMethod::Pca, trial);
    const auto b = project_distributions(doubled, names(4), 1000, ProjectionMethod::Pca, trial);
    for (std::size_t i = 0; i < 4; ++i)
      for (int ax = 0; ax < 2; ++ax) {
        CHECK(a[i].variance[ax] >= 0.0);
        CHECK(b[i].variance[ax] >= a[i].variance[ax]);
      }
  }
}

TEST_CASE("determinism and export") {
  const std::vector<DiagGaussian> ds{DiagGaussian({0, 0, 0}, {1, 1, 1}), DiagGaussian({5, 0, 0}, {2, 1, 1})};
  const auto a = project_distributions(ds, {"7", "12"}, 300, ProjectionMethod::Pca, 4);
  const auto b = project_distributions(ds, {"7", "12"}, 300, ProjectionMethod::Pca, 4);
  CHECK(projection_csv(a) == projection_csv(b));
  CHECK(ellipses_svg(a, {.include_points = true}) == ellipses_svg(b, {.include_points = true}));

  const auto svg = ellipses_svg(a);
  std::size_t ellipses = 0;
  for (auto pos = svg.find("<ellipse"); pos != std::string::npos; pos = svg.find("<ellipse", pos + 1)) ++ellipses;
  CHECK(ellipses == 2);
  CHECK(svg.find(">7</text>") != std::string::npos);
  CHECK(svg.find(">12</text>") != std::string::npos);

  const auto csv = projection_csv(a);
  CHECK(csv.rfind("label,mean_x,mean_y,var_x,var_y\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  ProjectedDistribution dot{"z", {0.0, 0.0}, {0.0, 0.0}, {}};
  const auto degenerate = ellipses_svg({dot, a[0]});
  CHECK(degenerate.find("class=\"dot\"") != std::string::npos);

  const auto path = std::filesystem::temp_directory_path() / "distembed_projection.svg";
  export_ellipses(a, path);
  const auto first = std::filesystem::file_size(path);
  export_ellipses(a, path);
  CHECK(std::filesystem::file_size(path) == first);
  std::filesystem::remove(path);
}

TEST_CASE("projection errors") {
  const std::vector<DiagGaussian> one{DiagGaussian({0.0}, {1.0})};
  try {
    project_distributions(one, {"a"}, 100, ProjectionMethod::Tsne, 0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Capability);
    CHECK(std::string(e.what()).find("pca") != std::string::npos);
  }
  CHECK_THROWS_AS(project_distributions({}, {}, 100), Error);
  CHECK_THROWS_AS(project_distributions(one, {}, 100), Error);
  CHECK_THROWS_AS(project_distributions({DiagGaussian({0.0}, {1.0}), DiagGaussian({0.0, 1.0}, {1.0, 1.0})},
                                        names(2), 100),
                  Error);
  CHECK(parse_projection_method("pca") == ProjectionMethod::Pca);
  CHECK_THROWS_AS(parse_projection_method("umap"), Error);

  // d = 1: the second axis is flat.
  const auto p = project_distributions(one, {"a"}, 200);
  CHECK(p[0].variance[1] == 0.0);
}
