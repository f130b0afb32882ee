#include <cmath>
#include <numeric>
#include <random>

#include "distembed/error.hpp"
#include "distembed/gradcheck.hpp"
#include "distembed/sigma_net.hpp"
#include "doctest.h"

using namespace distembed;

namespace {

Tensor random_map(Shape shape, std::uint64_t seed, bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n01(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Nested-loop 3x3 stride-1 pad-1 min pooling of one HWC channel.
double naive_min3(const Tensor& x, std::size_t y, std::size_t xx, std::size_t c) {
  const long H = x.dim(0), W = x.dim(1), C = x.dim(2);
  double best = 1e300;
  for (long dy = -1; dy <= 1; ++dy)
    for (long dx = -1; dx <= 1; ++dx) {
      const long yy = long(y) + dy, xc = long(xx) + dx;
      if (yy < 0 || xc < 0 || yy >= H || xc >= W) continue;
      best = std::min(best, x.data()[(yy * W + xc) * C + c]);
    }
  return best;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(SigmaNetConfig{.channels = 8}.validate());
  CHECK_THROWS_AS(SigmaNetConfig{.channels = 6}.validate(), Error);
  SigmaNetConfig strided{.channels = 8};
  strided.fusion_pool.sh = 2;
  CHECK_THROWS_AS(strided.validate(), Error);
}

TEST_CASE("fusion on constant inputs") {
  const SigmaNetConfig cfg{.channels = 8};
  const auto params = SigmaNetParams::initialise(cfg, 1);
  const auto f1 = Tensor::full({4, 5, 2}, 1.5);
  const auto f2 = Tensor::full({4, 5, 2}, -0.5);
  const auto products = fusion_products(f1, f2, cfg.fusion_pool);
  for (double v : products.data()) CHECK(v == doctest::Approx(-0.75));

  const auto fused = uncertainty_fusion(f1, f2, params, cfg, Mode::Eval, 0);
  CHECK(fused.shape() == Shape{4, 5, 2});
  for (std::size_t i = 0; i < fused.numel(); ++i) CHECK(fused.data()[i] == fused.data()[i % 2]);

  // Bilinear product equals each of the four fusion groups on constants.
  const auto bm = mul(f1, f2);
  for (std::size_t g = 0; g < 4; ++g) CHECK(slice(products, 2, 2 * g, 2).to_vector() == bm.to_vector());
}

TEST_CASE("fusion min pooling around a spike") {
  const SigmaNetConfig cfg{.channels = 4};
  std::vector<double> v(5 * 5, 1.0);
  v[2 * 5 + 2] = 0.0;  // a single low spike in the centre
  const Tensor f1({5, 5, 1}, v);
  const Tensor f2 = Tensor::full({5, 5, 1}, 1.0);
  const auto products = fusion_products(f1, f2, cfg.fusion_pool);
  const auto min_min = slice(products, 2, 0, 1);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      const double expected = naive_min3(f1, y, x, 0);
      CHECK(min_min.data()[y * 5 + x] == expected);
      const bool window_hits_spike = std::abs(long(y) - 2) <= 1 && std::abs(long(x) - 2) <= 1;
      CHECK(expected == (window_hits_spike ? 0.0 : 1.0));
    }
}

TEST_CASE("zero parameters give ln 2 + floor") {
  const SigmaNetConfig cfg{.channels = 8};
  const auto zeros = SigmaNetParams::zeros(cfg);
  const auto f = random_map({3, 4, 8}, 2);
  const double expected = std::log(2.0) + 1e-6;
  for (double v : sigma_forward(f, zeros, cfg, Mode::Eval, 0).to_vector()) CHECK(v == doctest::Approx(expected));
  for (double v : bm_variance_head(f, zeros, cfg).to_vector()) CHECK(v == doctest::Approx(expected));
  for (double v : mlp_variance_head(f, zeros, cfg).to_vector()) CHECK(v == doctest::Approx(expected));
}

TEST_CASE("positivity over random draws") {
  const SigmaNetConfig cfg{.channels = 8};
  std::mt19937_64 seeds(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto params = SigmaNetParams::initialise(cfg, seeds());
    const auto f = random_map({1 + seeds() % 4, 1 + seeds() % 4, 8}, seeds());
    for (auto kind : {VarianceHeadKind::Sigma, VarianceHeadKind::Bilinear, VarianceHeadKind::Mlp}) {
      const auto s = variance_head_forward(kind, f, params, cfg, Mode::Train, seeds());
      for (double v : s.data()) CHECK(v > 0.0);
    }
  }
}

TEST_CASE("spatial size preservation") {
  const SigmaNetConfig cfg{.channels = 8};
  const auto params = SigmaNetParams::initialise(cfg, 4);
  for (std::size_t h = 1; h <= 8; ++h)
    for (std::size_t w = 1; w <= 8; ++w) {
      const auto a = random_map({h, w, 2}, h * 10 + w);
      const auto b = random_map({h, w, 2}, h * 10 + w + 100);
      CHECK(uncertainty_fusion(a, b, params, cfg, Mode::Train, 1).shape() == Shape{h, w, 2});
    }
}

TEST_CASE("eval determinism and batch shapes") {
  const SigmaNetConfig cfg{.channels = 8};
  const auto params = SigmaNetParams::initialise(cfg, 5);
  const auto f = random_map({2, 4, 3, 8}, 6);
  const auto a = sigma_forward(f, params, cfg, Mode::Eval, 1).to_vector();
  const auto b = sigma_forward(f, params, cfg, Mode::Eval, 999).to_vector();
  CHECK(a == b);
  CHECK(a.size() == 16);
  // Batched output equals per-sample output.
  const auto single = sigma_forward(reshape(slice(f, 0, 1, 1), {4, 3, 8}), params, cfg, Mode::Eval, 0).to_vector();
  for (std::size_t i = 0; i < 8; ++i) CHECK(single[i] == doctest::Approx(a[8 + i]).epsilon(1e-14));
  CHECK_THROWS_AS(sigma_forward(random_map({4, 3, 6}, 7), params, cfg, Mode::Eval, 0), Error);
}

TEST_CASE("channel permutation equivariance") {
  const SigmaNetConfig cfg{.channels = 8};
  auto params = SigmaNetParams::initialise(cfg, 7);
  const auto f = random_map({3, 3, 8}, 8);
  const std::vector<std::size_t> perm{3, 0, 7, 1, 6, 2, 5, 4};
  auto permute_last = [&](const Tensor& t) {
    const auto c = t.shape().back();
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) out[i] = t.data()[(i / c) * c + perm[i % c]];
    return Tensor(t.shape(), out);
  };
  auto permute_rows = [&](const Tensor& t) {
    const auto cols = t.dim(1);
    std::vector<double> out(t.numel());
    for (std::size_t r = 0; r < t.dim(0); ++r)
      for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = t.data()[perm[r] * cols + j];
    return Tensor(t.shape(), out);
  };
  auto q = params;
  q.shortcut_w = permute_last(permute_rows(params.shortcut_w));
  q.shortcut_b = permute_last(params.shortcut_b);
  q.branch1_w = permute_rows(params.branch1_w);
  q.branch2_w = permute_rows(params.branch2_w);
  q.linear_w = permute_last(params.linear_w);
  q.linear_b = permute_last(params.linear_b);
  q.mlp_w1 = permute_rows(params.mlp_w1);
  q.mlp_w2 = permute_last(params.mlp_w2);
  q.mlp_b2 = permute_last(params.mlp_b2);
  for (auto kind : {VarianceHeadKind::Sigma, VarianceHeadKind::Bilinear, VarianceHeadKind::Mlp}) {
    const auto base = variance_head_forward(kind, f, params, cfg, Mode::Eval, 0);
    const auto moved = variance_head_forward(kind, permute_last(f), q, cfg, Mode::Eval, 0);
    const auto expected = permute_last(base);
    for (std::size_t i = 0; i < 8; ++i) CHECK(moved.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("variance head gradients") {
  const SigmaNetConfig cfg{.channels = 8};
  auto params = SigmaNetParams::initialise(cfg, 9);
  auto f = random_map({4, 4, 8}, 10, true);
  const auto weights = random_map({8}, 11);
  for (auto kind : {VarianceHeadKind::Sigma, VarianceHeadKind::Bilinear, VarianceHeadKind::Mlp}) {
    auto leaves = params.parameters(kind);
    leaves.emplace_back("features", f);
    // Train mode with a fixed seed keeps the dropout mask constant across evaluations.
    auto r = check_gradients(
        [&] { return sum(mul(variance_head_forward(kind, f, params, cfg, Mode::Train, 3), weights)); }, leaves);
    INFO(to_string(kind), " worst ", r.worst_tensor);
    CHECK(r.max_relative_error <= 1e-4);
  }
}

TEST_CASE("none head reports a constant variance") {
  const SigmaNetConfig cfg{.channels = 4};
  const auto s = variance_head_forward(VarianceHeadKind::None, random_map({2, 2, 2, 4}, 1), {}, cfg, Mode::Eval, 0);
  CHECK(s.shape() == Shape{2, 4});
  for (double v : s.data()) CHECK(v == cfg.fixed_variance);
  CHECK(parse_variance_head("bm") == VarianceHeadKind::Bilinear);
  CHECK_THROWS_AS(parse_variance_head("xx"), Error);
}
