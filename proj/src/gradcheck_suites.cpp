#include "distembed/gradcheck_suites.hpp"

#include <algorithm>
#include <functional>
#include <random>

#include "distembed/dist_loss.hpp"
#include "distembed/model.hpp"
#include "distembed/seed.hpp"
#include "distembed/sigma_net.hpp"

namespace distembed {

namespace {

Tensor random_leaf(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

struct Suite {
  std::string component;
  std::function<GradCheckResult(const GradCheckOptions&, std::uint64_t)> run;
};

GradCheckResult elementwise_suite(const GradCheckOptions& o, std::uint64_t s) {
  auto a = random_leaf({3, 4}, s + 1);
  auto b = random_leaf({4}, s + 2);
  auto p = random_leaf({3, 4}, s + 3, 0.5, 2.0);
  auto loss = [&] {
    Tensor t = (a + b) * p - a / p;
    t = t + exp(scale(a, 0.5)) + log(p) + sqrt(p) + softplus(a - b) + square(b);
    return sum(mul(t, add_scalar(p, 0.3)));
  };
  return check_gradients(loss, {{"a", a}, {"b", b}, {"p", p}}, o);
}

GradCheckResult reductions_suite(const GradCheckOptions& o, std::uint64_t s) {
  auto x = random_leaf({2, 3, 4}, s + 1);
  auto y = random_leaf({2, 2, 4}, s + 2);
  auto w = random_leaf({4, 5}, s + 3);
  auto loss = [&] {
    Tensor c = concat({x, y}, 1);                         // [2,5,4]
    Tensor m = mean_axes(c, {1});                         // [2,4]
    Tensor r = sum_axes(slice(c, 1, 1, 3), {0}, true);    // [1,3,4]
    Tensor z = log_softmax(matmul(m, w));                 // [2,5]
    return sum(mul(z, z)) + mean(square(reshape(r, {12})));
  };
  return check_gradients(loss, {{"x", x}, {"y", y}, {"w", w}}, o);
}

GradCheckResult feature_map_suite(const GradCheckOptions& o, std::uint64_t s) {
  auto x = random_leaf({2, 6, 5, 3}, s + 1);
  auto w = random_leaf({3, 3, 3, 4}, s + 2);
  auto b = random_leaf({4}, s + 3);
  auto g = random_leaf({4}, s + 4, 0.5, 1.5);
  auto be = random_leaf({4}, s + 5);
  auto w1 = random_leaf({4, 2}, s + 6);
  auto b1 = random_leaf({2}, s + 7);
  const Tensor weights = random_leaf({2, 3, 2, 2}, s + 8).detach();
  auto loss = [&] {
    Tensor f = conv2d(x, w, b, {3, 3, 1, 1, 1, 1});
    f = affine_norm(f, g, be);
    f = conv1x1(f, w1, b1);  // [2,6,5,2]
    Tensor pa = pool(PoolKind::Avg, f, {2, 2, 2, 2, 0, 0});     // [2,3,2,2]
    Tensor pm = pool(PoolKind::Max, f, {3, 3, 2, 2, 1, 1});     // [2,3,3,2]
    Tensor pn = pool(PoolKind::Min, f, {3, 3, 2, 2, 1, 1});
    return sum(mul(pa, weights)) + sum(global_avg_pool(mul(pm, pn)));
  };
  return check_gradients(loss, {{"x", x}, {"w", w}, {"b", b}, {"gamma", g}, {"beta", be}, {"w1", w1}, {"b1", b1}},
                         o);
}

SigmaNetConfig head_config() {
  SigmaNetConfig c;
  c.channels = 8;
  return c;
}

GradCheckResult head_suite(VarianceHeadKind kind, const GradCheckOptions& o, std::uint64_t s) {
  const auto config = head_config();
  auto params = SigmaNetParams::initialise(config, s + 1);
  auto features = random_leaf({2, 4, 3, config.channels}, s + 2);
  const Tensor weights = random_leaf({2, config.channels}, s + 3).detach();
  auto loss = [&] {
    return sum(mul(variance_head_forward(kind, features, params, config, Mode::Train, s + 4), weights));
  };
  NamedTensors leaves = params.parameters(kind);
  leaves.emplace_back("features", features);
  return check_gradients(loss, leaves, o);
}

PriorBank random_bank(std::size_t k, std::size_t d, std::uint64_t s) {
  auto means = random_leaf({k, d}, s, -1.5, 1.5);
  auto rho = random_leaf({k, d}, s + 1, -0.5, 1.0);
  return PriorBank(means, rho);
}

GradCheckResult dist_loss_suite(const GradCheckOptions& o, std::uint64_t s) {
  auto bank = random_bank(4, 3, s + 1);
  PosteriorBatch post{random_leaf({3, 3}, s + 3), random_leaf({3, 3}, s + 4, 0.3, 2.0)};
  const std::vector<std::size_t> labels{0, 2, 3};
  const auto targets = make_targets(labels, TargetMode::smoothed(0.1), 4);
  LossConfig config;
  config.lambda = 0.7;
  auto loss = [&] { return distribution_loss(post, targets, labels, bank, config).total; };
  return check_gradients(loss,
                         {{"posterior.mean", post.mean},
                          {"posterior.variance", post.variance},
                          {"prior.means", bank.means()},
                          {"prior.rho", bank.variance_params()}},
                         o);
}

GradCheckResult gm_loss_suite(const GradCheckOptions& o, std::uint64_t s) {
  auto bank = random_bank(4, 3, s + 1);
  auto features = random_leaf({3, 3}, s + 3);
  const std::vector<std::size_t> labels{1, 1, 3};
  auto loss = [&] { return gm_loss(features, labels, bank, 0.5).total; };
  return check_gradients(loss,
                         {{"features", features}, {"prior.means", bank.means()}, {"prior.rho", bank.variance_params()}},
                         o);
}

GradCheckResult model_suite(VarianceHeadKind head, LossKind loss_kind, const GradCheckOptions& o, std::uint64_t s) {
  ModelConfig config;
  config.backbone.image_height = 16;
  config.backbone.image_width = 8;
  config.backbone.block1 = 4;
  config.backbone.block2 = 4;
  config.channels = 8;
  config.num_classes = 3;
  config.head = head;
  config.loss = loss_kind;
  EmbedModel model(config, s + 1);
  std::mt19937_64 rng(s + 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> pixels(2 * 16 * 8 * 3);
  for (auto& p : pixels) p = u(rng);
  const Tensor images({2, 16, 8, 3}, std::move(pixels));
  const std::vector<std::size_t> labels{0, 2};
  const auto targets = make_targets(labels, TargetMode::smoothed(0.1), 3);
  auto loss = [&] { return model_loss(model, model.forward(images, Mode::Train, s + 3), targets, labels, {}).total; };
  GradCheckOptions opts = o;
  opts.max_entries_per_tensor = 12;
  return check_gradients(loss, model.parameters(), opts);
}

std::vector<Suite> suites() {
  return {
      {"tensor.elementwise", elementwise_suite},
      {"tensor.reductions", reductions_suite},
      {"tensor.feature_maps", feature_map_suite},
      {"sigma_net", [](auto& o, auto s) { return head_suite(VarianceHeadKind::Sigma, o, s); }},
      {"head.bm", [](auto& o, auto s) { return head_suite(VarianceHeadKind::Bilinear, o, s); }},
      {"head.mlp", [](auto& o, auto s) { return head_suite(VarianceHeadKind::Mlp, o, s); }},
      {"loss.distribution", dist_loss_suite},
      {"loss.gm", gm_loss_suite},
      {"model.sigma", [](auto& o, auto s) { return model_suite(VarianceHeadKind::Sigma, LossKind::Distribution, o, s); }},
      {"model.bm", [](auto& o, auto s) { return model_suite(VarianceHeadKind::Bilinear, LossKind::Distribution, o, s); }},
      {"model.mlp", [](auto& o, auto s) { return model_suite(VarianceHeadKind::Mlp, LossKind::Distribution, o, s); }},
      {"model.gm", [](auto& o, auto s) { return model_suite(VarianceHeadKind::None, LossKind::GaussianMixture, o, s); }},
      {"model.ce", [](auto& o, auto s) { return model_suite(VarianceHeadKind::None, LossKind::CrossEntropy, o, s); }},
  };
}

}  // namespace

std::vector<std::string> gradcheck_components() {
  std::vector<std::string> out;
  for (const auto& s : suites()) out.push_back(s.component);
  return out;
}

std::vector<SuiteReport> run_gradcheck_suites(const SuiteOptions& options) {
  std::vector<SuiteReport> out;
  for (const auto& suite : suites()) {
    GradCheckOptions o;
    o.seed = options.seed;
    const bool faulty = std::find(options.inject_sign_error.begin(), options.inject_sign_error.end(),
                                  suite.component) != options.inject_sign_error.end();
    if (faulty) {
      o.mutate_analytic = [](const std::string&, std::vector<double>& g) {
        for (auto& v : g) v = -v;
      };
    }
    SuiteReport r;
    r.component = suite.component;
    r.result = suite.run(o, derive_seed(options.seed, out.size()));
    r.passed = r.result.passed(options.tolerance);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace distembed
