#include "distembed/sigma_net.hpp"

#include <cmath>
#include <random>

#include "distembed/error.hpp"

namespace distembed {

VarianceHeadKind parse_variance_head(const std::string& name) {
  if (name == "sigma") return VarianceHeadKind::Sigma;
  if (name == "bm") return VarianceHeadKind::Bilinear;
  if (name == "mlp") return VarianceHeadKind::Mlp;
  if (name == "none") return VarianceHeadKind::None;
  throw Error(ErrorKind::InvalidConfig, "unknown variance head '" + name + "' (sigma, bm, mlp, none)");
}

const char* to_string(VarianceHeadKind kind) {
  switch (kind) {
    case VarianceHeadKind::Sigma: return "sigma";
    case VarianceHeadKind::Bilinear: return "bm";
    case VarianceHeadKind::Mlp: return "mlp";
    case VarianceHeadKind::None: return "none";
  }
  return "?";
}

void SigmaNetConfig::validate() const {
  if (channels == 0 || reduction == 0 || channels % reduction != 0) {
    throw Error(ErrorKind::InvalidConfig, "variance-head channels must be a positive multiple of " +
                                              std::to_string(reduction) + ", got " + std::to_string(channels));
  }
  const auto& p = fusion_pool;
  // Same-size output for every H, W: stride 1 and a centred window.
  if (p.sh != 1 || p.sw != 1 || p.kh != 2 * p.ph + 1 || p.kw != 2 * p.pw + 1) {
    throw Error(ErrorKind::InvalidConfig, "fusion pooling must preserve spatial extents");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(ErrorKind::InvalidConfig, "dropout must lie in [0, 1)");
  if (!(output_floor > 0.0)) throw Error(ErrorKind::InvalidConfig, "output floor must be positive");
}

namespace {

Tensor gaussian_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

void check_features(const Tensor& features, const SigmaNetConfig& config) {
  config.validate();
  if ((features.rank() != 3 && features.rank() != 4) || features.shape().back() != config.channels) {
    throw Error(ErrorKind::IncompatibleShape, "variance head expects [..,H,W," + std::to_string(config.channels) +
                                                  "] features, got " + shape_str(features.shape()));
  }
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  // x is [C] or [N,C].
  if (x.rank() == 1) return reshape(add(matmul(reshape(x, {1, x.dim(0)}), w), b), {w.dim(1)});
  return add(matmul(x, w), b);
}

Tensor positive(const Tensor& pre, const SigmaNetConfig& config) {
  return add_scalar(softplus(pre), config.output_floor);
}

}  // namespace

SigmaNetParams SigmaNetParams::initialise(const SigmaNetConfig& config, std::uint64_t seed) {
  config.validate();
  const auto c = config.channels;
  const auto r = config.reduced();
  std::mt19937_64 rng(seed);
  auto fan = [](std::size_t fan_in) { return std::sqrt(1.0 / static_cast<double>(fan_in)); };
  SigmaNetParams p;
  p.shortcut_w = gaussian_init({c, c}, fan(c), rng);
  p.shortcut_b = zeros_param({c});
  p.branch1_w = gaussian_init({c, r}, fan(c), rng);
  p.branch1_b = zeros_param({r});
  p.branch2_w = gaussian_init({c, r}, fan(c), rng);
  p.branch2_b = zeros_param({r});
  p.fusion_w = gaussian_init({4 * r, r}, fan(4 * r), rng);
  p.fusion_b = zeros_param({r});
  p.fusion_gamma = Tensor::full({r}, 1.0, true);
  p.fusion_beta = zeros_param({r});
  p.linear_w = gaussian_init({r, c}, fan(r), rng);
  p.linear_b = zeros_param({c});
  p.mlp_w1 = gaussian_init({c, r}, fan(c), rng);
  p.mlp_b1 = zeros_param({r});
  p.mlp_w2 = gaussian_init({r, c}, fan(r), rng);
  p.mlp_b2 = zeros_param({c});
  return p;
}

SigmaNetParams SigmaNetParams::zeros(const SigmaNetConfig& config) {
  auto p = initialise(config, 0);
  for (auto& [name, t] : p.parameters(VarianceHeadKind::Sigma)) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  for (auto& [name, t] : p.parameters(VarianceHeadKind::Mlp)) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  return p;
}

NamedTensors SigmaNetParams::parameters(VarianceHeadKind kind) const {
  switch (kind) {
    case VarianceHeadKind::Sigma:
      return {{"sigma.shortcut_w", shortcut_w}, {"sigma.shortcut_b", shortcut_b}, {"sigma.branch1_w", branch1_w},
              {"sigma.branch1_b", branch1_b},   {"sigma.branch2_w", branch2_w},   {"sigma.branch2_b", branch2_b},
              {"sigma.fusion_w", fusion_w},     {"sigma.fusion_b", fusion_b},     {"sigma.fusion_gamma", fusion_gamma},
              {"sigma.fusion_beta", fusion_beta}, {"sigma.linear_w", linear_w}, {"sigma.linear_b", linear_b}};
    case VarianceHeadKind::Bilinear:
      return {{"sigma.shortcut_w", shortcut_w}, {"sigma.shortcut_b", shortcut_b}, {"sigma.branch1_w", branch1_w},
              {"sigma.branch1_b", branch1_b},   {"sigma.branch2_w", branch2_w},   {"sigma.branch2_b", branch2_b},
              {"sigma.linear_w", linear_w},     {"sigma.linear_b", linear_b}};
    case VarianceHeadKind::Mlp:
      return {{"sigma.mlp_w1", mlp_w1}, {"sigma.mlp_b1", mlp_b1}, {"sigma.mlp_w2", mlp_w2}, {"sigma.mlp_b2", mlp_b2}};
    case VarianceHeadKind::None:
      return {};
  }
  return {};
}

Tensor fusion_products(const Tensor& f1, const Tensor& f2, const Window2D& pool_window) {
  if (f1.shape() != f2.shape()) {
    throw Error(ErrorKind::IncompatibleShape,
                "fusion inputs differ: " + shape_str(f1.shape()) + " vs " + shape_str(f2.shape()));
  }
  const Tensor min1 = pool(PoolKind::Min, f1, pool_window);
  const Tensor max1 = pool(PoolKind::Max, f1, pool_window);
  const Tensor min2 = pool(PoolKind::Min, f2, pool_window);
  const Tensor max2 = pool(PoolKind::Max, f2, pool_window);
  return concat({mul(min1, min2), mul(min1, max2), mul(max1, min2), mul(max1, max2)}, f1.rank() - 1);
}

Tensor uncertainty_fusion(const Tensor& f1, const Tensor& f2, const SigmaNetParams& params,
                          const SigmaNetConfig& config, Mode mode, std::uint64_t seed) {
  Tensor products = fusion_products(f1, f2, config.fusion_pool);
  Tensor dropped = dropout(products, config.dropout, mode, seed);
  Tensor reduced = conv1x1(dropped, params.fusion_w, params.fusion_b);
  return relu(affine_norm(reduced, params.fusion_gamma, params.fusion_beta));
}

Tensor sigma_forward(const Tensor& features, const SigmaNetParams& params, const SigmaNetConfig& config, Mode mode,
                     std::uint64_t seed) {
  check_features(features, config);
  Tensor first = global_avg_pool(conv1x1(features, params.shortcut_w, params.shortcut_b));
  Tensor b1 = conv1x1(features, params.branch1_w, params.branch1_b);
  Tensor b2 = conv1x1(features, params.branch2_w, params.branch2_b);
  Tensor fused = uncertainty_fusion(b1, b2, params, config, mode, seed);
  Tensor second = linear(global_avg_pool(fused), params.linear_w, params.linear_b);
  return positive(add(first, second), config);
}

Tensor bm_variance_head(const Tensor& features, const SigmaNetParams& params, const SigmaNetConfig& config) {
  check_features(features, config);
  Tensor first = global_avg_pool(conv1x1(features, params.shortcut_w, params.shortcut_b));
  Tensor b1 = conv1x1(features, params.branch1_w, params.branch1_b);
  Tensor b2 = conv1x1(features, params.branch2_w, params.branch2_b);
  Tensor second = linear(global_avg_pool(mul(b1, b2)), params.linear_w, params.linear_b);
  return positive(add(first, second), config);
}

Tensor mlp_variance_head(const Tensor& features, const SigmaNetParams& params, const SigmaNetConfig& config) {
  check_features(features, config);
  Tensor hidden = relu(linear(global_avg_pool(features), params.mlp_w1, params.mlp_b1));
  return positive(linear(hidden, params.mlp_w2, params.mlp_b2), config);
}

Tensor variance_head_forward(VarianceHeadKind kind, const Tensor& features, const SigmaNetParams& params,
                             const SigmaNetConfig& config, Mode mode, std::uint64_t seed) {
  switch (kind) {
    case VarianceHeadKind::Sigma: return sigma_forward(features, params, config, mode, seed);
    case VarianceHeadKind::Bilinear: return bm_variance_head(features, params, config);
    case VarianceHeadKind::Mlp: return mlp_variance_head(features, params, config);
    case VarianceHeadKind::None: {
      check_features(features, config);
      Shape s = features.rank() == 4 ? Shape{features.dim(0), config.channels} : Shape{config.channels};
      return Tensor::full(std::move(s), config.fixed_variance);
    }
  }
  throw Error(ErrorKind::InvalidConfig, "unknown variance head");
}

}  // namespace distembed
