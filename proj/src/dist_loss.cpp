#include "distembed/dist_loss.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "distembed/error.hpp"

namespace distembed {

namespace {

void check_labels(std::span<const std::size_t> labels, std::size_t num_classes, std::size_t batch) {
  if (labels.size() != batch) {
    throw Error(ErrorKind::IncompatibleShape,
                "got " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(batch));
  }
  for (auto y : labels) {
    if (y >= num_classes) {
      throw Error(ErrorKind::InvalidInput,
                  "label " + std::to_string(y) + " out of range for " + std::to_string(num_classes) + " classes");
    }
  }
}

// Constant [1, K] row of ln(K p(k)).
Tensor log_weight_row(const PriorBank& bank) {
  const auto k = bank.num_classes();
  std::vector<double> w(k);
  for (std::size_t i = 0; i < k; ++i) {
    w[i] = std::log(std::max(static_cast<double>(k) * bank.class_weights()[i], 1e-300));
  }
  return Tensor({1, k}, std::move(w));
}

bool uniform_weights(const PriorBank& bank) {
  const double u = 1.0 / static_cast<double>(bank.num_classes());
  return std::all_of(bank.class_weights().begin(), bank.class_weights().end(),
                     [u](double w) { return w == u; });
}

Tensor one_hot_mask(std::span<const std::size_t> labels, std::size_t num_classes) {
  std::vector<double> m(labels.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) m[i * num_classes + labels[i]] = 1.0;
  return Tensor({labels.size(), num_classes}, std::move(m));
}

double softplus_scalar(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

}  // namespace

// ---------------------------------------------------------------------------
// PosteriorBatch

DiagGaussian PosteriorBatch::at(std::size_t i) const {
  const auto d = dim();
  const auto m = mean.data().subspan(i * d, d);
  const auto v = variance.data().subspan(i * d, d);
  return {{m.begin(), m.end()}, {v.begin(), v.end()}};
}

PosteriorBatch PosteriorBatch::from(const std::vector<DiagGaussian>& posteriors, bool requires_grad) {
  if (posteriors.empty()) throw Error(ErrorKind::InvalidInput, "empty posterior batch");
  const auto d = posteriors.front().dim();
  std::vector<double> m, v;
  for (const auto& g : posteriors) {
    if (g.dim() != d) throw Error(ErrorKind::IncompatibleShape, "posterior dimensions differ within batch");
    m.insert(m.end(), g.mean().begin(), g.mean().end());
    v.insert(v.end(), g.variance().begin(), g.variance().end());
  }
  const auto n = posteriors.size();
  return {Tensor({n, d}, std::move(m), requires_grad), Tensor({n, d}, std::move(v), requires_grad)};
}

// ---------------------------------------------------------------------------
// PriorBank

double variance_param_for(double variance) {
  const double target = variance - kVarianceFloor;
  if (!(target > 0.0)) throw Error(ErrorKind::Domain, "prior variance must exceed the floor");
  // softplus^{-1}(t) = t + log(1 - exp(-t))
  return target + std::log(-std::expm1(-target));
}

PriorBank::PriorBank(Tensor means, Tensor variance_params, std::vector<double> class_weights)
    : means_(std::move(means)), variance_params_(std::move(variance_params)), class_weights_(std::move(class_weights)) {
  if (means_.rank() != 2 || means_.shape() != variance_params_.shape() || means_.dim(0) == 0) {
    throw Error(ErrorKind::IncompatibleShape, "prior means " + shape_str(means_.shape()) + " and variance params " +
                                                  shape_str(variance_params_.shape()) + " must both be [K, d]");
  }
  const auto k = means_.dim(0);
  if (class_weights_.empty()) class_weights_.assign(k, 1.0 / static_cast<double>(k));
  if (class_weights_.size() != k) throw Error(ErrorKind::IncompatibleShape, "class weight count differs from K");
  double total = 0.0;
  for (double w : class_weights_) {
    if (!(w >= 0.0)) throw Error(ErrorKind::InvalidConfig, "class weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorKind::InvalidConfig, "class weights must sum to 1");
}

PriorBank PriorBank::initialise(std::size_t num_classes, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.1);
  std::vector<double> m(num_classes * dim);
  for (auto& x : m) x = normal(rng);
  return PriorBank(Tensor({num_classes, dim}, std::move(m), true),
                   Tensor::full({num_classes, dim}, variance_param_for(1.0), true));
}

PriorBank PriorBank::from_priors(const std::vector<DiagGaussian>& priors) {
  if (priors.empty()) throw Error(ErrorKind::InvalidInput, "empty prior list");
  const auto d = priors.front().dim();
  std::vector<double> m, rho;
  for (const auto& p : priors) {
    if (p.dim() != d) throw Error(ErrorKind::IncompatibleShape, "prior dimensions differ");
    m.insert(m.end(), p.mean().begin(), p.mean().end());
    for (double v : p.variance()) rho.push_back(variance_param_for(std::max(v, 2 * kVarianceFloor)));
  }
  const auto k = priors.size();
  return PriorBank(Tensor({k, d}, std::move(m), true), Tensor({k, d}, std::move(rho), true));
}

Tensor PriorBank::variances() const { return add_scalar(softplus(variance_params_), kVarianceFloor); }

DiagGaussian PriorBank::prior(std::size_t k) const {
  const auto d = dim();
  const auto m = means_.data().subspan(k * d, d);
  const auto rho = variance_params_.data().subspan(k * d, d);
  std::vector<double> v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = softplus_scalar(rho[i]) + kVarianceFloor;
  return {{m.begin(), m.end()}, std::move(v)};
}

std::vector<DiagGaussian> PriorBank::priors() const {
  std::vector<DiagGaussian> out;
  out.reserve(num_classes());
  for (std::size_t k = 0; k < num_classes(); ++k) out.push_back(prior(k));
  return out;
}

void LossConfig::validate() const {
  if (!(lambda >= 0.0)) throw Error(ErrorKind::InvalidConfig, "lambda must be non-negative");
  if (!(tau > 0.0 && tau <= 1.0)) throw Error(ErrorKind::InvalidConfig, "tau must lie in (0, 1]");
  if (!(smoothing_epsilon >= 0.0 && smoothing_epsilon < 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "smoothing epsilon must lie in [0, 1)");
  }
}

// ---------------------------------------------------------------------------
// Distribution loss

Tensor kl_matrix(const PosteriorBatch& posteriors, const PriorBank& bank) {
  if (posteriors.dim() != bank.dim()) {
    throw Error(ErrorKind::IncompatibleShape, "posterior dimension " + std::to_string(posteriors.dim()) +
                                                  " differs from prior dimension " + std::to_string(bank.dim()));
  }
  const auto n = posteriors.size();
  const auto d = bank.dim();
  // [N,1,d] against [K,d] broadcasts to [N,K,d].
  Tensor mq = reshape(posteriors.mean, {n, 1, d});
  Tensor vq = reshape(posteriors.variance, {n, 1, d});
  Tensor vp = bank.variances();
  Tensor diff = sub(mq, bank.means());
  Tensor terms = sub(log(vp), log(vq)) + div(vq, vp) + div(square(diff), vp);
  return scale(add_scalar(sum_axes(terms, {2}), -static_cast<double>(d)), 0.5);
}

Tensor class_logits(const PosteriorBatch& posteriors, const PriorBank& bank) {
  Tensor logits = neg(kl_matrix(posteriors, bank));
  if (uniform_weights(bank)) return logits;
  return add(logits, log_weight_row(bank));
}

std::vector<double> class_logits(const DiagGaussian& posterior, const PriorBank& bank) {
  NoGradGuard no_grad;
  return class_logits(PosteriorBatch::from({posterior}), bank).to_vector();
}

Tensor cls_loss(const Tensor& logits, const Tensor& targets) {
  if (logits.rank() != 2 || logits.shape() != targets.shape()) {
    throw Error(ErrorKind::IncompatibleShape,
                "logits " + shape_str(logits.shape()) + " and targets " + shape_str(targets.shape()) + " differ");
  }
  return scale(sum(mul(log_softmax(logits), targets)), -1.0 / static_cast<double>(logits.dim(0)));
}

Tensor kl_regularizer(const PosteriorBatch& posteriors, std::span<const std::size_t> labels, const PriorBank& bank) {
  check_labels(labels, bank.num_classes(), posteriors.size());
  Tensor kl = kl_matrix(posteriors, bank);
  return scale(sum(mul(kl, one_hot_mask(labels, bank.num_classes()))), 1.0 / static_cast<double>(labels.size()));
}

LossParts distribution_loss(const PosteriorBatch& posteriors, const Tensor& targets,
                            std::span<const std::size_t> labels, const PriorBank& bank, const LossConfig& config) {
  config.validate();
  check_labels(labels, bank.num_classes(), posteriors.size());
  Tensor kl = kl_matrix(posteriors, bank);
  Tensor logits = neg(kl);
  if (!uniform_weights(bank)) logits = add(logits, log_weight_row(bank));
  Tensor cls = cls_loss(logits, targets);
  Tensor reg = scale(sum(mul(kl, one_hot_mask(labels, bank.num_classes()))), 1.0 / static_cast<double>(labels.size()));
  Tensor total = config.lambda == 0.0 ? cls : add(cls, scale(reg, config.lambda));
  return {total, cls, reg};
}

// ---------------------------------------------------------------------------
// Gaussian-mixture baseline

namespace {

// [N, K] of log N(z_i; mu_k, var_k).
Tensor gm_log_likelihood(const Tensor& features, const PriorBank& bank) {
  if (features.rank() != 2 || features.dim(1) != bank.dim()) {
    throw Error(ErrorKind::IncompatibleShape,
                "features " + shape_str(features.shape()) + " do not match prior dimension " + std::to_string(bank.dim()));
  }
  const auto n = features.dim(0);
  const auto d = bank.dim();
  Tensor vp = bank.variances();
  Tensor diff = sub(reshape(features, {n, 1, d}), bank.means());
  Tensor terms = add(add_scalar(log(vp), std::log(2.0 * std::numbers::pi)), div(square(diff), vp));
  return scale(sum_axes(terms, {2}), -0.5);
}

}  // namespace

Tensor gm_class_logits(const Tensor& features, const PriorBank& bank) {
  Tensor ll = gm_log_likelihood(features, bank);
  if (uniform_weights(bank)) return ll;
  return add(ll, log_weight_row(bank));
}

std::vector<double> gm_class_logits(std::span<const double> feature, const PriorBank& bank) {
  NoGradGuard no_grad;
  return gm_class_logits(Tensor({1, feature.size()}, {feature.begin(), feature.end()}), bank).to_vector();
}

LossParts gm_loss(const Tensor& features, const Tensor& targets, std::span<const std::size_t> labels,
                  const PriorBank& bank, double lambda) {
  if (!(lambda >= 0.0)) throw Error(ErrorKind::InvalidConfig, "lambda must be non-negative");
  const auto n = features.rank() == 2 ? features.dim(0) : 0;
  check_labels(labels, bank.num_classes(), n);
  Tensor ll = gm_log_likelihood(features, bank);
  Tensor logits = uniform_weights(bank) ? ll : add(ll, log_weight_row(bank));
  Tensor cls = cls_loss(logits, targets);
  Tensor nll = scale(sum(mul(ll, one_hot_mask(labels, bank.num_classes()))), -1.0 / static_cast<double>(n));
  Tensor total = lambda == 0.0 ? cls : add(cls, scale(nll, lambda));
  return {total, cls, nll};
}

LossParts gm_loss(const Tensor& features, std::span<const std::size_t> labels, const PriorBank& bank,
                  double lambda) {
  return gm_loss(features, make_targets(labels, TargetMode::one_hot(), bank.num_classes()), labels, bank, lambda);
}

// ---------------------------------------------------------------------------
// Targets

Tensor soft_labels(const PriorBank& bank, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorKind::InvalidConfig, "soft-label temperature must be positive");
  const auto priors = bank.priors();
  const auto k = priors.size();
  std::vector<double> rows(k * k);
  for (std::size_t r = 0; r < k; ++r) {
    double* row = rows.data() + r * k;
    for (std::size_t j = 0; j < k; ++j) row[j] = -wasserstein_sq(priors[r], priors[j]) / tau;
    const double m = *std::max_element(row, row + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += (row[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < k; ++j) row[j] /= total;
  }
  return Tensor({k, k}, std::move(rows));
}

Tensor make_targets(std::span<const std::size_t> labels, const TargetMode& mode, std::size_t num_classes) {
  if (num_classes == 0) throw Error(ErrorKind::InvalidConfig, "need at least one class");
  check_labels(labels, num_classes, labels.size());
  const auto n = labels.size();
  std::vector<double> t(n * num_classes, 0.0);
  switch (mode.kind) {
    case TargetKind::OneHot:
      for (std::size_t i = 0; i < n; ++i) t[i * num_classes + labels[i]] = 1.0;
      break;
    case TargetKind::Smoothed: {
      if (!(mode.epsilon >= 0.0 && mode.epsilon < 1.0)) {
        throw Error(ErrorKind::InvalidConfig, "smoothing epsilon must lie in [0, 1)");
      }
      const double spread = mode.epsilon / static_cast<double>(num_classes);
      std::fill(t.begin(), t.end(), spread);
      for (std::size_t i = 0; i < n; ++i) t[i * num_classes + labels[i]] += 1.0 - mode.epsilon;
      break;
    }
    case TargetKind::Soft: {
      if (mode.soft_matrix.shape() != Shape{num_classes, num_classes}) {
        throw Error(ErrorKind::IncompatibleShape, "soft-label matrix must be [K, K]");
      }
      const auto m = mode.soft_matrix.data();
      for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(m.begin() + labels[i] * num_classes, num_classes, t.begin() + i * num_classes);
      }
      break;
    }
  }
  return Tensor({n, num_classes}, std::move(t));
}

std::vector<double> row_entropy(const Tensor& rows) {
  const auto k = rows.dim(1);
  std::vector<double> out(rows.dim(0), 0.0);
  for (std::size_t r = 0; r < out.size(); ++r) {
    for (std::size_t j = 0; j < k; ++j) {
      const double p = rows.data()[r * k + j];
      if (p > 0.0) out[r] -= p * std::log(p);
    }
  }
  return out;
}

}  // namespace distembed
