#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "distembed/gaussian.hpp"
#include "distembed/tensor.hpp"

namespace distembed {

/// Batch of diagonal-Gaussian posteriors, one row per sample: mean and
/// variance are both [N, d].
struct PosteriorBatch {
  Tensor mean;
  Tensor variance;

  std::size_t size() const { return mean.dim(0); }
  std::size_t dim() const { return mean.dim(1); }
  DiagGaussian at(std::size_t i) const;

  static PosteriorBatch from(const std::vector<DiagGaussian>& posteriors, bool requires_grad = false);
};

/// K trainable class priors. Realised variances are softplus(rho) + floor so
/// the optimiser works on unconstrained parameters.
class PriorBank {
 public:
  PriorBank(Tensor means, Tensor variance_params, std::vector<double> class_weights = {});

  /// Means ~ N(0, 0.1^2) per entry, rho chosen so every variance is 1.
  static PriorBank initialise(std::size_t num_classes, std::size_t dim, std::uint64_t seed);
  static PriorBank from_priors(const std::vector<DiagGaussian>& priors);

  std::size_t num_classes() const { return means_.dim(0); }
  std::size_t dim() const { return means_.dim(1); }

  Tensor& means() { return means_; }
  const Tensor& means() const { return means_; }
  Tensor& variance_params() { return variance_params_; }
  const Tensor& variance_params() const { return variance_params_; }
  const std::vector<double>& class_weights() const { return class_weights_; }

  /// Differentiable [K, d] realised variances.
  Tensor variances() const;
  DiagGaussian prior(std::size_t k) const;
  std::vector<DiagGaussian> priors() const;

 private:
  Tensor means_;
  Tensor variance_params_;
  std::vector<double> class_weights_;
};

/// Inverse of the prior variance map: rho with softplus(rho) + floor == variance.
double variance_param_for(double variance);

struct LossConfig {
  double lambda = 0.1;
  double tau = 0.17;
  double smoothing_epsilon = 0.1;

  void validate() const;
};

struct LossParts {
  Tensor total;
  Tensor cls;
  Tensor kl;
};

/// [N, K] matrix of KL(q_i || p_k).
Tensor kl_matrix(const PosteriorBatch& posteriors, const PriorBank& bank);

/// logit_k = -KL(q || p_k) + ln(K p(k)). The ln K offset is shared by every
/// class, so uniform weights contribute exactly zero.
Tensor class_logits(const PosteriorBatch& posteriors, const PriorBank& bank);
std::vector<double> class_logits(const DiagGaussian& posterior, const PriorBank& bank);

/// Soft-target cross-entropy, averaged over the batch. targets is [N, K].
Tensor cls_loss(const Tensor& logits, const Tensor& targets);

/// Batch mean of KL(q_i || p_{y_i}).
Tensor kl_regularizer(const PosteriorBatch& posteriors, std::span<const std::size_t> labels, const PriorBank& bank);

/// cls + lambda * kl with the classification term over `targets`.
LossParts distribution_loss(const PosteriorBatch& posteriors, const Tensor& targets,
                            std::span<const std::size_t> labels, const PriorBank& bank, const LossConfig& config);

/// Gaussian-mixture baseline: logit_k = log N(z; mu_k, var_k) + ln(K p(k)).
Tensor gm_class_logits(const Tensor& features, const PriorBank& bank);
std::vector<double> gm_class_logits(std::span<const double> feature, const PriorBank& bank);

/// Cross-entropy over the mixture posterior plus lambda times the mean
/// negative log-likelihood of each feature under its labelled prior.
LossParts gm_loss(const Tensor& features, const Tensor& targets, std::span<const std::size_t> labels,
                  const PriorBank& bank, double lambda);
LossParts gm_loss(const Tensor& features, std::span<const std::size_t> labels, const PriorBank& bank,
                  double lambda);

/// Row r: softmax_k(-W2(p_r, p_k) / tau). Returned as a [K, K] constant.
Tensor soft_labels(const PriorBank& bank, double tau);

enum class TargetKind { OneHot, Smoothed, Soft };

struct TargetMode {
  TargetKind kind = TargetKind::OneHot;
  double epsilon = 0.0;    // Smoothed
  Tensor soft_matrix;      // Soft, [K, K]

  static TargetMode one_hot() { return {}; }
  static TargetMode smoothed(double eps) { return {TargetKind::Smoothed, eps, {}}; }
  static TargetMode soft(Tensor matrix) { return {TargetKind::Soft, 0.0, std::move(matrix)}; }
};

/// [N, K] targets. Smoothed rows are (1 - eps) onehot + eps / K.
Tensor make_targets(std::span<const std::size_t> labels, const TargetMode& mode, std::size_t num_classes);

/// Natural-log entropy of each row of a [R, K] distribution matrix.
std::vector<double> row_entropy(const Tensor& rows);

}  // namespace distembed
