#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "distembed/dist_loss.hpp"
#include "distembed/model.hpp"

namespace distembed {

struct TrainConfig {
  std::size_t stage1_epochs = 40;
  std::size_t stage2_epochs = 10;
  std::size_t warmup_epochs = 5;
  std::vector<std::size_t> decay_epochs{20, 30};
  double decay_factor = 3.0;
  double base_lr = 3.5e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  LossConfig loss;
  TargetKind stage1_targets = TargetKind::Smoothed;
  TargetKind stage2_targets = TargetKind::Soft;
  // Keeps the prior bank out of the optimizer.
  bool freeze_priors = false;

  void validate() const;
};

/// Linear warmup to base_lr (epoch e < warmup gives base_lr*(e+1)/warmup), then
/// one division by decay_factor per decay epoch reached. Epochs count across
/// both stages.
double lr_schedule(std::size_t epoch, const TrainConfig& config);

struct AdamHyper {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One bias-corrected Adam update of a raw buffer at step t (1-based).
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t t, double lr, const AdamHyper& hyper = {});

/// Adam with moments kept per parameter name.
class Adam {
 public:
  AdamHyper hyper;

  /// Uses each parameter's accumulated gradient; a parameter without one is
  /// treated as having a zero gradient.
  void step(const NamedTensors& params, double lr);

  std::uint64_t steps() const { return steps_; }
  const std::vector<double>* first_moment(const std::string& name) const;
  const std::vector<double>* second_moment(const std::string& name) const;

  /// "adam.step", "adam.m.<name>", "adam.v.<name>".
  NamedTensors state() const;
  void restore(const NamedTensors& tensors);

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  Moments& moments(const std::string& name, std::size_t size);

  std::vector<std::pair<std::string, Moments>> moments_;
  std::uint64_t steps_ = 0;
};

struct TrainSet {
  Tensor inputs;  // [N, ...] images or vectors
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  void validate(std::size_t num_classes) const;
};

struct EvalSnapshot {
  double rank1 = 0.0;
  double map = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // global, counting across stages
  int stage = 1;
  double lr = 0.0;
  double total = 0.0, cls = 0.0, kl = 0.0;  // sample-weighted epoch means
  double wall_ms = 0.0;
  std::optional<EvalSnapshot> eval;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  void append(const TrainLog& other);
  /// epoch,stage,lr,total,cls,kl,wall_ms[,rank1,map]
  std::string to_csv(bool include_wall_time = true) const;
  std::string to_json(bool include_wall_time = true) const;
};

struct TrainHooks {
  // Called before targets are built; may modify the model (used by probes).
  std::function<void(EmbedModel&, std::size_t epoch)> epoch_start;
  // Receives the soft-label matrix used for the coming stage-2 epoch.
  std::function<void(std::size_t epoch, const Tensor& soft)> soft_labels;
  std::function<std::optional<EvalSnapshot>(const EmbedModel&, std::size_t epoch)> evaluate;
};

/// Optimizer state plus the global epoch counter shared by both stages.
struct TrainState {
  Adam adam;
  std::size_t epoch = 0;
};

/// One optimizer step on a batch. Throws NumericFailure naming the first
/// non-finite loss part, gradient or updated parameter.
LossParts train_step(EmbedModel& model, TrainState& state, const TrainConfig& config, const Tensor& inputs,
                     const Tensor& targets, std::span<const std::size_t> labels, double lr, std::uint64_t seed);

TrainLog train_stage1(EmbedModel& model, const TrainSet& data, const TrainConfig& config, TrainState& state,
                      const TrainHooks& hooks = {});

/// Soft labels are recomputed from the current priors at every epoch start.
TrainLog train_stage2(EmbedModel& model, const TrainSet& data, const TrainConfig& config, TrainState& state,
                      const TrainHooks& hooks = {});

/// Model parameters, optimizer state, epoch and config text in one container.
Checkpoint training_checkpoint(const EmbedModel& model, const TrainState& state, const std::string& config_text);
void restore_training(EmbedModel& model, TrainState& state, const Checkpoint& checkpoint);

/// Mean pairwise 2-Wasserstein distance among the priors of a bank.
double mean_prior_separation(const PriorBank& bank);

}  // namespace distembed
