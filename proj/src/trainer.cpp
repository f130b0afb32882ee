#include "distembed/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "distembed/error.hpp"
#include "distembed/seed.hpp"

namespace distembed {

void TrainConfig::validate() const {
  loss.validate();
  if (batch_size == 0) throw Error(ErrorKind::InvalidConfig, "batch_size must be positive");
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw Error(ErrorKind::InvalidConfig, "base_lr must be >= 0");
  if (!(decay_factor > 0.0)) throw Error(ErrorKind::InvalidConfig, "decay_factor must be positive");
  if (warmup_epochs > 0 && warmup_epochs >= stage1_epochs) {
    throw Error(ErrorKind::InvalidConfig, "warmup_epochs (" + std::to_string(warmup_epochs) +
                                              ") must be below stage1_epochs (" + std::to_string(stage1_epochs) + ")");
  }
  for (std::size_t i = 1; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] <= decay_epochs[i - 1]) {
      throw Error(ErrorKind::InvalidConfig, "decay_epochs must be strictly increasing");
    }
  }
}

double lr_schedule(std::size_t epoch, const TrainConfig& config) {
  if (epoch < config.warmup_epochs) {
    return config.base_lr * static_cast<double>(epoch + 1) / static_cast<double>(config.warmup_epochs);
  }
  double lr = config.base_lr;
  for (auto d : config.decay_epochs)
    if (epoch >= d) lr /= config.decay_factor;
  return lr;
}

// ---------------------------------------------------------------------------
// Adam

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t t, double lr, const AdamHyper& h) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw Error(ErrorKind::IncompatibleShape, "adam buffers differ in size");
  }
  if (t == 0) throw Error(ErrorKind::ContractViolation, "adam step counter starts at 1");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    if (lr != 0.0) param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
  }
}

Adam::Moments& Adam::moments(const std::string& name, std::size_t size) {
  for (auto& [n, mom] : moments_) {
    if (n != name) continue;
    if (mom.m.size() != size) {
      throw Error(ErrorKind::IncompatibleShape, "optimizer state for '" + name + "' has " +
                                                    std::to_string(mom.m.size()) + " entries, parameter has " +
                                                    std::to_string(size));
    }
    return mom;
  }
  moments_.emplace_back(name, Moments{std::vector<double>(size, 0.0), std::vector<double>(size, 0.0)});
  return moments_.back().second;
}

void Adam::step(const NamedTensors& params, double lr) {
  ++steps_;
  std::vector<double> zeros;
  for (const auto& [name, p] : params) {
    Tensor param = p;
    auto& mom = moments(name, param.numel());
    std::span<const double> g;
    if (param.has_grad()) {
      g = param.grad();
    } else {
      zeros.assign(param.numel(), 0.0);
      g = zeros;
    }
    adam_update(param.mutable_data(), g, mom.m, mom.v, steps_, lr, hyper);
  }
}

const std::vector<double>* Adam::first_moment(const std::string& name) const {
  for (const auto& [n, mom] : moments_)
    if (n == name) return &mom.m;
  return nullptr;
}

const std::vector<double>* Adam::second_moment(const std::string& name) const {
  for (const auto& [n, mom] : moments_)
    if (n == name) return &mom.v;
  return nullptr;
}

NamedTensors Adam::state() const {
  NamedTensors out;
  out.emplace_back("adam.step", Tensor::scalar(static_cast<double>(steps_)));
  for (const auto& [n, mom] : moments_) {
    out.emplace_back("adam.m." + n, Tensor::vector(mom.m));
    out.emplace_back("adam.v." + n, Tensor::vector(mom.v));
  }
  return out;
}

void Adam::restore(const NamedTensors& tensors) {
  std::vector<std::pair<std::string, Moments>> restored;
  std::uint64_t steps = 0;
  auto slot = [&](const std::string& name) -> Moments& {
    for (auto& [n, mom] : restored)
      if (n == name) return mom;
    restored.emplace_back(name, Moments{});
    return restored.back().second;
  };
  for (const auto& [name, t] : tensors) {
    if (name == "adam.step") {
      steps = static_cast<std::uint64_t>(t.item());
    } else if (name.starts_with("adam.m.")) {
      slot(name.substr(7)).m = t.to_vector();
    } else if (name.starts_with("adam.v.")) {
      slot(name.substr(7)).v = t.to_vector();
    }
  }
  for (const auto& [n, mom] : restored) {
    if (mom.m.size() != mom.v.size()) {
      throw Error(ErrorKind::IncompatibleShape, "optimizer moments for '" + n + "' differ in size");
    }
  }
  moments_ = std::move(restored);
  steps_ = steps;
}

// ---------------------------------------------------------------------------
// Data

void TrainSet::validate(std::size_t num_classes) const {
  if (labels.empty()) throw Error(ErrorKind::InvalidDataset, "training set is empty");
  if (inputs.rank() < 1 || inputs.dim(0) != labels.size()) {
    throw Error(ErrorKind::InvalidDataset, "training inputs " + shape_str(inputs.shape()) + " do not match " +
                                               std::to_string(labels.size()) + " labels");
  }
  for (auto y : labels) {
    if (y >= num_classes) {
      throw Error(ErrorKind::InvalidDataset,
                  "label " + std::to_string(y) + " outside the " + std::to_string(num_classes) + " priors");
    }
  }
}

// ---------------------------------------------------------------------------
// Logs

void TrainLog::append(const TrainLog& other) {
  epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end());
}

std::string TrainLog::to_csv(bool include_wall_time) const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "epoch,stage,lr,total,cls,kl,wall_ms,rank1,map\n";
  for (const auto& r : epochs) {
    os << r.epoch << ',' << r.stage << ',' << r.lr << ',' << r.total << ',' << r.cls << ',' << r.kl << ','
       << (include_wall_time ? r.wall_ms : 0.0) << ',';
    if (r.eval) os << r.eval->rank1 << ',' << r.eval->map;
    else os << ',';
    os << '\n';
  }
  return os.str();
}

std::string TrainLog::to_json(bool include_wall_time) const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : epochs) {
    nlohmann::json e{{"epoch", r.epoch}, {"stage", r.stage}, {"lr", r.lr},   {"total", r.total},
                     {"cls", r.cls},     {"kl", r.kl},       {"wall_ms", include_wall_time ? r.wall_ms : 0.0}};
    if (r.eval) e["eval"] = {{"rank1", r.eval->rank1}, {"map", r.eval->map}};
    j.push_back(std::move(e));
  }
  return nlohmann::json{{"epochs", j}}.dump(2);
}

// ---------------------------------------------------------------------------
// Training

namespace {

NamedTensors trainable(const EmbedModel& model, const TrainConfig& config) {
  NamedTensors params = model.parameters();
  if (config.freeze_priors) {
    std::erase_if(params, [](const auto& p) { return p.first.starts_with("prior."); });
  }
  return params;
}

void require_finite(std::span<const double> values, const std::string& what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::NumericFailure, "non-finite values in " + what);
  }
}

Tensor stage_targets(const EmbedModel& model, TargetKind kind, std::span<const std::size_t> labels,
                     const TrainConfig& config, const Tensor& soft) {
  const auto k = model.config().num_classes;
  switch (kind) {
    case TargetKind::OneHot: return make_targets(labels, TargetMode::one_hot(), k);
    case TargetKind::Smoothed: return make_targets(labels, TargetMode::smoothed(config.loss.smoothing_epsilon), k);
    case TargetKind::Soft: return make_targets(labels, TargetMode::soft(soft), k);
  }
  throw Error(ErrorKind::InvalidConfig, "unknown target kind");
}

TrainLog run_stage(EmbedModel& model, const TrainSet& data, const TrainConfig& config, TrainState& state,
                   const TrainHooks& hooks, int stage, std::size_t epochs) {
  config.validate();
  data.validate(model.config().num_classes);
  const TargetKind kind = stage == 1 ? config.stage1_targets : config.stage2_targets;
  if (kind == TargetKind::Soft && model.config().loss == LossKind::CrossEntropy) {
    throw Error(ErrorKind::InvalidConfig, "soft labels need class priors; the ce baseline has none");
  }
  TrainLog log;
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto start = std::chrono::steady_clock::now();
    const std::size_t epoch = state.epoch;
    if (hooks.epoch_start) hooks.epoch_start(model, epoch);
    Tensor soft;
    if (kind == TargetKind::Soft) {
      NoGradGuard guard;
      soft = soft_labels(model.bank(), config.loss.tau);
      if (hooks.soft_labels) hooks.soft_labels(epoch, soft);
    }
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, 1000 + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = stage;
    rec.lr = lr_schedule(epoch, config);
    const std::uint64_t epoch_seed = derive_seed(config.seed, 2000 + epoch);
    for (std::size_t b = 0, begin = 0; begin < order.size(); ++b, begin += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + begin,
                                             std::min(config.batch_size, order.size() - begin));
      std::vector<std::size_t> labels;
      for (auto i : idx) labels.push_back(data.labels[i]);
      const Tensor targets = stage_targets(model, kind, labels, config, soft);
      const auto parts = train_step(model, state, config, take_rows(data.inputs, idx), targets, labels, rec.lr,
                                    derive_seed(epoch_seed, b));
      const double n = static_cast<double>(idx.size());
      rec.total += parts.total.item() * n;
      rec.cls += parts.cls.item() * n;
      rec.kl += parts.kl.item() * n;
    }
    const double n = static_cast<double>(data.size());
    rec.total /= n;
    rec.cls /= n;
    rec.kl /= n;
    ++state.epoch;
    if (hooks.evaluate) rec.eval = hooks.evaluate(model, epoch);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back(rec);
  }
  return log;
}

}  // namespace

LossParts train_step(EmbedModel& model, TrainState& state, const TrainConfig& config, const Tensor& inputs,
                     const Tensor& targets, std::span<const std::size_t> labels, double lr, std::uint64_t seed) {
  const NamedTensors params = trainable(model, config);
  for (const auto& [name, p] : model.parameters()) require_finite(p.data(), "parameter " + name);
  require_finite(inputs.data(), "input batch");
  const auto out = model.forward(inputs, Mode::Train, seed);
  const auto parts = model_loss(model, out, targets, labels, config.loss);
  if (!std::isfinite(parts.total.item())) {
    require_finite(out.posterior.mean.data(), "posterior mean");
    require_finite(out.posterior.variance.data(), "posterior variance");
    require_finite(parts.cls.data(), "loss.cls");
    require_finite(parts.kl.data(), "loss.kl");
    require_finite(parts.total.data(), "loss.total");
  }
  for (const auto& [name, p] : params) Tensor(p).zero_grad();
  parts.total.backward();
  for (const auto& [name, p] : params) {
    if (p.has_grad()) require_finite(p.grad(), "gradient of " + name);
  }
  state.adam.step(params, lr);
  for (const auto& [name, p] : params) require_finite(p.data(), "parameter " + name);
  return parts;
}

TrainLog train_stage1(EmbedModel& model, const TrainSet& data, const TrainConfig& config, TrainState& state,
                      const TrainHooks& hooks) {
  return run_stage(model, data, config, state, hooks, 1, config.stage1_epochs);
}

TrainLog train_stage2(EmbedModel& model, const TrainSet& data, const TrainConfig& config, TrainState& state,
                      const TrainHooks& hooks) {
  return run_stage(model, data, config, state, hooks, 2, config.stage2_epochs);
}

Checkpoint training_checkpoint(const EmbedModel& model, const TrainState& state, const std::string& config_text) {
  Checkpoint ckpt = model_checkpoint(model);
  for (auto& t : state.adam.state()) ckpt.tensors.push_back(std::move(t));
  ckpt.epoch = state.epoch;
  ckpt.config_text = config_text;
  return ckpt;
}

void restore_training(EmbedModel& model, TrainState& state, const Checkpoint& checkpoint) {
  Adam adam;
  adam.hyper = state.adam.hyper;
  adam.restore(checkpoint.tensors);
  restore_model(model, checkpoint);
  state.adam = std::move(adam);
  state.epoch = checkpoint.epoch;
}

double mean_prior_separation(const PriorBank& bank) {
  const auto priors = bank.priors();
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < priors.size(); ++i)
    for (std::size_t j = i + 1; j < priors.size(); ++j) {
      total += std::sqrt(wasserstein_sq(priors[i], priors[j]));
      ++pairs;
    }
  return pairs == 0 ? 0.0 : total / static_cast<double>(pairs);
}

}  // namespace distembed
