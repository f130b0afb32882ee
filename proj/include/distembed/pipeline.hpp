#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "distembed/corruption.hpp"
#include "distembed/data_io.hpp"
#include "distembed/model.hpp"
#include "distembed/retrieval.hpp"
#include "distembed/trainer.hpp"

namespace distembed {

/// Everything a run needs, resolved before any work starts.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  std::string dataset;  // Market-style directory; empty selects synthetic data
  SyntheticSpec synthetic;
  SplitPolicy split;
  double train_label_noise = 0.0;
  ModelConfig model;
  TrainConfig train;
  bool stage2 = true;
  DistanceMode distance = DistanceMode::Euclidean;
  std::size_t eval_batch = 64;

  void validate() const;
  /// Flat INI text with dotted sections; parse_config(to_text()) round-trips.
  std::string to_text() const;
};

/// Applies INI text on top of `base`. Unknown keys are an invalid-config error.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

/// Seeds of the independent parts of a run, all derived from RunConfig::seed.
struct RunSeeds {
  std::uint64_t data, split, model, train, label_noise, corruption;
  static RunSeeds from(std::uint64_t seed);
};

struct PreparedData {
  Dataset data;
  Split split;
  std::vector<std::size_t> train_labels;  // after optional label noise
  std::vector<double> channel_mean;       // of the training inputs, per channel
  std::size_t height = 0, width = 0;      // backbone geometry for image data
};

/// Loads or generates the dataset, splits it, and fills in the model's class
/// count and input geometry in `config`.
PreparedData prepare_data(RunConfig& config);

Tensor inputs_for(const PreparedData& data, std::span<const std::size_t> entries);

struct RunResult {
  TrainLog log;
  Checkpoint stage1;
  Checkpoint final;
  EvalReport report;
};

/// Stage 1, optional stage 2, then evaluation on the held-out split.
RunResult run_training(const RunConfig& config, const PreparedData& data, EmbedModel& model);

/// Eval-mode posteriors for the given entries, batched.
PosteriorBatch embed(const EmbedModel& model, const Tensor& inputs, std::size_t batch);

/// Retrieval on query vs gallery. An image corruption, if given, touches the
/// queries only.
EvalReport evaluate_model(const EmbedModel& model, const PreparedData& data, DistanceMode mode,
                          const CorruptionSpec& query_corruption = {}, std::size_t batch = 64);

}  // namespace distembed
