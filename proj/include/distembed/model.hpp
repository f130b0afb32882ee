#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "distembed/dist_loss.hpp"
#include "distembed/gradcheck.hpp"
#include "distembed/sigma_net.hpp"
#include "distembed/tensor.hpp"

namespace distembed {

enum class BackboneKind { TinyConv, IdentityVector };

struct BackboneSpec {
  BackboneKind kind = BackboneKind::TinyConv;
  std::size_t image_height = 64;
  std::size_t image_width = 32;
  std::size_t in_channels = 3;
  // Widths of the first two conv blocks; the third block outputs `channels`.
  std::size_t block1 = 16;
  std::size_t block2 = 32;
};

enum class LossKind { Distribution, GaussianMixture, CrossEntropy };

LossKind parse_loss_kind(const std::string& name);
const char* to_string(LossKind kind);

struct ModelConfig {
  BackboneSpec backbone;
  std::size_t channels = 64;
  std::size_t num_classes = 10;
  VarianceHeadKind head = VarianceHeadKind::Sigma;
  LossKind loss = LossKind::Distribution;
  double sigma_dropout = 0.25;

  SigmaNetConfig sigma_config() const;
  void validate() const;
};

struct ModelOutput {
  PosteriorBatch posterior;  // mean = GAP(F), variance = head(F)
  Tensor features;           // backbone output F, [N,H,W,C]
};

/// Backbone + mean branch + variance head + class priors (and a linear
/// classifier for the cross-entropy baseline).
class EmbedModel {
 public:
  EmbedModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// Inputs are [N,H,W,Cin] images for the tiny-conv backbone or [N,d]
  /// vectors for the identity backbone.
  ModelOutput forward(const Tensor& inputs, Mode mode, std::uint64_t seed) const;
  Tensor backbone_forward(const Tensor& inputs) const;

  /// Trainable tensors for the configured loss and head.
  NamedTensors parameters() const;
  /// Every tensor the model owns, used or not; what checkpoints carry.
  NamedTensors state() const;

  PriorBank& bank() { return bank_; }
  const PriorBank& bank() const { return bank_; }
  SigmaNetParams& sigma_params() { return sigma_; }
  const SigmaNetParams& sigma_params() const { return sigma_; }
  NamedTensors backbone_parameters() const;
  const Tensor& classifier_w() const { return classifier_w_; }
  const Tensor& classifier_b() const { return classifier_b_; }

 private:
  ModelConfig config_;
  // Tiny-conv blocks: conv weight, conv bias, norm gamma, norm beta.
  struct Block {
    Tensor w, b, gamma, beta;
  };
  std::vector<Block> blocks_;
  SigmaNetParams sigma_;
  PriorBank bank_;
  Tensor classifier_w_, classifier_b_;
};

/// Loss for one batch according to config().loss. `targets` is [N,K].
LossParts model_loss(const EmbedModel& model, const ModelOutput& out, const Tensor& targets,
                     std::span<const std::size_t> labels, const LossConfig& loss_config);

// ---------------------------------------------------------------------------
// Checkpoints: "GCKP" | version u32 | count u32 | (name-len u32, name, GTEN tensor)* | crc32 u32
// The CRC covers every byte after the magic and version.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NamedTensors tensors;
  std::uint64_t epoch = 0;
  std::string config_text;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::string& bytes);

/// Model parameters under "model.<name>".
Checkpoint model_checkpoint(const EmbedModel& model);

/// Copies every "model.*" tensor into the model. All shapes are checked
/// before anything is written; a mismatch names the offending tensor.
void restore_model(EmbedModel& model, const Checkpoint& checkpoint);

}  // namespace distembed
