#include "distembed/model.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "distembed/error.hpp"
#include "distembed/seed.hpp"
#include "distembed/tensor_io.hpp"

namespace distembed {

LossKind parse_loss_kind(const std::string& name) {
  if (name == "distribution") return LossKind::Distribution;
  if (name == "gm") return LossKind::GaussianMixture;
  if (name == "ce") return LossKind::CrossEntropy;
  throw Error(ErrorKind::InvalidConfig, "unknown loss '" + name + "' (distribution, gm, ce)");
}

const char* to_string(LossKind kind) {
  switch (kind) {
    case LossKind::Distribution: return "distribution";
    case LossKind::GaussianMixture: return "gm";
    case LossKind::CrossEntropy: return "ce";
  }
  return "?";
}

SigmaNetConfig ModelConfig::sigma_config() const {
  SigmaNetConfig c;
  c.channels = channels;
  c.dropout = sigma_dropout;
  return c;
}

void ModelConfig::validate() const {
  if (channels == 0) throw Error(ErrorKind::InvalidConfig, "channels must be positive");
  if (num_classes < 1) throw Error(ErrorKind::InvalidConfig, "need at least one class");
  sigma_config().validate();
  if (backbone.kind == BackboneKind::TinyConv &&
      (backbone.image_height < 4 || backbone.image_width < 4 || backbone.in_channels == 0)) {
    throw Error(ErrorKind::InvalidConfig, "tiny-conv backbone needs images of at least 4x4");
  }
}

namespace {

Tensor kaiming(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

EmbedModel::EmbedModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      sigma_(SigmaNetParams::initialise(config_.sigma_config(), derive_seed(seed, 2))),
      bank_(PriorBank::initialise(config_.num_classes, config_.channels, derive_seed(seed, 3))) {
  config_.validate();
  std::mt19937_64 rng(derive_seed(seed, 1));
  if (config_.backbone.kind == BackboneKind::TinyConv) {
    const std::size_t widths[] = {config_.backbone.in_channels, config_.backbone.block1, config_.backbone.block2,
                                  config_.channels};
    for (int i = 0; i < 3; ++i) {
      const auto cin = widths[i], cout = widths[i + 1];
      blocks_.push_back({kaiming({3, 3, cin, cout}, 9 * cin, rng), Tensor::zeros({cout}, true),
                         Tensor::full({cout}, 1.0, true), Tensor::zeros({cout}, true)});
    }
  }
  std::mt19937_64 cls_rng(derive_seed(seed, 4));
  std::normal_distribution<double> normal(0.0, 0.01);
  std::vector<double> w(config_.channels * config_.num_classes);
  for (auto& x : w) x = normal(cls_rng);
  classifier_w_ = Tensor({config_.channels, config_.num_classes}, std::move(w), true);
  classifier_b_ = Tensor::zeros({config_.num_classes}, true);
}

Tensor EmbedModel::backbone_forward(const Tensor& inputs) const {
  if (config_.backbone.kind == BackboneKind::IdentityVector) {
    if (inputs.rank() != 2 || inputs.dim(1) != config_.channels) {
      throw Error(ErrorKind::IncompatibleShape, "identity backbone expects [N," + std::to_string(config_.channels) +
                                                    "] vectors, got " + shape_str(inputs.shape()));
    }
    return reshape(inputs, {inputs.dim(0), 1, 1, config_.channels});
  }
  const auto& spec = config_.backbone;
  if (inputs.rank() != 4 || inputs.dim(1) != spec.image_height || inputs.dim(2) != spec.image_width ||
      inputs.dim(3) != spec.in_channels) {
    throw Error(ErrorKind::IncompatibleShape,
                "backbone expects [N," + std::to_string(spec.image_height) + "," + std::to_string(spec.image_width) +
                    "," + std::to_string(spec.in_channels) + "] images, got " + shape_str(inputs.shape()));
  }
  Tensor x = inputs;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& blk = blocks_[i];
    x = relu(affine_norm(conv2d(x, blk.w, blk.b, {3, 3, 1, 1, 1, 1}), blk.gamma, blk.beta));
    // The last block keeps stride 1.
    if (i + 1 < blocks_.size()) x = pool(PoolKind::Avg, x, {2, 2, 2, 2, 0, 0});
  }
  return x;
}

ModelOutput EmbedModel::forward(const Tensor& inputs, Mode mode, std::uint64_t seed) const {
  Tensor f = backbone_forward(inputs);
  Tensor mu = global_avg_pool(f);
  Tensor var = variance_head_forward(config_.head, f, sigma_, config_.sigma_config(), mode, seed);
  return {{mu, var}, f};
}

NamedTensors EmbedModel::backbone_parameters() const {
  NamedTensors out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto p = "backbone.block" + std::to_string(i + 1) + ".";
    out.emplace_back(p + "conv_w", blocks_[i].w);
    out.emplace_back(p + "conv_b", blocks_[i].b);
    out.emplace_back(p + "norm_gamma", blocks_[i].gamma);
    out.emplace_back(p + "norm_beta", blocks_[i].beta);
  }
  return out;
}

NamedTensors EmbedModel::parameters() const {
  NamedTensors out = backbone_parameters();
  switch (config_.loss) {
    case LossKind::Distribution:
      for (auto& p : sigma_.parameters(config_.head)) out.push_back(p);
      [[fallthrough]];
    case LossKind::GaussianMixture:
      out.emplace_back("prior.means", bank_.means());
      out.emplace_back("prior.rho", bank_.variance_params());
      break;
    case LossKind::CrossEntropy:
      out.emplace_back("classifier.w", classifier_w_);
      out.emplace_back("classifier.b", classifier_b_);
      break;
  }
  return out;
}

NamedTensors EmbedModel::state() const {
  NamedTensors out = backbone_parameters();
  for (auto& p : sigma_.parameters(VarianceHeadKind::Sigma)) out.push_back(p);
  for (auto& p : sigma_.parameters(VarianceHeadKind::Mlp)) out.push_back(p);
  out.emplace_back("prior.means", bank_.means());
  out.emplace_back("prior.rho", bank_.variance_params());
  out.emplace_back("classifier.w", classifier_w_);
  out.emplace_back("classifier.b", classifier_b_);
  return out;
}

LossParts model_loss(const EmbedModel& model, const ModelOutput& out, const Tensor& targets,
                     std::span<const std::size_t> labels, const LossConfig& loss_config) {
  switch (model.config().loss) {
    case LossKind::Distribution:
      return distribution_loss(out.posterior, targets, labels, model.bank(), loss_config);
    case LossKind::GaussianMixture:
      return gm_loss(out.posterior.mean, targets, labels, model.bank(), loss_config.lambda);
    case LossKind::CrossEntropy: {
      Tensor logits = add(matmul(out.posterior.mean, model.classifier_w()), model.classifier_b());
      Tensor cls = cls_loss(logits, targets);
      return {cls, cls, Tensor::scalar(0.0)};
    }
  }
  throw Error(ErrorKind::InvalidConfig, "unknown loss kind");
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'G', 'C', 'K', 'P'};
constexpr const char* kEpochEntry = "meta.epoch";
constexpr const char* kConfigEntry = "meta.config";

template <typename T>
void put(std::string& out, T value) {
  out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw Error(ErrorKind::Decode, std::string("truncated checkpoint reading ") + what);
  }
  return value;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  NamedTensors entries = checkpoint.tensors;
  entries.emplace_back(kEpochEntry, Tensor::scalar(static_cast<double>(checkpoint.epoch)));
  std::vector<double> text(checkpoint.config_text.begin(), checkpoint.config_text.end());
  entries.emplace_back(kConfigEntry, Tensor::vector(std::move(text)));

  std::string body;
  put<std::uint32_t>(body, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    put<std::uint32_t>(body, static_cast<std::uint32_t>(name.size()));
    body += name;
    std::ostringstream os;
    write_tensor(os, tensor);
    body += os.str();
  }
  std::string out(kCheckpointMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  out += body;
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(crc));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw Error(ErrorKind::Checksum, "not a checkpoint (bad magic or truncated header)");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::Version, "unsupported checkpoint version " + std::to_string(version));
  }
  const std::string body = bytes.substr(8, bytes.size() - 12);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  if (static_cast<std::uint32_t>(crc) != stored) throw Error(ErrorKind::Checksum, "checkpoint CRC mismatch");

  std::istringstream is(body);
  Checkpoint out;
  const auto count = get<std::uint32_t>(is, "entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, "name length");
    if (len > 4096) throw Error(ErrorKind::Decode, "implausible tensor name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw Error(ErrorKind::Decode, "truncated tensor name");
    Tensor t = read_tensor(is);
    if (name == kEpochEntry) {
      out.epoch = static_cast<std::uint64_t>(t.item());
    } else if (name == kConfigEntry) {
      for (double c : t.data()) out.config_text.push_back(static_cast<char>(c));
    } else {
      out.tensors.emplace_back(std::move(name), std::move(t));
    }
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const std::string bytes = encode_checkpoint(checkpoint);
  std::ofstream os(path, std::ios::binary);
  if (!os || !os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw Error(ErrorKind::Io, "cannot write checkpoint " + path.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return decode_checkpoint(buffer.str());
}

Checkpoint model_checkpoint(const EmbedModel& model) {
  Checkpoint c;
  for (const auto& [name, t] : model.state()) c.tensors.emplace_back("model." + name, t.detach());
  return c;
}

void restore_model(EmbedModel& model, const Checkpoint& checkpoint) {
  auto state = model.state();
  std::vector<const Tensor*> sources;
  for (const auto& [name, t] : state) {
    const Tensor* src = checkpoint.find("model." + name);
    if (!src) throw Error(ErrorKind::IncompatibleShape, "checkpoint lacks tensor model." + name);
    if (src->shape() != t.shape()) {
      throw Error(ErrorKind::IncompatibleShape, "tensor model." + name + " has shape " + shape_str(src->shape()) +
                                                    " in checkpoint, model expects " + shape_str(t.shape()));
    }
    sources.push_back(src);
  }
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto dst = state[i].second.mutable_data();
    std::copy(sources[i]->data().begin(), sources[i]->data().end(), dst.begin());
  }
}

}  // namespace distembed
