#include "distembed/pipeline.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <sstream>

#include "distembed/error.hpp"
#include "distembed/seed.hpp"

namespace distembed {

namespace pt = boost::property_tree;

void RunConfig::validate() const {
  if (dataset.empty()) synthetic.validate();
  if (!(train_label_noise >= 0.0 && train_label_noise <= 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "train_label_noise must lie in [0,1]");
  }
  train.validate();
  if (eval_batch == 0) throw Error(ErrorKind::InvalidConfig, "eval_batch must be positive");
  if (model.loss == LossKind::CrossEntropy && stage2 && train.stage2_epochs > 0 &&
      train.stage2_targets == TargetKind::Soft) {
    throw Error(ErrorKind::InvalidConfig, "the ce baseline has no priors for soft labels; use train.stage2_targets = smoothed");
  }
}

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<std::size_t> split_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw Error(ErrorKind::InvalidConfig, "bad integer list '" + s + "'");
    }
  }
  return out;
}

const char* target_name(TargetKind k) {
  switch (k) {
    case TargetKind::OneHot: return "one-hot";
    case TargetKind::Smoothed: return "smoothed";
    case TargetKind::Soft: return "soft";
  }
  return "?";
}

TargetKind parse_target(const std::string& s) {
  if (s == "one-hot") return TargetKind::OneHot;
  if (s == "smoothed") return TargetKind::Smoothed;
  if (s == "soft") return TargetKind::Soft;
  throw Error(ErrorKind::InvalidConfig, "unknown target mode '" + s + "' (one-hot, smoothed, soft)");
}

const char* policy_name(SplitPolicyKind k) {
  switch (k) {
    case SplitPolicyKind::Tagged: return "tagged";
    case SplitPolicyKind::IdentityHalf: return "identity-half";
    case SplitPolicyKind::Holdout: return "holdout";
  }
  return "?";
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

pt::ptree to_tree(const RunConfig& c) {
  pt::ptree t;
  t.put("run.seed", c.seed);
  t.put("run.out", c.out_dir);
  t.put("run.distance", to_string(c.distance));
  t.put("run.stage2", c.stage2 ? "true" : "false");
  t.put("run.eval_batch", c.eval_batch);
  t.put("data.dataset", c.dataset);
  t.put("data.policy", policy_name(c.split.kind));
  t.put("data.train_fraction", fmt(c.split.train_fraction));
  t.put("data.queries_per_camera", c.split.queries_per_camera);
  t.put("data.train_label_noise", fmt(c.train_label_noise));
  const auto& s = c.synthetic;
  t.put("synthetic.classes", s.num_classes);
  t.put("synthetic.per_class", s.per_class);
  t.put("synthetic.mode", s.mode == SyntheticMode::Image ? "image" : "vector");
  t.put("synthetic.dim", s.dim);
  t.put("synthetic.mean_scale", fmt(s.mean_scale));
  t.put("synthetic.within_std", fmt(s.within_std));
  t.put("synthetic.height", s.height);
  t.put("synthetic.width", s.width);
  t.put("synthetic.noise_std", fmt(s.noise_std));
  const auto& m = c.model;
  t.put("model.channels", m.channels);
  t.put("model.head", to_string(m.head));
  t.put("model.loss", to_string(m.loss));
  t.put("model.sigma_dropout", fmt(m.sigma_dropout));
  t.put("model.block1", m.backbone.block1);
  t.put("model.block2", m.backbone.block2);
  t.put("model.image_height", m.backbone.image_height);
  t.put("model.image_width", m.backbone.image_width);
  const auto& r = c.train;
  t.put("train.stage1_epochs", r.stage1_epochs);
  t.put("train.stage2_epochs", r.stage2_epochs);
  t.put("train.warmup_epochs", r.warmup_epochs);
  t.put("train.decay_epochs", join(r.decay_epochs));
  t.put("train.decay_factor", fmt(r.decay_factor));
  t.put("train.lr", fmt(r.base_lr));
  t.put("train.batch_size", r.batch_size);
  t.put("train.lambda", fmt(r.loss.lambda));
  t.put("train.tau", fmt(r.loss.tau));
  t.put("train.smoothing", fmt(r.loss.smoothing_epsilon));
  t.put("train.stage1_targets", target_name(r.stage1_targets));
  t.put("train.stage2_targets", target_name(r.stage2_targets));
  t.put("train.freeze_priors", r.freeze_priors ? "true" : "false");
  return t;
}

template <typename T>
T get_value(const pt::ptree& node, const std::string& key) {
  try {
    return node.get_value<T>();
  } catch (const pt::ptree_error&) {
    throw Error(ErrorKind::InvalidConfig, "bad value '" + node.data() + "' for " + key);
  }
}

bool get_bool(const pt::ptree& node, const std::string& key) {
  const auto v = node.data();
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorKind::InvalidConfig, "bad boolean '" + v + "' for " + key);
}

void apply(RunConfig& c, const std::string& key, const pt::ptree& node) {
  const std::string v = node.data();
  auto sz = [&] { return get_value<std::size_t>(node, key); };
  auto dbl = [&] { return get_value<double>(node, key); };
  if (key == "run.seed") c.seed = get_value<std::uint64_t>(node, key);
  else if (key == "run.out") c.out_dir = v;
  else if (key == "run.distance") c.distance = parse_distance(v);
  else if (key == "run.stage2") c.stage2 = get_bool(node, key);
  else if (key == "run.eval_batch") c.eval_batch = sz();
  else if (key == "data.dataset") c.dataset = v;
  else if (key == "data.policy") c.split.kind = parse_split_policy(v);
  else if (key == "data.train_fraction") c.split.train_fraction = dbl();
  else if (key == "data.queries_per_camera") c.split.queries_per_camera = sz();
  else if (key == "data.train_label_noise") c.train_label_noise = dbl();
  else if (key == "synthetic.classes") c.synthetic.num_classes = sz();
  else if (key == "synthetic.per_class") c.synthetic.per_class = sz();
  else if (key == "synthetic.mode") {
    if (v == "image") c.synthetic.mode = SyntheticMode::Image;
    else if (v == "vector") c.synthetic.mode = SyntheticMode::Vector;
    else throw Error(ErrorKind::InvalidConfig, "synthetic.mode must be image or vector");
  } else if (key == "synthetic.dim") c.synthetic.dim = sz();
  else if (key == "synthetic.mean_scale") c.synthetic.mean_scale = dbl();
  else if (key == "synthetic.within_std") c.synthetic.within_std = dbl();
  else if (key == "synthetic.height") c.synthetic.height = sz();
  else if (key == "synthetic.width") c.synthetic.width = sz();
  else if (key == "synthetic.noise_std") c.synthetic.noise_std = dbl();
  else if (key == "model.channels") c.model.channels = sz();
  else if (key == "model.head") c.model.head = parse_variance_head(v);
  else if (key == "model.loss") c.model.loss = parse_loss_kind(v);
  else if (key == "model.sigma_dropout") c.model.sigma_dropout = dbl();
  else if (key == "model.block1") c.model.backbone.block1 = sz();
  else if (key == "model.block2") c.model.backbone.block2 = sz();
  else if (key == "model.image_height") c.model.backbone.image_height = sz();
  else if (key == "model.image_width") c.model.backbone.image_width = sz();
  else if (key == "train.stage1_epochs") c.train.stage1_epochs = sz();
  else if (key == "train.stage2_epochs") c.train.stage2_epochs = sz();
  else if (key == "train.warmup_epochs") c.train.warmup_epochs = sz();
  else if (key == "train.decay_epochs") c.train.decay_epochs = split_list(v);
  else if (key == "train.decay_factor") c.train.decay_factor = dbl();
  else if (key == "train.lr") c.train.base_lr = dbl();
  else if (key == "train.batch_size") c.train.batch_size = sz();
  else if (key == "train.lambda") c.train.loss.lambda = dbl();
  else if (key == "train.tau") c.train.loss.tau = dbl();
  else if (key == "train.smoothing") c.train.loss.smoothing_epsilon = dbl();
  else if (key == "train.stage1_targets") c.train.stage1_targets = parse_target(v);
  else if (key == "train.stage2_targets") c.train.stage2_targets = parse_target(v);
  else if (key == "train.freeze_priors") c.train.freeze_priors = get_bool(node, key);
  else throw Error(ErrorKind::InvalidConfig, "unknown config key '" + key + "'");
}

}  // namespace

std::string RunConfig::to_text() const {
  std::ostringstream os;
  pt::write_ini(os, to_tree(*this));
  return os.str();
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw Error(ErrorKind::InvalidConfig, "config key '" + section + "' is outside a section");
    for (const auto& [key, node] : body) apply(base, section + "." + key, node);
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

RunSeeds RunSeeds::from(std::uint64_t seed) {
  return {derive_seed(seed, 10), derive_seed(seed, 11), derive_seed(seed, 12),
          derive_seed(seed, 13), derive_seed(seed, 14), derive_seed(seed, 15)};
}

PreparedData prepare_data(RunConfig& config) {
  config.validate();
  const auto seeds = RunSeeds::from(config.seed);
  PreparedData out;
  if (config.dataset.empty()) {
    auto spec = config.synthetic;
    spec.seed = seeds.data;
    out.data = generate_synthetic(spec);
    if (spec.mode == SyntheticMode::Vector) {
      config.model.backbone.kind = BackboneKind::IdentityVector;
      config.model.channels = spec.dim;
    } else {
      config.model.backbone.kind = BackboneKind::TinyConv;
      config.model.backbone.image_height = spec.height;
      config.model.backbone.image_width = spec.width;
    }
  } else {
    out.data.index = index_market_dir(config.dataset);
    config.model.backbone.kind = BackboneKind::TinyConv;
  }
  out.height = config.model.backbone.image_height;
  out.width = config.model.backbone.image_width;
  auto policy = config.split;
  policy.seed = seeds.split;
  out.split = split(out.data.index, policy);
  config.model.num_classes = out.split.num_classes;
  out.train_labels = out.split.train_labels;
  if (config.train_label_noise > 0.0) {
    out.train_labels = corrupt_labels(out.train_labels, config.train_label_noise, out.split.num_classes, seeds.label_noise);
  }
  if (config.model.backbone.kind == BackboneKind::TinyConv) {
    const Tensor train = inputs_for(out, out.split.train);
    const std::size_t c = train.shape().back();
    out.channel_mean.assign(c, 0.0);
    for (std::size_t i = 0; i < train.numel(); ++i) out.channel_mean[i % c] += train.data()[i];
    for (auto& m : out.channel_mean) m /= static_cast<double>(train.numel() / c);
  }
  return out;
}

Tensor inputs_for(const PreparedData& data, std::span<const std::size_t> entries) {
  return load_inputs(data.data, entries, data.height, data.width);
}

PosteriorBatch embed(const EmbedModel& model, const Tensor& inputs, std::size_t batch) {
  NoGradGuard guard;
  const std::size_t n = inputs.dim(0);
  const std::size_t d = model.config().channels;
  std::vector<double> mean, var;
  mean.reserve(n * d);
  var.reserve(n * d);
  for (std::size_t begin = 0; begin < n; begin += batch) {
    const auto len = std::min(batch, n - begin);
    const auto out = model.forward(slice(inputs, 0, begin, len), Mode::Eval, 0);
    mean.insert(mean.end(), out.posterior.mean.data().begin(), out.posterior.mean.data().end());
    var.insert(var.end(), out.posterior.variance.data().begin(), out.posterior.variance.data().end());
  }
  return {Tensor({n, d}, std::move(mean)), Tensor({n, d}, std::move(var))};
}

namespace {

RetrievalSet retrieval_set(const EmbedModel& model, const PreparedData& data, const std::vector<std::size_t>& entries,
                           const CorruptionSpec& corruption, std::size_t batch) {
  Tensor inputs = inputs_for(data, entries);
  if (corruption.is_image_corruption()) {
    if (inputs.rank() != 4) throw Error(ErrorKind::InvalidInput, "image corruptions need image data");
    inputs = corrupt_images(inputs, corruption, data.channel_mean);
  }
  const auto post = embed(model, inputs, batch);
  std::vector<long> ids;
  std::vector<int> cams;
  for (auto e : entries) {
    ids.push_back(data.data.index.entries[e].raw_id);
    cams.push_back(data.data.index.entries[e].cam);
  }
  return RetrievalSet::from(post.mean, post.variance, std::move(ids), std::move(cams));
}

}  // namespace

EvalReport evaluate_model(const EmbedModel& model, const PreparedData& data, DistanceMode mode,
                          const CorruptionSpec& query_corruption, std::size_t batch) {
  if (data.split.query.empty() || data.split.gallery.empty()) {
    throw Error(ErrorKind::InvalidInput, "split has no query or gallery images");
  }
  const auto queries = retrieval_set(model, data, data.split.query, query_corruption, batch);
  const auto gallery = retrieval_set(model, data, data.split.gallery, {}, batch);
  return evaluate(queries, gallery, mode);
}

RunResult run_training(const RunConfig& config, const PreparedData& data, EmbedModel& model) {
  auto tc = config.train;
  tc.seed = RunSeeds::from(config.seed).train;
  TrainSet set{inputs_for(data, data.split.train), data.train_labels};
  TrainState state;
  RunResult result;
  const auto text = config.to_text();
  result.log = train_stage1(model, set, tc, state);
  result.stage1 = training_checkpoint(model, state, text);
  if (config.stage2 && tc.stage2_epochs > 0) result.log.append(train_stage2(model, set, tc, state));
  result.final = training_checkpoint(model, state, text);
  result.report = evaluate_model(model, data, config.distance, {}, config.eval_batch);
  return result;
}

}  // namespace distembed
