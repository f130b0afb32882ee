// distembed: train, evaluate and inspect distribution-embedding models.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error
// (I/O, decoding, incompatible checkpoint), 3 numeric failure (NaN or a
// gradient check over tolerance).

#include <CLI11.hpp>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <sstream>

#include "distembed/error.hpp"
#include "distembed/gradcheck_suites.hpp"
#include "distembed/pipeline.hpp"
#include "distembed/projection.hpp"

namespace fs = std::filesystem;
using namespace distembed;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::InvalidGeometry:
    case ErrorKind::ContractViolation:
    case ErrorKind::Capability: return kUsage;
    case ErrorKind::Domain:
    case ErrorKind::NumericFailure: return kNumeric;
    default: return kData;
  }
}

// Flags shared by every command. Unset optionals leave the config alone.
struct Overrides {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, loss, head, distance, synthetic, dataset;
  std::optional<double> tau, lambda, lr, label_noise;
  std::optional<bool> stage2;
  std::optional<std::size_t> stage1_epochs, stage2_epochs;
};

void add_common(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config_path, "INI config file")->check(CLI::ExistingFile);
  app.add_option("--set", o.sets, "override a config key, e.g. --set train.batch_size=16");
  app.add_option("--seed", o.seed, "global seed");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--loss", o.loss, "distribution, gm or ce");
  app.add_option("--variance-head", o.head, "sigma, bm, mlp or none");
  app.add_flag("--stage2,!--no-stage2", o.stage2, "run (or skip) the soft-label stage");
  app.add_option("--tau", o.tau, "soft-label temperature");
  app.add_option("--lambda", o.lambda, "weight of the KL term");
  app.add_option("--distance", o.distance, "euclidean, cosine or wasserstein");
  app.add_option("--synthetic", o.synthetic, "synthetic data, e.g. k=10,per_class=60,mode=image");
  app.add_option("--dataset", o.dataset, "Market-style image directory");
  app.add_option("--lr", o.lr, "base learning rate");
  app.add_option("--train-label-noise", o.label_noise, "fraction of training labels to corrupt");
  app.add_option("--stage1-epochs", o.stage1_epochs, "epochs of the hard-label stage");
  app.add_option("--stage2-epochs", o.stage2_epochs, "epochs of the soft-label stage");
}

std::string ini_line(const std::string& dotted, const std::string& value) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == dotted.size()) {
    throw Error(ErrorKind::InvalidConfig, "override key '" + dotted + "' must look like section.key");
  }
  return "[" + dotted.substr(0, dot) + "]\n" + dotted.substr(dot + 1) + " = " + value + "\n";
}

std::vector<std::string> synthetic_ini(const std::string& spec) {
  static const std::map<std::string, std::string> alias{{"k", "classes"}, {"n", "per_class"}, {"h", "height"},
                                                        {"w", "width"},   {"noise", "noise_std"}};
  std::vector<std::string> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::InvalidConfig, "--synthetic expects key=value, got '" + item + "'");
    std::string key = item.substr(0, eq);
    if (auto it = alias.find(key); it != alias.end()) key = it->second;
    out.push_back(ini_line("synthetic." + key, item.substr(eq + 1)));
  }
  return out;
}

// Precedence, lowest first: built-in defaults, the config stored in a
// checkpoint, --config, --set, then the dedicated flags.
RunConfig resolve(const Overrides& o, const std::string& checkpoint_config = {}) {
  RunConfig c;
  if (!checkpoint_config.empty()) c = parse_config(checkpoint_config, c);
  if (!o.config_path.empty()) c = load_config(o.config_path, c);
  // One parse per override: the INI reader rejects repeated sections.
  auto apply = [&](const std::string& text) { c = parse_config(text, c); };
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::InvalidConfig, "--set expects key=value, got '" + s + "'");
    apply(ini_line(s.substr(0, eq), s.substr(eq + 1)));
  }
  auto put = [&](const char* key, const auto& value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    apply(ini_line(key, os.str()));
  };
  if (o.seed) put("run.seed", *o.seed);
  if (o.out) put("run.out", *o.out);
  if (o.loss) put("model.loss", *o.loss);
  if (o.head) put("model.head", *o.head);
  if (o.stage2) put("run.stage2", *o.stage2 ? "true" : "false");
  if (o.tau) put("train.tau", *o.tau);
  if (o.lambda) put("train.lambda", *o.lambda);
  if (o.distance) put("run.distance", *o.distance);
  if (o.dataset) put("data.dataset", *o.dataset);
  if (o.lr) put("train.lr", *o.lr);
  if (o.label_noise) put("data.train_label_noise", *o.label_noise);
  if (o.stage1_epochs) put("train.stage1_epochs", *o.stage1_epochs);
  if (o.stage2_epochs) put("train.stage2_epochs", *o.stage2_epochs);
  if (o.synthetic)
    for (const auto& line : synthetic_ini(*o.synthetic)) apply(line);
  // ce has no priors to build soft labels from; fall back to smoothed targets.
  if (c.model.loss == LossKind::CrossEntropy && c.train.stage2_targets == TargetKind::Soft) {
    c.train.stage2_targets = TargetKind::Smoothed;
  }
  c.validate();
  return c;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os || !(os << text)) throw Error(ErrorKind::Io, "cannot write " + path.string());
}

fs::path prepare_out(const RunConfig& c, const std::string& command) {
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  write_file(dir / (command + "-config.ini"), c.to_text());
  return dir;
}

std::string tag_for(const std::string& spec) {
  std::string out;
  for (char ch : spec) out += std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' ? ch : '_';
  return out;
}

// The model described by `config`, with weights from the checkpoint.
EmbedModel load_model(const RunConfig& config, const Checkpoint& checkpoint) {
  EmbedModel model(config.model, RunSeeds::from(config.seed).model);
  restore_model(model, checkpoint);
  return model;
}

int cmd_train(const Overrides& o) {
  RunConfig c = resolve(o);
  const auto data = prepare_data(c);
  const auto dir = prepare_out(c, "train");
  EmbedModel model(c.model, RunSeeds::from(c.seed).model);
  auto initial = model_checkpoint(model);
  initial.config_text = c.to_text();
  save_checkpoint(dir / "initial.ckpt", initial);
  const auto result = run_training(c, data, model);
  save_checkpoint(dir / "stage1.ckpt", result.stage1);
  save_checkpoint(dir / "final.ckpt", result.final);
  write_file(dir / "train_log.csv", result.log.to_csv(false));
  write_file(dir / "train_log.json", result.log.to_json(false));
  write_file(dir / "timing.csv", result.log.to_csv(true));
  write_file(dir / "report.json", result.report.to_json());
  write_file(dir / "report.csv", result.report.to_csv());
  std::printf("trained %zu epochs on %zu images, %zu classes\n", result.log.epochs.size(), data.split.train.size(),
              data.split.num_classes);
  std::printf("rank1 %.4f  rank5 %.4f  mAP %.4f  (%s)\n", result.report.rank(1),
              result.report.rank(std::min<std::size_t>(5, result.report.cmc.size())), result.report.map,
              to_string(c.distance));
  return kOk;
}

int cmd_eval(const Overrides& o, const std::string& checkpoint_path, const std::vector<std::string>& corruptions) {
  const auto checkpoint = load_checkpoint(checkpoint_path);
  RunConfig c = resolve(o, checkpoint.config_text);
  const auto data = prepare_data(c);
  const auto dir = prepare_out(c, "eval");
  const auto model = load_model(c, checkpoint);
  std::vector<std::string> specs = corruptions.empty() ? std::vector<std::string>{"none"} : corruptions;
  std::printf("%-28s %8s %8s %8s\n", "query corruption", "rank1", "rank5", "mAP");
  for (const auto& s : specs) {
    const auto spec = CorruptionSpec::parse(s, RunSeeds::from(c.seed).corruption);
    if (spec.kind == CorruptionKind::LabelNoise) {
      throw Error(ErrorKind::InvalidConfig, "label noise is a training corruption; use --train-label-noise");
    }
    const auto report = evaluate_model(model, data, c.distance, spec, c.eval_batch);
    const std::string stem = s == "none" ? "eval" : "eval-" + tag_for(s);
    write_file(dir / (stem + ".json"), report.to_json());
    write_file(dir / (stem + ".csv"), report.to_csv());
    std::printf("%-28s %8.4f %8.4f %8.4f\n", s.c_str(), report.rank(1),
                report.rank(std::min<std::size_t>(5, report.cmc.size())), report.map);
  }
  return kOk;
}

int cmd_gradcheck(const Overrides& o, const std::vector<std::string>& faults, double tolerance) {
  RunConfig c = resolve(o);
  const auto dir = prepare_out(c, "gradcheck");
  const auto known = gradcheck_components();
  for (const auto& f : faults) {
    if (std::find(known.begin(), known.end(), f) == known.end()) {
      throw Error(ErrorKind::InvalidConfig, "unknown component '" + f + "' for --inject-sign-error");
    }
  }
  SuiteOptions options{c.seed, tolerance, faults};
  const auto reports = run_gradcheck_suites(options);
  nlohmann::json j = nlohmann::json::array();
  bool ok = true;
  for (const auto& r : reports) {
    std::printf("%-22s max rel err %.3e  (%s)  %s\n", r.component.c_str(), r.result.max_relative_error,
                r.result.worst_tensor.c_str(), r.passed ? "pass" : "FAIL");
    j.push_back({{"component", r.component},
                 {"max_relative_error", r.result.max_relative_error},
                 {"worst_tensor", r.result.worst_tensor},
                 {"entries_checked", r.result.entries_checked},
                 {"passed", r.passed}});
    ok = ok && r.passed;
  }
  write_file(dir / "gradcheck.json", nlohmann::json{{"seed", c.seed}, {"tolerance", tolerance}, {"suites", j}}.dump(2));
  return ok ? kOk : kNumeric;
}

PriorBank bank_from(const Checkpoint& checkpoint) {
  const Tensor* means = checkpoint.find("model.prior.means");
  const Tensor* rho = checkpoint.find("model.prior.rho");
  if (!means || !rho) throw Error(ErrorKind::IncompatibleShape, "checkpoint has no prior bank");
  return PriorBank(means->detach(), rho->detach());
}

int cmd_softlabels(const Overrides& o, const std::string& checkpoint_path, std::vector<double> taus) {
  const auto checkpoint = load_checkpoint(checkpoint_path);
  RunConfig c = resolve(o, checkpoint.config_text);
  const auto dir = prepare_out(c, "softlabels");
  const auto bank = bank_from(checkpoint);
  if (taus.empty()) taus.push_back(c.train.loss.tau);
  std::sort(taus.begin(), taus.end());
  nlohmann::json entropy = nlohmann::json::array();
  std::printf("%10s %14s %14s\n", "tau", "mean entropy", "max row err");
  double previous = -1.0;
  bool monotone = true;
  for (double tau : taus) {
    const Tensor m = soft_labels(bank, tau);
    const std::size_t k = m.dim(0);
    std::ostringstream csv;
    csv.precision(17);
    double worst = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
      double row = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        csv << (j ? "," : "") << m.data()[r * k + j];
        row += m.data()[r * k + j];
      }
      csv << '\n';
      worst = std::max(worst, std::abs(row - 1.0));
    }
    std::ostringstream name;
    name << "softlabels-tau" << tau << ".csv";
    write_file(dir / name.str(), csv.str());
    const auto h = row_entropy(m);
    double mean_h = 0.0;
    for (double v : h) mean_h += v / static_cast<double>(h.size());
    monotone = monotone && mean_h >= previous;
    previous = mean_h;
    entropy.push_back({{"tau", tau}, {"row_entropy", h}, {"mean_entropy", mean_h}, {"max_row_sum_error", worst}});
    std::printf("%10.4g %14.6f %14.2e\n", tau, mean_h, worst);
  }
  write_file(dir / "softlabels-entropy.json", nlohmann::json{{"taus", entropy}, {"monotone", monotone}}.dump(2));
  std::printf("mean entropy non-decreasing in tau: %s\n", monotone ? "yes" : "no");
  return kOk;
}

int cmd_project(const Overrides& o, const std::string& checkpoint_path, const std::string& what, std::size_t count,
                std::size_t samples, const std::string& method, bool points) {
  const auto checkpoint = load_checkpoint(checkpoint_path);
  RunConfig c = resolve(o, checkpoint.config_text);
  const auto data = prepare_data(c);
  const auto dir = prepare_out(c, "project");
  std::vector<DiagGaussian> dists;
  std::vector<std::string> labels;
  if (what == "priors") {
    const auto bank = bank_from(checkpoint);
    std::vector<long> raw(bank.num_classes(), -1);
    for (const auto& [id, k] : data.data.index.relabel)
      if (k < raw.size()) raw[k] = id;
    for (std::size_t k = 0; k < std::min(count, bank.num_classes()); ++k) {
      dists.push_back(bank.prior(k));
      labels.push_back(std::to_string(raw[k]));
    }
  } else if (what == "images") {
    const auto model = load_model(c, checkpoint);
    std::vector<std::size_t> entries(data.split.query.begin(),
                                     data.split.query.begin() + std::min(count, data.split.query.size()));
    const auto post = embed(model, inputs_for(data, entries), c.eval_batch);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      dists.push_back(post.at(i));
      labels.push_back("q" + std::to_string(i) + ":" + std::to_string(data.data.index.entries[entries[i]].raw_id));
    }
  } else {
    throw Error(ErrorKind::InvalidConfig, "--what must be priors or images");
  }
  const auto projected =
      project_distributions(dists, labels, samples, parse_projection_method(method), RunSeeds::from(c.seed).corruption);
  export_ellipses(projected, dir / "projection.svg", {.include_points = points});
  write_file(dir / "projection.csv", projection_csv(projected));
  std::printf("projected %zu distributions to %s\n", projected.size(), (dir / "projection.svg").c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distribution embeddings for re-identification"};
  app.require_subcommand(1);

  Overrides train_o, eval_o, grad_o, soft_o, proj_o;
  auto* train = app.add_subcommand("train", "two-stage training, checkpoints, logs and a final report");
  add_common(*train, train_o);

  auto* eval = app.add_subcommand("eval", "retrieval evaluation of a checkpoint");
  add_common(*eval, eval_o);
  std::string eval_ckpt;
  std::vector<std::string> corruptions;
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--corrupt", corruptions, "query corruption, e.g. gaussian-blur:k=5 (repeatable)");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every differentiable component");
  add_common(*grad, grad_o);
  std::vector<std::string> faults;
  double tolerance = kGradCheckTolerance;
  grad->add_option("--inject-sign-error", faults, "negate the analytic gradient of a component");
  grad->add_option("--tolerance", tolerance, "maximum relative error");

  auto* soft = app.add_subcommand("softlabels", "export prior-similarity soft labels");
  add_common(*soft, soft_o);
  std::string soft_ckpt;
  std::vector<double> taus;
  soft->add_option("--checkpoint", soft_ckpt)->required()->check(CLI::ExistingFile);
  soft->add_option("--sweep-tau", taus, "temperatures to export (repeatable); default is train.tau");

  auto* proj = app.add_subcommand("project", "2-D projection of priors or query posteriors");
  add_common(*proj, proj_o);
  std::string proj_ckpt, what = "priors", method = "pca";
  std::size_t count = 10, samples = 2000;
  bool points = false;
  proj->add_option("--checkpoint", proj_ckpt)->required()->check(CLI::ExistingFile);
  proj->add_option("--what", what, "priors or images");
  proj->add_option("--count", count, "number of distributions");
  proj->add_option("--samples", samples, "codes sampled per distribution");
  proj->add_option("--method", method, "pca or tsne");
  proj->add_flag("--points", points, "draw the sampled points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(train_o);
    if (*eval) return cmd_eval(eval_o, eval_ckpt, corruptions);
    if (*grad) return cmd_gradcheck(grad_o, faults, tolerance);
    if (*soft) return cmd_softlabels(soft_o, soft_ckpt, taus);
    if (*proj) return cmd_project(proj_o, proj_ckpt, what, count, samples, method, points);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
  return kUsage;
}
