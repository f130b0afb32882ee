#include "distembed/error.hpp"
#include "distembed/pipeline.hpp"
#include "doctest.h"

using namespace distembed;

namespace {

RunConfig tiny_image_config() {
  RunConfig c;
  c.seed = 3;
  c.synthetic.num_classes = 4;
  c.synthetic.per_class = 12;
  c.synthetic.height = 16;
  c.synthetic.width = 8;
  c.model.channels = 8;
  c.model.backbone.block1 = 4;
  c.model.backbone.block2 = 4;
  c.train.stage1_epochs = 2;
  c.train.stage2_epochs = 1;
  c.train.warmup_epochs = 1;
  c.train.decay_epochs = {};
  c.train.batch_size = 8;
  return c;
}

}  // namespace

TEST_CASE("config text round trip") {
  RunConfig c = tiny_image_config();
  c.train.decay_epochs = {3, 7};
  c.train.base_lr = 1.0 / 3.0;
  c.model.loss = LossKind::GaussianMixture;
  c.model.head = VarianceHeadKind::Mlp;
  c.distance = DistanceMode::Wasserstein;
  c.stage2 = false;
  c.split.kind = SplitPolicyKind::IdentityHalf;
  const auto text = c.to_text();
  const RunConfig back = parse_config(text);
  CHECK(back.to_text() == text);
  CHECK(back.train.base_lr == c.train.base_lr);
  CHECK(back.train.decay_epochs == std::vector<std::size_t>{3, 7});
  CHECK(back.model.loss == LossKind::GaussianMixture);
  CHECK(back.distance == DistanceMode::Wasserstein);
  CHECK_FALSE(back.stage2);
}

TEST_CASE("config layering and errors") {
  RunConfig base;
  base.seed = 9;
  const auto c = parse_config("[train]\nlr = 0.01\n[model]\nloss = ce\n", base);
  CHECK(c.seed == 9);
  CHECK(c.train.base_lr == 0.01);
  CHECK(c.model.loss == LossKind::CrossEntropy);

  auto kind_of = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::ContractViolation;
  };
  CHECK(kind_of("[train]\nlearning_rate = 1\n") == ErrorKind::InvalidConfig);
  CHECK(kind_of("[train]\nlr = fast\n") == ErrorKind::InvalidConfig);
  CHECK(kind_of("[run]\nstage2 = maybe\n") == ErrorKind::InvalidConfig);
  CHECK(kind_of("seed = 1\n") == ErrorKind::InvalidConfig);
  CHECK(kind_of("[model]\nloss = hinge\n") != ErrorKind::ContractViolation);
  CHECK_THROWS_AS(load_config("/nonexistent/run.ini"), Error);

  RunConfig soft_ce;
  soft_ce.model.loss = LossKind::CrossEntropy;
  soft_ce.train.stage2_targets = TargetKind::Soft;
  CHECK_THROWS_AS(soft_ce.validate(), Error);
}

TEST_CASE("seed streams are distinct") {
  const auto s = RunSeeds::from(0);
  const std::uint64_t all[] = {s.data, s.split, s.model, s.train, s.label_noise, s.corruption};
  for (int i = 0; i < 6; ++i)
    for (int j = i + 1; j < 6; ++j) CHECK(all[i] != all[j]);
}

TEST_CASE("prepare_data fills in the model geometry") {
  RunConfig c = tiny_image_config();
  c.model.num_classes = 99;
  const auto data = prepare_data(c);
  CHECK(c.model.num_classes == data.split.num_classes);
  CHECK(c.model.backbone.image_height == 16);
  CHECK(data.channel_mean.size() == 3);
  CHECK(data.train_labels.size() == data.split.train.size());

  RunConfig v;
  v.synthetic.mode = SyntheticMode::Vector;
  v.synthetic.dim = 12;
  const auto vd = prepare_data(v);
  CHECK(v.model.backbone.kind == BackboneKind::IdentityVector);
  CHECK(v.model.channels == 12);
  CHECK(vd.channel_mean.empty());

  RunConfig noisy = tiny_image_config();
  noisy.train_label_noise = 0.5;
  const auto nd = prepare_data(noisy);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < nd.train_labels.size(); ++i) changed += nd.train_labels[i] != nd.split.train_labels[i];
  CHECK(changed > 0);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  RunConfig c = tiny_image_config();
  c.train.base_lr = 0.0;
  const auto data = prepare_data(c);
  EmbedModel model(c.model, RunSeeds::from(c.seed).model);
  const auto before = model_checkpoint(model);
  const auto result = run_training(c, data, model);
  const auto after = model_checkpoint(model);
  REQUIRE(before.tensors.size() == after.tensors.size());
  for (std::size_t i = 0; i < before.tensors.size(); ++i) {
    CHECK(before.tensors[i].first == after.tensors[i].first);
    CHECK(before.tensors[i].second.to_vector() == after.tensors[i].second.to_vector());
  }
  CHECK(result.log.epochs.size() == 3);
}

TEST_CASE("evaluation protocol") {
  RunConfig c = tiny_image_config();
  const auto data = prepare_data(c);
  EmbedModel model(c.model, RunSeeds::from(c.seed).model);
  const auto result = run_training(c, data, model);

  // Same model, no corruption: identical to the report produced by training.
  const auto clean = evaluate_model(model, data, c.distance);
  CHECK(clean.to_json() == result.report.to_json());
  // Batch size does not change the embedding.
  CHECK(evaluate_model(model, data, c.distance, {}, 3).to_json() == clean.to_json());
  // Identity corruption.
  CHECK(evaluate_model(model, data, c.distance, CorruptionSpec::parse("interp:ratio=1.0", 0)).to_json() ==
        clean.to_json());
  CHECK(evaluate_model(model, data, c.distance, CorruptionSpec::parse("gaussian-blur:k=1", 0)).to_json() ==
        clean.to_json());

  // Restoring the final checkpoint into a fresh model reproduces the report.
  EmbedModel fresh(c.model, 1234);
  restore_model(fresh, result.final);
  CHECK(evaluate_model(fresh, data, c.distance).to_json() == clean.to_json());
}

TEST_CASE("same seed, same run") {
  RunConfig c = tiny_image_config();
  const auto data = prepare_data(c);
  EmbedModel a(c.model, RunSeeds::from(c.seed).model), b(c.model, RunSeeds::from(c.seed).model);
  const auto ra = run_training(c, data, a);
  const auto rb = run_training(c, data, b);
  CHECK(encode_checkpoint(ra.final) == encode_checkpoint(rb.final));
  CHECK(ra.report.to_json() == rb.report.to_json());
  CHECK(ra.log.to_csv(false) == rb.log.to_csv(false));
}
