// Acceptance checks: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>

#include "distembed/dist_loss.hpp"
#include "distembed/gaussian.hpp"
#include "distembed/gradcheck_suites.hpp"
#include "distembed/pipeline.hpp"
#include "distembed/sigma_net.hpp"
#include "retrieval_oracle.hpp"

using namespace distembed;
using clk = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void report(int id, const char* title, const std::function<Outcome()>& check) {
  const auto t = clk::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("threw: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("[%s] %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str(), seconds_since(t));
  std::fflush(stdout);
}

DiagGaussian random_gaussian(std::mt19937_64& rng, std::size_t d) {
  std::uniform_real_distribution<double> mean(-2.0, 2.0), var(0.2, 3.0);
  std::vector<double> m(d), v(d);
  for (std::size_t i = 0; i < d; ++i) m[i] = mean(rng), v[i] = var(rng);
  return {m, v};
}

PriorBank random_bank(std::size_t k, std::size_t d, std::mt19937_64& rng) {
  std::vector<DiagGaussian> priors;
  for (std::size_t i = 0; i < k; ++i) priors.push_back(random_gaussian(rng, d));
  return PriorBank::from_priors(priors);
}

RunConfig desk_config() { return load_config(DISTEMBED_DESK_INI); }

struct DeskRun {
  RunConfig config;
  PreparedData data;
  RunResult result;
  std::unique_ptr<EmbedModel> model;
  double seconds = 0.0;
};

DeskRun desk_run(RunConfig config) {
  const auto t = clk::now();
  DeskRun run;
  run.data = prepare_data(config);
  run.config = config;
  run.model = std::make_unique<EmbedModel>(config.model, RunSeeds::from(config.seed).model);
  run.result = run_training(config, run.data, *run.model);
  run.seconds = seconds_since(t);
  return run;
}

}  // namespace

int main() {
  report(1, "closed-form KL vs Monte Carlo", [] {
    const auto t = clk::now();
    std::mt19937_64 rng(101);
    int within = 0;
    for (int i = 0; i < 100; ++i) {
      const std::size_t d = 1 + rng() % 16;
      const auto q = random_gaussian(rng, d), p = random_gaussian(rng, d);
      const auto mc = mc_kl_estimate(q, p, 100000, rng());
      if (std::abs(kl_divergence(q, p) - mc.estimate) <= 3.0 * mc.standard_error) ++within;
    }
    const double secs = seconds_since(t);
    return Outcome{within >= 97 && secs < 30.0, fmt("%d/100 pairs within 3 SE, need >= 97, %.1f s < 30 s", within, secs)};
  });

  report(2, "delta-limit logits match GM logits", [] {
    const auto t = clk::now();
    std::mt19937_64 rng(102);
    std::normal_distribution<double> n01;
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const auto bank = random_bank(2 + rng() % 9, 1 + rng() % 16, rng);
      std::vector<double> z(bank.dim());
      for (auto& x : z) x = n01(rng);
      const auto a = log_softmax(Tensor::vector(class_logits(DiagGaussian::isotropic(z, 1e-6), bank))).to_vector();
      const auto b = log_softmax(Tensor::vector(gm_class_logits(z, bank))).to_vector();
      for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
    }
    const double secs = seconds_since(t);
    return Outcome{worst <= 1e-3 && secs < 10.0, fmt("max |diff| %.2e <= 1e-3 over 100 instances, %.2f s", worst, secs)};
  });

  report(3, "gradient suite at 1e-4", [] {
    const auto t = clk::now();
    const auto reports = run_gradcheck_suites();
    double worst = 0.0;
    std::string worst_name;
    bool ok = true;
    for (const auto& r : reports) {
      ok = ok && r.passed;
      if (r.result.max_relative_error >= worst) worst = r.result.max_relative_error, worst_name = r.component;
    }
    const double secs = seconds_since(t);
    return Outcome{ok && secs < 120.0, fmt("%zu components, worst %.2e (%s), %.1f s", reports.size(), worst,
                                           worst_name.c_str(), secs)};
  });

  report(4, "retrieval metrics vs brute force", [] {
    std::mt19937_64 rng(104);
    std::normal_distribution<double> n01;
    std::uniform_int_distribution<int> small(0, 2), cam(1, 3);
    auto random_set = [&](std::size_t n, bool ties) {
      RetrievalSet s;
      s.dim = 2;
      for (std::size_t i = 0; i < n; ++i) {
        s.ids.push_back(std::uniform_int_distribution<long>(-1, 4)(rng));
        s.cams.push_back(cam(rng));
        for (int k = 0; k < 2; ++k) s.features.push_back(ties ? small(rng) : n01(rng));
      }
      return s;
    };
    int exact = 0;
    for (int i = 0; i < 200; ++i) {
      const auto q = random_set(1 + rng() % 10, i % 2 == 0);
      const auto g = random_set(1 + rng() % 40, i % 2 == 0);
      const auto dist = pairwise_distance(q, g, DistanceMode::Euclidean);
      const auto fast = evaluate(dist, q, g, DistanceMode::Euclidean);
      const auto slow = oracle::naive_evaluate(dist, q, g);
      if (fast.cmc == slow.cmc && fast.map == slow.map && fast.skipped == slow.skipped) ++exact;
    }
    // One query of id 7; ranked gallery + - + gives AP = (1 + 2/3) / 2.
    RetrievalSet q{1, {0.0}, {}, {7}, {1}};
    RetrievalSet g{1, {1.0, 2.0, 3.0}, {}, {7, 3, 7}, {2, 2, 2}};
    const double ap = evaluate(q, g, DistanceMode::Euclidean).map;
    const bool hand = std::round(ap * 1e4) / 1e4 == 0.8333;
    return Outcome{exact == 200 && hand, fmt("%d/200 exact, hand AP %.4f", exact, ap)};
  });

  // Criteria 5, 6, 8 and 10 share this run.
  DeskRun desk;
  report(5, "desk run retrieval", [&] {
    desk = desk_run(desk_config());
    const auto& r = desk.result.report;
    const bool ok = r.rank(1) >= 0.95 && r.map >= 0.90 && desk.seconds < 600.0;
    return Outcome{ok, fmt("rank1 %.4f >= 0.95, mAP %.4f >= 0.90, %zu queries, %.0f s < 600 s", r.rank(1), r.map,
                           r.queries.size(), desk.seconds)};
  });

  report(6, "corruption trend on the desk model", [&] {
    if (!desk.model) return Outcome{false, "desk run unavailable"};
    std::string detail = "blur";
    bool ok = true;
    double previous = 2.0;
    for (const char* s : {"gaussian-blur:k=1", "gaussian-blur:k=3", "gaussian-blur:k=5", "gaussian-blur:k=7"}) {
      const auto spec = CorruptionSpec::parse(s, RunSeeds::from(desk.config.seed).corruption);
      const double m = evaluate_model(*desk.model, desk.data, desk.config.distance, spec).map;
      ok = ok && m <= previous;
      previous = m;
      detail += fmt(" %.3f", m);
    }
    detail += "; interp";
    previous = 2.0;
    for (const char* s : {"interp:ratio=1.0", "interp:ratio=0.75", "interp:ratio=0.5", "interp:ratio=0.25"}) {
      const auto spec = CorruptionSpec::parse(s, RunSeeds::from(desk.config.seed).corruption);
      const double m = evaluate_model(*desk.model, desk.data, desk.config.distance, spec).map;
      ok = ok && m <= previous;
      previous = m;
      detail += fmt(" %.3f", m);
    }
    return Outcome{ok, "mAP " + detail + " (non-increasing)"};
  });

  report(7, "label-noise ordering over 3 seeds", [] {
    double full = 0.0, base = 0.0;
    std::string detail;
    for (std::uint64_t seed : {0, 1, 2}) {
      RunConfig c = desk_config();
      c.seed = seed;
      c.train_label_noise = 0.1;
      RunConfig ce = c;
      ce.model.loss = LossKind::CrossEntropy;
      ce.model.head = VarianceHeadKind::None;
      ce.train.stage2_targets = TargetKind::Smoothed;
      const double a = desk_run(c).result.report.map;
      const double b = desk_run(ce).result.report.map;
      full += a / 3.0;
      base += b / 3.0;
      detail += fmt(" s%llu %.4f/%.4f", static_cast<unsigned long long>(seed), a, b);
    }
    return Outcome{full >= base, fmt("mean mAP distribution+sigma %.4f >= ce %.4f;", full, base) + detail};
  });

  report(8, "soft-label properties", [&] {
    std::mt19937_64 rng(108);
    std::vector<PriorBank> banks;
    if (desk.model) banks.push_back(desk.model->bank());
    for (int i = 0; i < 20; ++i) banks.push_back(random_bank(2 + rng() % 9, 1 + rng() % 8, rng));
    double sum_err = 0.0, onehot_err = 0.0;
    bool diag_max = true, monotone = true;
    for (const auto& bank : banks) {
      const std::size_t k = bank.num_classes();
      const auto m = soft_labels(bank, 0.17);
      for (std::size_t r = 0; r < k; ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          total += m.data()[r * k + j];
          if (j != r && m.data()[r * k + j] >= m.data()[r * k + r]) diag_max = false;
        }
        sum_err = std::max(sum_err, std::abs(total - 1.0));
      }
      std::vector<double> previous(k, -1.0);
      for (double tau : {0.05, 0.1, 0.17, 0.3, 0.5}) {
        const auto h = row_entropy(soft_labels(bank, tau));
        for (std::size_t r = 0; r < k; ++r) monotone = monotone && h[r] >= previous[r];
        previous = h;
      }
      const auto sharp = soft_labels(bank, 1e-4);
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t j = 0; j < k; ++j)
          onehot_err = std::max(onehot_err, std::abs(sharp.data()[r * k + j] - (r == j ? 1.0 : 0.0)));
    }
    const bool ok = sum_err <= 1e-9 && diag_max && monotone && onehot_err <= 1e-9;
    return Outcome{ok, fmt("%zu banks: row-sum err %.1e, diagonal max %s, entropy monotone %s, tau 1e-4 one-hot err %.1e",
                           banks.size(), sum_err, diag_max ? "yes" : "no", monotone ? "yes" : "no", onehot_err)};
  });

  report(9, "variance-head contracts", [] {
    const SigmaNetConfig cfg{.channels = 8};
    std::mt19937_64 rng(109);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    auto random_map = [&](Shape s) {
      std::vector<double> v(shape_numel(s));
      for (auto& x : v) x = u(rng);
      return Tensor(std::move(s), std::move(v));
    };
    std::size_t negative = 0, draws = 0;
    for (int i = 0; i < 1000; ++i) {
      const auto params = SigmaNetParams::initialise(cfg, rng());
      const auto f = random_map({1 + rng() % 4, 1 + rng() % 4, 8});
      for (double v : sigma_forward(f, params, cfg, Mode::Train, rng()).data()) negative += !(v > 0.0);
      ++draws;
    }
    const auto params = SigmaNetParams::initialise(cfg, 7);
    std::size_t preserved = 0;
    for (std::size_t h = 1; h <= 8; ++h)
      for (std::size_t w = 1; w <= 8; ++w) {
        const auto out = uncertainty_fusion(random_map({h, w, 2}), random_map({h, w, 2}), params, cfg, Mode::Train, 1);
        preserved += out.shape() == Shape{h, w, 2};
      }
    const auto f = random_map({3, 5, 4, 8});
    const bool deterministic =
        sigma_forward(f, params, cfg, Mode::Eval, 1).to_vector() == sigma_forward(f, params, cfg, Mode::Eval, 2).to_vector();
    const bool ok = negative == 0 && preserved == 64 && deterministic;
    return Outcome{ok, fmt("%zu draws, %zu non-positive; %zu/64 sizes preserved; eval bit-identical %s", draws, negative,
                           preserved, deterministic ? "yes" : "no")};
  });

  report(10, "bit-identical rerun of the desk run", [&] {
    if (!desk.model) return Outcome{false, "desk run unavailable"};
    const auto again = desk_run(desk_config());
    const bool stage1 = encode_checkpoint(desk.result.stage1) == encode_checkpoint(again.result.stage1);
    const bool final = encode_checkpoint(desk.result.final) == encode_checkpoint(again.result.final);
    const bool report = desk.result.report.to_json() == again.result.report.to_json() &&
                        desk.result.report.to_csv() == again.result.report.to_csv();
    const bool log = desk.result.log.to_csv(false) == again.result.log.to_csv(false);
    return Outcome{stage1 && final && report && log,
                   fmt("checkpoints %s, report %s, log %s", stage1 && final ? "identical" : "DIFFER",
                       report ? "identical" : "DIFFER", log ? "identical" : "DIFFER")};
  });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
