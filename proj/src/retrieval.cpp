#include "distembed/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "distembed/error.hpp"
#include "distembed/gaussian.hpp"

namespace distembed {

DistanceMode parse_distance(const std::string& name) {
  if (name == "euclidean") return DistanceMode::Euclidean;
  if (name == "cosine") return DistanceMode::Cosine;
  if (name == "wasserstein") return DistanceMode::Wasserstein;
  throw Error(ErrorKind::InvalidConfig, "unknown distance '" + name + "' (euclidean, cosine, wasserstein)");
}

const char* to_string(DistanceMode mode) {
  switch (mode) {
    case DistanceMode::Euclidean: return "euclidean";
    case DistanceMode::Cosine: return "cosine";
    case DistanceMode::Wasserstein: return "wasserstein";
  }
  return "?";
}

void RetrievalSet::validate() const {
  const auto n = ids.size();
  if (cams.size() != n || features.size() != n * dim || (!variances.empty() && variances.size() != n * dim)) {
    throw Error(ErrorKind::InvalidInput, "retrieval set fields disagree in length");
  }
}

RetrievalSet RetrievalSet::from(const Tensor& features, const Tensor& variances, std::vector<long> ids,
                                std::vector<int> cams) {
  if (features.rank() != 2) throw Error(ErrorKind::IncompatibleShape, "retrieval features must be [N,d]");
  RetrievalSet set;
  set.dim = features.dim(1);
  set.features = features.to_vector();
  if (variances.numel() > 0) {
    if (variances.shape() != features.shape()) {
      throw Error(ErrorKind::IncompatibleShape, "variances " + shape_str(variances.shape()) +
                                                    " do not match features " + shape_str(features.shape()));
    }
    set.variances = variances.to_vector();
  }
  set.ids = std::move(ids);
  set.cams = std::move(cams);
  set.validate();
  return set;
}

DistanceMatrix pairwise_distance(const RetrievalSet& q, const RetrievalSet& g, DistanceMode mode) {
  q.validate();
  g.validate();
  if (q.dim != g.dim) {
    throw Error(ErrorKind::IncompatibleShape,
                "query dim " + std::to_string(q.dim) + " vs gallery dim " + std::to_string(g.dim));
  }
  if (mode == DistanceMode::Wasserstein && (!q.has_variances() || !g.has_variances())) {
    throw Error(ErrorKind::InvalidInput, "wasserstein distance needs distributions, not point features");
  }
  const std::size_t d = q.dim;
  DistanceMatrix out{q.size(), g.size(), std::vector<double>(q.size() * g.size())};
  std::vector<double> gnorm(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) {
    const double* b = g.features.data() + j * d;
    gnorm[j] = std::sqrt(std::inner_product(b, b + d, b, 0.0));
  }
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double* a = q.features.data() + i * d;
    const double anorm = std::sqrt(std::inner_product(a, a + d, a, 0.0));
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double* b = g.features.data() + j * d;
      double value = 0.0;
      switch (mode) {
        case DistanceMode::Euclidean: {
          for (std::size_t k = 0; k < d; ++k) value += (a[k] - b[k]) * (a[k] - b[k]);
          value = std::sqrt(value);
          break;
        }
        case DistanceMode::Cosine: {
          const double denom = anorm * gnorm[j];
          const double cos = denom > 0.0 ? std::inner_product(a, a + d, b, 0.0) / denom : 0.0;
          value = std::max(0.0, 1.0 - cos);
          break;
        }
        case DistanceMode::Wasserstein: {
          const double* va = q.variances.data() + i * d;
          const double* vb = g.variances.data() + j * d;
          for (std::size_t k = 0; k < d; ++k) {
            const double dm = a[k] - b[k];
            const double ds = std::sqrt(std::max(va[k], kVarianceFloor)) - std::sqrt(std::max(vb[k], kVarianceFloor));
            value += dm * dm + ds * ds;
          }
          break;
        }
      }
      out.values[i * g.size() + j] = value;
    }
  }
  return out;
}

EvalReport evaluate(const RetrievalSet& queries, const RetrievalSet& gallery, DistanceMode mode) {
  if (gallery.size() == 0) throw Error(ErrorKind::InvalidInput, "gallery is empty");
  if (queries.size() == 0) throw Error(ErrorKind::InvalidInput, "query set is empty");
  return evaluate(pairwise_distance(queries, gallery, mode), queries, gallery, mode);
}

EvalReport evaluate(const DistanceMatrix& dist, const RetrievalSet& queries, const RetrievalSet& gallery,
                    DistanceMode mode) {
  const std::size_t G = gallery.size();
  if (G == 0) throw Error(ErrorKind::InvalidInput, "gallery is empty");
  if (queries.size() == 0) throw Error(ErrorKind::InvalidInput, "query set is empty");
  if (dist.rows != queries.size() || dist.cols != G) {
    throw Error(ErrorKind::IncompatibleShape, "distance matrix does not match query/gallery sizes");
  }
  EvalReport report;
  report.mode = mode;
  std::vector<double> hits(G, 0.0);
  std::vector<std::size_t> order(G);
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const long qid = queries.ids[qi];
    const int qcam = queries.cams[qi];
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dist.at(qi, a) < dist.at(qi, b); });
    std::size_t rank = 0, positives = 0, first = 0;
    double precision_sum = 0.0;
    for (auto j : order) {
      if (gallery.ids[j] == qid && gallery.cams[j] == qcam) continue;
      ++rank;
      if (is_distractor(qid) || gallery.ids[j] != qid) continue;
      ++positives;
      if (first == 0) first = rank;
      precision_sum += static_cast<double>(positives) / static_cast<double>(rank);
    }
    if (positives == 0) {
      ++report.skipped;
      continue;
    }
    hits[first - 1] += 1.0;
    report.queries.push_back({qi, precision_sum / static_cast<double>(positives), first});
  }
  const double valid = static_cast<double>(report.queries.size());
  report.cmc.assign(G, 0.0);
  if (valid > 0) {
    double running = 0.0;
    for (std::size_t r = 0; r < G; ++r) {
      running += hits[r];
      report.cmc[r] = running / valid;
    }
    double ap_sum = 0.0;
    for (const auto& q : report.queries) ap_sum += q.ap;
    report.map = ap_sum / valid;
  }
  return report;
}

double EvalReport::rank(std::size_t r) const {
  if (cmc.empty()) return 0.0;
  return cmc[std::min(std::max<std::size_t>(r, 1), cmc.size()) - 1];
}

std::string EvalReport::to_json() const {
  nlohmann::json per_query = nlohmann::json::array();
  for (const auto& q : queries) per_query.push_back({{"query", q.query}, {"ap", q.ap}, {"first_match", q.first_match}});
  nlohmann::json j{{"distance", to_string(mode)}, {"rank1", rank(1)}, {"rank5", rank(5)},
                   {"rank10", rank(10)},          {"map", map},         {"skipped", skipped},
                   {"cmc", cmc},                  {"queries", per_query}};
  return j.dump(2);
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "rank1,rank5,rank10,map\n" << rank(1) << ',' << rank(5) << ',' << rank(10) << ',' << map << '\n';
  return os.str();
}

std::vector<std::pair<std::size_t, double>> cmc_curve(const EvalReport& report,
                                                      const std::vector<std::size_t>& ranks) {
  std::vector<std::pair<std::size_t, double>> out;
  for (auto r : ranks) {
    if (r == 0 || r > report.cmc.size()) {
      throw Error(ErrorKind::InvalidInput,
                  "rank " + std::to_string(r) + " outside 1.." + std::to_string(report.cmc.size()));
    }
    out.emplace_back(r, report.cmc[r - 1]);
  }
  return out;
}

}  // namespace distembed
