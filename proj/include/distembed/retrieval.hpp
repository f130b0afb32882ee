#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "distembed/tensor.hpp"

namespace distembed {

enum class DistanceMode { Euclidean, Cosine, Wasserstein };

DistanceMode parse_distance(const std::string& name);
const char* to_string(DistanceMode mode);

/// Raw identity ids -1 and 0 follow the Market convention: rankable, never a match.
inline bool is_distractor(long id) { return id <= 0; }

struct RetrievalSet {
  std::size_t dim = 0;
  std::vector<double> features;   // N x dim, row-major (posterior means)
  std::vector<double> variances;  // N x dim, empty unless distributions are kept
  std::vector<long> ids;
  std::vector<int> cams;

  std::size_t size() const { return ids.size(); }
  bool has_variances() const { return !variances.empty(); }
  void validate() const;

  /// features [N,d], variances [N,d] or an empty tensor.
  static RetrievalSet from(const Tensor& features, const Tensor& variances, std::vector<long> ids,
                           std::vector<int> cams);
};

struct DistanceMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// euclidean: L2 norm of the difference; cosine: 1 - cosine similarity (a zero
/// vector has similarity 0 with everything); wasserstein: closed-form W2^2
/// between the diagonal Gaussians. Entries are never negative.
DistanceMatrix pairwise_distance(const RetrievalSet& queries, const RetrievalSet& gallery, DistanceMode mode);

struct QueryResult {
  std::size_t query = 0;
  double ap = 0.0;
  std::size_t first_match = 0;  // 1-based rank after exclusion
};

struct EvalReport {
  DistanceMode mode = DistanceMode::Euclidean;
  std::vector<double> cmc;  // cmc[r-1] = rank-r match rate, r = 1..gallery size
  double map = 0.0;
  std::vector<QueryResult> queries;  // valid queries only
  std::size_t skipped = 0;           // queries without a positive after exclusion

  double rank(std::size_t r) const;
  std::string to_json() const;
  /// "rank1,rank5,rank10,map" header plus one line. Ranks past the gallery
  /// size take the last CMC value.
  std::string to_csv() const;
};

/// Per query: gallery sorted by ascending distance (ties keep gallery order),
/// same-id-same-camera items dropped, CMC and AP from the remaining list.
EvalReport evaluate(const RetrievalSet& queries, const RetrievalSet& gallery, DistanceMode mode);
EvalReport evaluate(const DistanceMatrix& distances, const RetrievalSet& queries, const RetrievalSet& gallery,
                    DistanceMode mode);

std::vector<std::pair<std::size_t, double>> cmc_curve(const EvalReport& report, const std::vector<std::size_t>& ranks);

}  // namespace distembed
