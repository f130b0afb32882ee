#include "distembed/projection.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "distembed/error.hpp"
#include "distembed/seed.hpp"

namespace distembed {

ProjectionMethod parse_projection_method(const std::string& name) {
  if (name == "pca") return ProjectionMethod::Pca;
  if (name == "tsne") return ProjectionMethod::Tsne;
  throw Error(ErrorKind::InvalidConfig, "unknown projection method '" + name + "' (pca, tsne)");
}

std::vector<ProjectedDistribution> project_distributions(const std::vector<DiagGaussian>& distributions,
                                                         const std::vector<std::string>& labels,
                                                         std::size_t per_distribution, ProjectionMethod method,
                                                         std::uint64_t seed) {
  if (distributions.empty()) throw Error(ErrorKind::InvalidInput, "projection needs at least one distribution");
  if (labels.size() != distributions.size()) {
    throw Error(ErrorKind::InvalidInput, "projection needs one label per distribution");
  }
  if (per_distribution < 2) throw Error(ErrorKind::InvalidInput, "projection needs at least 2 samples per distribution");
  if (method == ProjectionMethod::Tsne) {
    throw Error(ErrorKind::Capability, "t-SNE is not available in this build; use the pca method");
  }
  const std::size_t d = distributions.front().dim();
  for (const auto& g : distributions) {
    if (g.dim() != d) throw Error(ErrorKind::IncompatibleShape, "projected distributions differ in dimension");
  }

  const std::size_t m = distributions.size();
  Eigen::MatrixXd pooled(m * per_distribution, d);
  for (std::size_t i = 0; i < m; ++i) {
    const auto zs = sample(distributions[i], per_distribution, derive_seed(seed, i));
    for (std::size_t r = 0; r < per_distribution; ++r)
      for (std::size_t j = 0; j < d; ++j) pooled(i * per_distribution + r, j) = zs[r][j];
  }

  // Top-2 principal directions; for d = 1 the second axis is zero.
  const Eigen::RowVectorXd centre = pooled.colwise().mean();
  const Eigen::MatrixXd centred = pooled.rowwise() - centre;
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(pooled.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Eigen::MatrixXd axes = Eigen::MatrixXd::Zero(d, 2);
  for (std::size_t a = 0; a < std::min<std::size_t>(2, d); ++a) {
    Eigen::VectorXd v = eig.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - a));
    // Fix the sign so the largest-magnitude component is positive.
    Eigen::Index big = 0;
    v.cwiseAbs().maxCoeff(&big);
    if (v(big) < 0) v = -v;
    axes.col(static_cast<Eigen::Index>(a)) = v;
  }
  const Eigen::MatrixXd flat = centred * axes;

  std::vector<ProjectedDistribution> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto& p = out[i];
    p.label = labels[i];
    p.points.resize(per_distribution);
    const auto block = flat.middleRows(static_cast<Eigen::Index>(i * per_distribution),
                                       static_cast<Eigen::Index>(per_distribution));
    for (std::size_t r = 0; r < per_distribution; ++r) p.points[r] = {block(r, 0), block(r, 1)};
    for (int a = 0; a < 2; ++a) {
      const double mu = block.col(a).mean();
      p.mean[a] = mu;
      p.variance[a] = (block.col(a).array() - mu).square().sum() / static_cast<double>(per_distribution - 1);
    }
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string ellipses_svg(const std::vector<ProjectedDistribution>& projected, const SvgOptions& options) {
  double lo[2] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  double hi[2] = {-lo[0], -lo[1]};
  auto extend = [&](double x, double y) {
    lo[0] = std::min(lo[0], x), hi[0] = std::max(hi[0], x);
    lo[1] = std::min(lo[1], y), hi[1] = std::max(hi[1], y);
  };
  for (const auto& p : projected) {
    const double rx = 2.0 * std::sqrt(p.variance[0]), ry = 2.0 * std::sqrt(p.variance[1]);
    extend(p.mean[0] - rx, p.mean[1] - ry);
    extend(p.mean[0] + rx, p.mean[1] + ry);
    if (options.include_points)
      for (const auto& q : p.points) extend(q[0], q[1]);
  }
  if (projected.empty()) lo[0] = lo[1] = -1, hi[0] = hi[1] = 1;
  // One scale for both axes so ellipse shapes are not distorted.
  const double margin = 40.0;
  const double span = std::max({hi[0] - lo[0], hi[1] - lo[1], 1e-12});
  const double scale = (options.size - 2 * margin) / span;
  auto sx = [&](double x) { return margin + (x - lo[0]) * scale; };
  auto sy = [&](double y) { return options.size - margin - (y - lo[1]) * scale; };

  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(options.size) + "\" height=\"" +
                    fmt(options.size) + "\" viewBox=\"0 0 " + fmt(options.size) + " " + fmt(options.size) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < projected.size(); ++i) {
    const auto& p = projected[i];
    char colour[32];
    std::snprintf(colour, sizeof colour, "hsl(%zu,70%%,45%%)", (i * 137) % 360);
    const double cx = sx(p.mean[0]), cy = sy(p.mean[1]);
    out += "<g class=\"distribution\">\n";
    if (options.include_points) {
      for (const auto& q : p.points) {
        out += "<circle cx=\"" + fmt(sx(q[0])) + "\" cy=\"" + fmt(sy(q[1])) + "\" r=\"0.8\" fill=\"" + colour +
               "\" fill-opacity=\"0.3\"/>\n";
      }
    }
    const double rx = 2.0 * std::sqrt(p.variance[0]) * scale, ry = 2.0 * std::sqrt(p.variance[1]) * scale;
    if (rx < 1e-9 && ry < 1e-9) {
      out += "<circle class=\"dot\" cx=\"" + fmt(cx) + "\" cy=\"" + fmt(cy) + "\" r=\"2\" fill=\"" + colour + "\"/>\n";
    } else {
      out += "<ellipse cx=\"" + fmt(cx) + "\" cy=\"" + fmt(cy) + "\" rx=\"" + fmt(rx) + "\" ry=\"" + fmt(ry) +
             "\" fill=\"" + colour + "\" fill-opacity=\"0.25\" stroke=\"" + colour + "\"/>\n";
    }
    out += "<text x=\"" + fmt(cx) + "\" y=\"" + fmt(cy) + "\" font-size=\"11\" text-anchor=\"middle\">" +
           escape_xml(p.label) + "</text>\n";
    out += "</g>\n";
  }
  out += "</svg>\n";
  return out;
}

void export_ellipses(const std::vector<ProjectedDistribution>& projected, const std::filesystem::path& path,
                     const SvgOptions& options) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  os << ellipses_svg(projected, options);
  if (!os) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::string projection_csv(const std::vector<ProjectedDistribution>& projected) {
  std::string out = "label,mean_x,mean_y,var_x,var_y\n";
  char buf[160];
  for (const auto& p : projected) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g\n", p.mean[0], p.mean[1], p.variance[0], p.variance[1]);
    out += p.label + buf;
  }
  return out;
}

}  // namespace distembed
