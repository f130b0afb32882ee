#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "distembed/gaussian.hpp"

namespace distembed {

enum class ProjectionMethod { Pca, Tsne };

ProjectionMethod parse_projection_method(const std::string& name);

struct ProjectedDistribution {
  std::string label;
  std::array<double, 2> mean{};
  std::array<double, 2> variance{};  // per projected axis
  std::vector<std::array<double, 2>> points;
};

/// Samples `per_distribution` codes from each distribution, projects the
/// pooled cloud to 2-D and re-fits a mean and variance per distribution.
/// PCA uses the top two principal directions of the pooled, centred samples.
/// t-SNE is not built in and raises a capability error.
std::vector<ProjectedDistribution> project_distributions(const std::vector<DiagGaussian>& distributions,
                                                         const std::vector<std::string>& labels,
                                                         std::size_t per_distribution = 2000,
                                                         ProjectionMethod method = ProjectionMethod::Pca,
                                                         std::uint64_t seed = 0);

struct SvgOptions {
  double size = 640.0;
  bool include_points = false;
};

/// One labelled ellipse per distribution at 2 projected std per axis; a
/// degenerate (zero variance) distribution is drawn as a dot.
std::string ellipses_svg(const std::vector<ProjectedDistribution>& projected, const SvgOptions& options = {});
void export_ellipses(const std::vector<ProjectedDistribution>& projected, const std::filesystem::path& path,
                     const SvgOptions& options = {});

/// label,mean_x,mean_y,var_x,var_y
std::string projection_csv(const std::vector<ProjectedDistribution>& projected);

}  // namespace distembed
