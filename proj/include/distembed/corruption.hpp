#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "distembed/tensor.hpp"

namespace distembed {

/// Reassigns exactly round(fraction*N) labels, picked without replacement, to a
/// uniformly drawn different class.
std::vector<std::size_t> corrupt_labels(std::span<const std::size_t> labels, double fraction, std::size_t num_classes,
                                        std::uint64_t seed);

struct Kernel2D {
  std::size_t size = 0;
  std::vector<double> weights;  // size x size, row-major

  double at(std::size_t r, std::size_t c) const { return weights[r * size + c]; }
};

enum class MotionOrientation { Horizontal, Vertical };

/// sigma = 0.3*((k-1)/2 - 1) + 0.8, normalised to sum 1. k must be odd.
std::vector<double> gaussian_kernel_1d(std::size_t k);
Kernel2D gaussian_kernel(std::size_t k);
/// Centre row (horizontal) or column (vertical) set to 1/k; centre index floor(k/2).
Kernel2D motion_kernel(std::size_t k, MotionOrientation orientation);
MotionOrientation motion_orientation(std::uint64_t seed);

/// Index into [0, n) for an out-of-range position, mirroring without
/// repeating the edge pixel (dcb|abcd|cba).
std::size_t reflect_index(long i, std::size_t n);

// Images are [H,W,C] tensors with values in [0,1]; every output is clamped to [0,1].

Tensor gaussian_blur(const Tensor& image, std::size_t k);
Tensor motion_blur(const Tensor& image, std::size_t k, std::uint64_t seed);
Tensor motion_blur(const Tensor& image, std::size_t k, MotionOrientation orientation);
/// Bilinear resize with align-corners-false sampling: source = (dst+0.5)*in/out - 0.5,
/// clamped to the valid range.
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);
/// Down to (round(ratio*H), round(ratio*W)) and back up.
Tensor interp_degrade(const Tensor& image, double ratio);
/// One rectangle of round(fraction*H*W) pixels filled with `fill` (per
/// channel; the image's own channel means when empty).
Tensor random_erase(const Tensor& image, double area_fraction, std::uint64_t seed,
                    std::span<const double> fill = {});

enum class CorruptionKind { None, LabelNoise, GaussianBlur, MotionBlur, Interp, Erase };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::None;
  double value = 0.0;  // fraction, kernel size, or ratio
  std::uint64_t seed = 0;

  /// "none", "label-noise:frac=0.1", "gaussian-blur:k=5", "motion-blur:k=10",
  /// "interp:ratio=0.5", "erase:frac=0.3".
  static CorruptionSpec parse(const std::string& text, std::uint64_t seed = 0);
  std::string to_string() const;
  void validate() const;
  bool is_image_corruption() const;
};

/// Applies an image corruption to every [H,W,C] image of a [N,H,W,C] batch.
/// Image i uses seed ^ i, so results never depend on processing order.
Tensor corrupt_images(const Tensor& batch, const CorruptionSpec& spec, std::span<const double> fill = {});

}  // namespace distembed
