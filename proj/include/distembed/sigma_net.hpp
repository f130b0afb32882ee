#pragma once

#include <cstdint>

#include "distembed/gradcheck.hpp"
#include "distembed/tensor.hpp"

namespace distembed {

enum class VarianceHeadKind { Sigma, Bilinear, Mlp, None };

VarianceHeadKind parse_variance_head(const std::string& name);
const char* to_string(VarianceHeadKind kind);

struct SigmaNetConfig {
  std::size_t channels = 64;
  std::size_t reduction = 4;
  Window2D fusion_pool{3, 3, 1, 1, 1, 1};
  double dropout = 0.25;
  double output_floor = 1e-6;
  // Constant posterior variance reported by the None head.
  double fixed_variance = 1e-6;

  std::size_t reduced() const { return channels / reduction; }
  void validate() const;
};

/// Parameters of every variance head. Each head reads only its own subset;
/// see parameters().
struct SigmaNetParams {
  // First-order shortcut: 1x1 conv C -> C, averaged to f1.
  Tensor shortcut_w, shortcut_b;
  // Reduced branches F1, F2: 1x1 conv C -> C/4.
  Tensor branch1_w, branch1_b;
  Tensor branch2_w, branch2_b;
  // Fusion 1x1 conv (4 * C/4 -> C/4) with affine-norm.
  Tensor fusion_w, fusion_b, fusion_gamma, fusion_beta;
  // Final linear C/4 -> C producing f2.
  Tensor linear_w, linear_b;
  // MLP head: C -> C/4 -> C.
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  static SigmaNetParams initialise(const SigmaNetConfig& config, std::uint64_t seed);
  static SigmaNetParams zeros(const SigmaNetConfig& config);

  NamedTensors parameters(VarianceHeadKind kind) const;
};

/// Cross products of locally min/max pooled maps, concatenated along
/// channels: [min1*min2, min1*max2, max1*min2, max1*max2].
Tensor fusion_products(const Tensor& f1, const Tensor& f2, const Window2D& pool_window);

/// Fusion block: fusion_products -> dropout -> 1x1 conv -> affine-norm -> ReLU.
/// Output has the spatial size and channel count of each input.
Tensor uncertainty_fusion(const Tensor& f1, const Tensor& f2, const SigmaNetParams& params,
                          const SigmaNetConfig& config, Mode mode, std::uint64_t seed);

/// sigma = softplus(GAP(shortcut(F)) + linear(GAP(fusion(branch1(F), branch2(F))))) + floor.
/// F is [H,W,C] or [N,H,W,C]; the result is [C] or [N,C].
Tensor sigma_forward(const Tensor& features, const SigmaNetParams& params, const SigmaNetConfig& config, Mode mode,
                     std::uint64_t seed);

/// Same as sigma_forward with the fusion block replaced by F1 * F2.
Tensor bm_variance_head(const Tensor& features, const SigmaNetParams& params, const SigmaNetConfig& config);

/// softplus(linear(ReLU(linear(GAP(F))))) + floor.
Tensor mlp_variance_head(const Tensor& features, const SigmaNetParams& params, const SigmaNetConfig& config);

Tensor variance_head_forward(VarianceHeadKind kind, const Tensor& features, const SigmaNetParams& params,
                             const SigmaNetConfig& config, Mode mode, std::uint64_t seed);

}  // namespace distembed
