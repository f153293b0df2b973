#pragma once

#include <span>
#include <vector>

#include "latentswap/denoiser.hpp"
#include "latentswap/tensor.hpp"

namespace lswap {

inline constexpr double kStatsEpsilon = 1e-5;

enum class ShapeMode { kHard, kSoft };

struct ShapeConfig {
  double threshold = 0.4;
  double tau = 0.1;
  ShapeMode mode = ShapeMode::kHard;

  void validate() const;
};

/// Per-channel weighted moments. The channel axis is the last axis of V;
/// the mask holds either one weight per spatial position or one per element.
struct MaskedStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // floored at kStatsEpsilon
};

MaskedStats masked_stats(const Tensor& values, const Tensor& mask);

/// Renormalizes `style` so its masked moments match those of `source`;
/// applied at every position.
Tensor masked_adain(const Tensor& source, const Tensor& style, const Tensor& mask);

struct ShapeField {
  Tensor field;  // h x w
  bool degenerate = false;
};

/// Column k of a cross map as an h x w shape: min-max normalized, then
/// thresholded (hard) or passed through logistic((v - threshold) / tau).
ShapeField extract_shape(const Tensor& cross_map, std::size_t token, std::size_t h, std::size_t w,
                         const ShapeConfig& config);

/// L1 distance between a fitted mask and a shape field.
double shape_energy(const Tensor& mask, const Tensor& shape);

/// Mean over layers of each layer's shape, resized to out_h x out_w.
Tensor aggregate_shape(const StepRecord& step, std::span<const LayerInfo> layers, std::size_t token,
                       const ShapeConfig& config, std::size_t out_h, std::size_t out_w);

/// The differentiable guidance energy: shape_energy(mask, aggregate of soft
/// shapes). `mask` is the H x W latent-resolution mask.
CrossMapEnergy make_shape_energy(const Tensor& mask, std::size_t token, const ShapeConfig& config);

}  // namespace lswap
