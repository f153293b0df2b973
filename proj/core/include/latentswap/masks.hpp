#pragma once

#include <optional>

#include "latentswap/denoiser.hpp"
#include "latentswap/tensor.hpp"

namespace lswap {

/// H x W field of exact zeros and ones.
class BinaryMask {
 public:
  explicit BinaryMask(Tensor field);

  const Tensor& field() const { return field_; }
  std::size_t height() const { return field_.dim(0); }
  std::size_t width() const { return field_.dim(1); }
  std::size_t foreground() const;
  /// All zeros or all ones.
  bool degenerate() const;

 private:
  Tensor field_;
};

struct FeatherParams {
  int dilate_extent = 5;
  double sigma = 2.0;
  int radius = 4;
};

/// H x W field in [0, 1]; provenance is set when produced by feather().
class SoftMask {
 public:
  explicit SoftMask(Tensor field, std::optional<FeatherParams> provenance = std::nullopt);
  /// The binary mask used as-is (no dilation or blur).
  static SoftMask hard(const BinaryMask& mask);

  const Tensor& field() const { return field_; }
  const std::optional<FeatherParams>& provenance() const { return provenance_; }
  std::size_t height() const { return field_.dim(0); }
  std::size_t width() const { return field_.dim(1); }

 private:
  Tensor field_;
  std::optional<FeatherParams> provenance_;
};

struct AnnealSchedule {
  int k = 30;  // 0 disables annealing
};

/// Disc of diameter `extent` (odd): offsets with dx^2 + dy^2 <= (extent/2)^2.
Tensor structuring_element(int extent);

BinaryMask dilate(const BinaryMask& mask, int extent);

/// S = blur(dilate(mask)), then forced to 1 on the original foreground.
SoftMask feather(const BinaryMask& mask, const FeatherParams& params);

/// Scales mask values by min(t_step / k, 1); zero pixels stay zero.
SoftMask anneal(const SoftMask& mask, int t_step, const AnnealSchedule& schedule);

enum class VariableKind { kLatent, kSelfMap, kCrossMap, kSelfOut };

/// Shape of a variable a mask is fitted to. For attention variables the
/// grid is the layer's query grid and `columns` the second axis extent.
struct VariableDescriptor {
  VariableKind kind = VariableKind::kLatent;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t columns = 0;

  static VariableDescriptor latent(std::size_t h, std::size_t w);
  static VariableDescriptor self_map(const LayerInfo& layer);
  static VariableDescriptor cross_map(const LayerInfo& layer, std::size_t tokens);
  static VariableDescriptor self_out(const LayerInfo& layer);
  static VariableDescriptor of(VariableClass cls, const LayerInfo& layer, std::size_t tokens);
};

/// Latent: h x w resize. Attention variables: resize to the query grid,
/// flatten, and repeat each query's weight across the row (N_q x columns).
Tensor fit_to(const SoftMask& mask, const VariableDescriptor& descriptor);

}  // namespace lswap
