#pragma once

#include <array>
#include <span>
#include <vector>

#include "latentswap/denoiser.hpp"
#include "latentswap/masks.hpp"
#include "latentswap/scheduler.hpp"

namespace lswap {

/// Number of sampling steps, counted from the start (high noise), during
/// which each variable class is blended with the source run.
struct SwapSchedule {
  int steps_z = 30;
  int steps_cross_map = 20;
  int steps_self_map = 25;
  int steps_self_out = 10;

  void validate(int total_steps) const;
  static SwapSchedule full(int total_steps) { return {total_steps, total_steps, total_steps, total_steps}; }
};

/// Blend targets tracked by the instrumentation: the three attention
/// variables plus the latent.
enum class SwapTarget { kLatent = 0, kCrossMap = 1, kSelfMap = 2, kSelfOut = 3 };
inline constexpr std::size_t kSwapTargets = 4;
std::string_view swap_target_name(SwapTarget target);

struct RecordOptions {
  double cfg_scale = 0.0;
  int null_iters = 0;
  double null_lr = 1.0;
  double tolerance = 1e-3;  // max-abs reconstruction error
};

/// Everything the swap pass needs from the source image.
struct SourceTrace {
  ConditioningSet cond;
  Tensor z_T;
  std::vector<Tensor> latents;          // z before sampling step i at [i-1], final latent at [T]
  UNetTrace trace;                      // reconstruction pass, conditional branch
  std::vector<Tensor> null_embeddings;  // per step, empty without null-text refinement
  double cfg_scale = 0.0;
  double reconstruction_error = 0.0;

  const Tensor& reconstruction() const { return latents.back(); }
  int steps() const { return static_cast<int>(trace.steps.size()); }
};

struct SwapPlan {
  SoftMask mask;
  ConditioningSet target;
  std::size_t concept_token = 0;
  SwapSchedule schedule;
  SamplerConfig sampler;
  AnnealSchedule anneal;
  bool adain = true;
  /// When false, attention maps are blended with the mask binarized at 0.5.
  bool soft_attention_mask = true;
};

SourceTrace record_source(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z0,
                          const ConditioningSet& cond, const RecordOptions& options = {});

/// V_src * (1 - m) + V_tgt * m.
Tensor blend_variable(const Tensor& source, const Tensor& target, const Tensor& fitted_mask);

/// masked_adain(V_src, V_concept, m) * m + V_src * (1 - m).
Tensor blend_with_adain(const Tensor& source, const Tensor& style, const Tensor& fitted_mask);
/// Class-checked form: attention maps are rejected.
Tensor blend_with_adain(SwapTarget target, const Tensor& source, const Tensor& style, const Tensor& fitted_mask);

struct SwapResult {
  Tensor z0;
  /// Sampling steps (1-based) at which each target was blended.
  std::array<std::vector<int>, kSwapTargets> blended_steps;
};

SwapResult swap_generate(const Denoiser& denoiser, const NoiseSchedule& schedule, const SourceTrace& trace,
                         const SwapPlan& plan);

struct MultiSwapResult {
  Tensor z0;
  std::vector<SourceTrace> traces;  // one per stage
  bool masks_overlap = false;
};

/// Sequential composition: each plan re-records the previous stage's output.
MultiSwapResult multi_swap(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z0,
                           const ConditioningSet& cond, std::span<const SwapPlan> plans,
                           const RecordOptions& options = {});

}  // namespace lswap
