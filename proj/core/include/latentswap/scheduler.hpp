#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "latentswap/adapt.hpp"
#include "latentswap/denoiser.hpp"
#include "latentswap/tensor.hpp"

namespace lswap {

/// Linear-beta DDPM schedule. alpha_bar[0] == 1; alpha_bar[t] for t = 1..T.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(std::vector<double> alpha_bar);

  int steps() const { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const;
  /// Guidance multiplier: sqrt(1 - alpha_bar_t).
  double sigma(int t) const;
  /// d z_{t-1} / d eps of the DDIM update (negative for every t >= 1).
  double eps_coefficient(int t) const;
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

 private:
  std::vector<double> alpha_bar_{1.0};
};

NoiseSchedule make_schedule(int steps, double beta_start = 1e-4, double beta_end = 0.02);

/// Deterministic (eta = 0) DDIM update z_t -> z_{t-1}.
Tensor ddim_step(const NoiseSchedule& schedule, const Tensor& z_t, const Tensor& eps, int t);
/// Reverse update z_{t-1} -> z_t using eps predicted at z_{t-1}.
Tensor ddim_inverse_step(const NoiseSchedule& schedule, const Tensor& z_prev, const Tensor& eps, int t);

struct SamplerConfig {
  double cfg_scale = 0.0;     // s
  double shape_weight = 0.0;  // v
  std::size_t guided_token = 0;
  ShapeConfig shape;

  void validate() const;
};

struct InversionResult {
  Tensor z_T;
  std::vector<Tensor> latents;  // z_0 .. z_T
  UNetTrace trace;              // empty unless recorded
};

InversionResult ddim_invert(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z0,
                            const ConditioningSet& cond, bool record = false);

/// (1 + s) eps(cond) - s eps(null). `null_tokens` overrides the set's null
/// embedding; `overrides` apply to the conditional branch only.
Tensor cfg_eps(const Denoiser& denoiser, const Tensor& z, int t, const ConditioningSet& cond, double cfg_scale,
               const Tensor* null_tokens = nullptr, std::span<const VariableOverride> overrides = {},
               StepRecord* record = nullptr);

/// cfg_eps plus v * sigma_t * grad_z ||mask - Shape(A)(k)||_1, with the
/// gradient taken on the plain conditional branch. `mask` is H x W.
Tensor guided_eps(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z, int t,
                  const ConditioningSet& cond, const SamplerConfig& config, const Tensor* mask,
                  const Tensor* null_tokens = nullptr, std::span<const VariableOverride> overrides = {},
                  StepRecord* record = nullptr);

/// Just the shape-guidance gradient grad_z g (without v or sigma).
EnergyGradient shape_guidance_gradient(const Denoiser& denoiser, const Tensor& z, int t, const ConditioningSet& cond,
                                       const SamplerConfig& config, const Tensor& mask);

struct NullTextResult {
  std::vector<Tensor> null_embeddings;  // index t - 1
  std::vector<double> baseline_objective;
  std::vector<double> final_objective;
  std::vector<double> first_gradient_norm;
  Tensor z0;  // end of the optimized guided trajectory
};

/// Per-step gradient descent on the null embedding so the guided DDIM step
/// from the running latent lands on trajectory[t-1]. Steps that do not
/// decrease the objective are reverted and the step size is halved.
NullTextResult null_text_optimize(const Denoiser& denoiser, const NoiseSchedule& schedule,
                                  std::span<const Tensor> trajectory, const ConditioningSet& cond, double cfg_scale,
                                  int iters, double step_size);

/// Swap-engine hooks. `step` counts from 1 at the start of sampling; t is
/// the schedule index of the step (T .. 1).
struct SampleHooks {
  std::function<std::vector<VariableOverride>(int step, int t)> overrides;
  std::function<void(int step, int t, Tensor& eps)> after_predict;
  std::function<void(int step, int t, Tensor& z)> after_step;
};

struct SampleOptions {
  SamplerConfig config;
  std::vector<Tensor> null_embeddings;  // per step (index t - 1), optional
  std::optional<Tensor> guidance_mask;  // H x W, required when shape_weight > 0
  bool record = false;
};

struct SampleResult {
  Tensor z0;
  UNetTrace trace;
};

SampleResult sample(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z_T,
                    const ConditioningSet& cond, const SampleOptions& options, const SampleHooks& hooks = {});

}  // namespace lswap
