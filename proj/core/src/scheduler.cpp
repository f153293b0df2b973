#include "latentswap/scheduler.hpp"

#include <cmath>
#include <string>

#include "latentswap/error.hpp"

namespace lswap {

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar) : alpha_bar_(std::move(alpha_bar)) {
  if (alpha_bar_.empty() || alpha_bar_[0] != 1.0) throw ArgumentError("schedule must start at alpha_bar_0 = 1");
  for (std::size_t t = 1; t < alpha_bar_.size(); ++t) {
    if (!(alpha_bar_[t] > 0.0 && alpha_bar_[t] < alpha_bar_[t - 1])) {
      throw ArgumentError("alpha_bar must be strictly decreasing in (0, 1]");
    }
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps()) {
    throw ArgumentError("timestep " + std::to_string(t) + " outside schedule of " + std::to_string(steps()) + " steps");
  }
  return alpha_bar_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::sigma(int t) const { return std::sqrt(1.0 - alpha_bar(t)); }

double NoiseSchedule::eps_coefficient(int t) const {
  if (t < 1) throw ArgumentError("eps_coefficient needs t >= 1");
  const double a_t = alpha_bar(t), a_prev = alpha_bar(t - 1);
  return std::sqrt(1.0 - a_prev) - std::sqrt(a_prev * (1.0 - a_t) / a_t);
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ArgumentError("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ArgumentError("need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> ab(static_cast<std::size_t>(steps) + 1);
  ab[0] = 1.0;
  for (int i = 1; i <= steps; ++i) {
    const double beta =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i - 1) / (steps - 1);
    ab[static_cast<std::size_t>(i)] = ab[static_cast<std::size_t>(i - 1)] * (1.0 - beta);
  }
  return NoiseSchedule(std::move(ab));
}

Tensor ddim_step(const NoiseSchedule& schedule, const Tensor& z_t, const Tensor& eps, int t) {
  if (t < 1 || t > schedule.steps()) throw ArgumentError("ddim_step: t out of range");
  if (z_t.shape() != eps.shape()) throw ShapeError("ddim_step: latent/eps shape mismatch");
  const double a_t = schedule.alpha_bar(t), a_prev = schedule.alpha_bar(t - 1);
  const double sa_t = std::sqrt(a_t), sb_t = std::sqrt(1.0 - a_t);
  const double sa_prev = std::sqrt(a_prev), sb_prev = std::sqrt(1.0 - a_prev);
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < z_t.size(); ++i) {
    const double x0 = (z_t[i] - sb_t * eps[i]) / sa_t;
    out[i] = static_cast<float>(sa_prev * x0 + sb_prev * eps[i]);
  }
  require_finite(out, "ddim_step");
  return out;
}

Tensor ddim_inverse_step(const NoiseSchedule& schedule, const Tensor& z_prev, const Tensor& eps, int t) {
  if (t < 1 || t > schedule.steps()) throw ArgumentError("ddim_inverse_step: t out of range");
  if (z_prev.shape() != eps.shape()) throw ShapeError("ddim_inverse_step: latent/eps shape mismatch");
  const double a_t = schedule.alpha_bar(t), a_prev = schedule.alpha_bar(t - 1);
  const double sa_t = std::sqrt(a_t), sb_t = std::sqrt(1.0 - a_t);
  const double sa_prev = std::sqrt(a_prev), sb_prev = std::sqrt(1.0 - a_prev);
  Tensor out(z_prev.shape());
  for (std::size_t i = 0; i < z_prev.size(); ++i) {
    const double x0 = (z_prev[i] - sb_prev * eps[i]) / sa_prev;
    out[i] = static_cast<float>(sa_t * x0 + sb_t * eps[i]);
  }
  require_finite(out, "ddim_inverse_step");
  return out;
}

void SamplerConfig::validate() const {
  if (!(cfg_scale >= 0.0)) throw ArgumentError("cfg scale must be nonnegative");
  if (!(shape_weight >= 0.0)) throw ArgumentError("shape guidance weight must be nonnegative");
  shape.validate();
}

InversionResult ddim_invert(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z0,
                            const ConditioningSet& cond, bool record) {
  denoiser.check_latent(z0);
  InversionResult out;
  out.latents.push_back(z0);
  Tensor z = z0;
  for (int t = 1; t <= schedule.steps(); ++t) {
    auto pred = denoiser.predict_noise(z, t, cond.tokens, record);
    if (record) {
      out.trace.latents.push_back(z);
      out.trace.steps.push_back(std::move(*pred.record));
    }
    z = ddim_inverse_step(schedule, z, pred.eps, t);
    out.latents.push_back(z);
  }
  if (record) out.trace.latents.push_back(z);
  out.z_T = z;
  return out;
}

Tensor cfg_eps(const Denoiser& denoiser, const Tensor& z, int t, const ConditioningSet& cond, double cfg_scale,
               const Tensor* null_tokens, std::span<const VariableOverride> overrides, StepRecord* record) {
  if (!(cfg_scale >= 0.0)) throw ArgumentError("cfg scale must be nonnegative");
  auto pred = denoiser.predict_noise_with_overrides(z, t, cond.tokens, overrides, record != nullptr);
  if (record) *record = std::move(*pred.record);
  if (cfg_scale == 0.0) return std::move(pred.eps);
  const Tensor uncond = denoiser.predict_noise(z, t, null_tokens ? *null_tokens : cond.null_tokens()).eps;
  Tensor out(z.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>((1.0 + cfg_scale) * pred.eps[i] - cfg_scale * uncond[i]);
  }
  return out;
}

EnergyGradient shape_guidance_gradient(const Denoiser& denoiser, const Tensor& z, int t, const ConditioningSet& cond,
                                       const SamplerConfig& config, const Tensor& mask) {
  if (mask.rank() != 2 || mask.dim(0) != z.dim(0) || mask.dim(1) != z.dim(1)) {
    throw ShapeError("guidance mask must be fitted to the latent grid");
  }
  return denoiser.energy_gradient(z, t, cond.tokens, make_shape_energy(mask, config.guided_token, config.shape));
}

Tensor guided_eps(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z, int t,
                  const ConditioningSet& cond, const SamplerConfig& config, const Tensor* mask,
                  const Tensor* null_tokens, std::span<const VariableOverride> overrides, StepRecord* record) {
  config.validate();
  if (config.guided_token >= cond.token_count()) {
    throw ArgumentError("guided token " + std::to_string(config.guided_token) + " outside conditioning of " +
                        std::to_string(cond.token_count()) + " tokens");
  }
  Tensor eps = cfg_eps(denoiser, z, t, cond, config.cfg_scale, null_tokens, overrides, record);
  if (config.shape_weight == 0.0) return eps;
  if (!mask) throw ArgumentError("shape guidance needs a mask");
  const auto g = shape_guidance_gradient(denoiser, z, t, cond, config, *mask);
  axpy(config.shape_weight * schedule.sigma(t), g.grad, eps);
  require_finite(eps, "guided eps");
  return eps;
}

namespace {

double step_objective(const Tensor& z_next, const Tensor& target) {
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(z_next[i]) - target[i];
    acc += d * d;
  }
  return acc;
}

Tensor combine(const Tensor& cond_eps, const Tensor& uncond_eps, double s) {
  Tensor out(cond_eps.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>((1.0 + s) * cond_eps[i] - s * uncond_eps[i]);
  }
  return out;
}

}  // namespace

NullTextResult null_text_optimize(const Denoiser& denoiser, const NoiseSchedule& schedule,
                                  std::span<const Tensor> trajectory, const ConditioningSet& cond, double cfg_scale,
                                  int iters, double step_size) {
  if (iters < 0) throw ArgumentError("null-text iterations must be nonnegative");
  if (!(cfg_scale >= 0.0)) throw ArgumentError("cfg scale must be nonnegative");
  const int T = schedule.steps();
  if (trajectory.size() != static_cast<std::size_t>(T) + 1) {
    throw ShapeError("null-text: trajectory must hold z_0 .. z_T");
  }
  NullTextResult out;
  out.null_embeddings.resize(static_cast<std::size_t>(T));
  out.baseline_objective.resize(static_cast<std::size_t>(T));
  out.final_objective.resize(static_cast<std::size_t>(T));
  out.first_gradient_norm.assign(static_cast<std::size_t>(T), 0.0);

  Tensor null_tokens = cond.null_tokens();
  Tensor z = trajectory[static_cast<std::size_t>(T)];
  for (int t = T; t >= 1; --t) {
    const auto idx = static_cast<std::size_t>(t - 1);
    const Tensor& target = trajectory[idx];
    const Tensor cond_eps = denoiser.predict_noise(z, t, cond.tokens).eps;
    const double coef = schedule.eps_coefficient(t);

    auto evaluate = [&](const Tensor& nt, Tensor& z_next) {
      const Tensor uncond = cfg_scale == 0.0 ? cond_eps : denoiser.predict_noise(z, t, nt).eps;
      z_next = ddim_step(schedule, z, cfg_scale == 0.0 ? cond_eps : combine(cond_eps, uncond, cfg_scale), t);
      return step_objective(z_next, target);
    };

    Tensor z_next;
    double objective = evaluate(null_tokens, z_next);
    out.baseline_objective[idx] = objective;
    double lr = step_size;
    for (int it = 0; it < iters; ++it) {
      // dL/d eps_uncond = -s * coef * 2 (z_next - target)
      Tensor g_eps(z.shape());
      for (std::size_t i = 0; i < g_eps.size(); ++i) {
        g_eps[i] = static_cast<float>(-cfg_scale * coef * 2.0 * (static_cast<double>(z_next[i]) - target[i]));
      }
      const Tensor grad = denoiser.eps_vjp(z, t, null_tokens, g_eps).grad_tokens;
      const double gnorm = l2_norm(grad);
      if (it == 0) out.first_gradient_norm[idx] = gnorm;
      if (!(gnorm > 0.0)) break;
      Tensor candidate = null_tokens;
      axpy(-lr, grad, candidate);
      Tensor z_cand;
      const double cand_objective = evaluate(candidate, z_cand);
      if (cand_objective < objective) {
        null_tokens = std::move(candidate);
        objective = cand_objective;
        z_next = std::move(z_cand);
      } else {
        lr *= 0.5;
      }
    }
    out.null_embeddings[idx] = null_tokens.reshaped({null_tokens.size()});
    out.final_objective[idx] = objective;
    z = std::move(z_next);
  }
  out.z0 = std::move(z);
  return out;
}

SampleResult sample(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z_T,
                    const ConditioningSet& cond, const SampleOptions& options, const SampleHooks& hooks) {
  denoiser.check_latent(z_T);
  options.config.validate();
  const int T = schedule.steps();
  if (!options.null_embeddings.empty() && options.null_embeddings.size() != static_cast<std::size_t>(T)) {
    throw ShapeError("per-step null embeddings must cover every step");
  }
  const Tensor* mask = options.guidance_mask ? &*options.guidance_mask : nullptr;
  SampleResult out;
  Tensor z = z_T;
  for (int step = 1; step <= T; ++step) {
    const int t = T - step + 1;
    std::vector<VariableOverride> overrides;
    if (hooks.overrides) overrides = hooks.overrides(step, t);
    Tensor null_tokens;
    if (!options.null_embeddings.empty()) {
      const auto& ne = options.null_embeddings[static_cast<std::size_t>(t - 1)];
      null_tokens = ne.reshaped({1, ne.size()});
    }
    StepRecord rec;
    Tensor eps = guided_eps(denoiser, schedule, z, t, cond, options.config, mask,
                            null_tokens.empty() ? nullptr : &null_tokens, overrides,
                            options.record ? &rec : nullptr);
    if (options.record) {
      out.trace.latents.push_back(z);
      out.trace.steps.push_back(std::move(rec));
    }
    if (hooks.after_predict) hooks.after_predict(step, t, eps);
    z = ddim_step(schedule, z, eps, t);
    if (hooks.after_step) hooks.after_step(step, t, z);
  }
  if (options.record) out.trace.latents.push_back(z);
  out.z0 = std::move(z);
  return out;
}

}  // namespace lswap
