#include "latentswap/swap.hpp"

#include <algorithm>
#include <cstdio>
#include <string>

#include "latentswap/adapt.hpp"
#include "latentswap/error.hpp"

namespace lswap {

void SwapSchedule::validate(int total_steps) const {
  for (int v : {steps_z, steps_cross_map, steps_self_map, steps_self_out}) {
    if (v < 0 || v > total_steps) {
      throw ArgumentError("swap step count " + std::to_string(v) + " outside [0, " + std::to_string(total_steps) + "]");
    }
  }
}

std::string_view swap_target_name(SwapTarget target) {
  switch (target) {
    case SwapTarget::kLatent: return "z";
    case SwapTarget::kCrossMap: return "cross_map";
    case SwapTarget::kSelfMap: return "self_map";
    case SwapTarget::kSelfOut: return "self_out";
  }
  return "?";
}

SourceTrace record_source(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z0,
                          const ConditioningSet& cond, const RecordOptions& options) {
  cond.validate(denoiser.config().text_dim);
  const InversionResult inv = ddim_invert(denoiser, schedule, z0, cond, false);

  SourceTrace st;
  st.cond = cond;
  st.z_T = inv.z_T;
  st.cfg_scale = options.cfg_scale;
  if (options.null_iters > 0 && options.cfg_scale > 0.0) {
    st.null_embeddings =
        null_text_optimize(denoiser, schedule, inv.latents, cond, options.cfg_scale, options.null_iters, options.null_lr)
            .null_embeddings;
  }

  SampleOptions so;
  so.config.cfg_scale = options.cfg_scale;
  so.null_embeddings = st.null_embeddings;
  so.record = true;
  auto rec = sample(denoiser, schedule, inv.z_T, cond, so);
  st.trace = std::move(rec.trace);
  st.latents = st.trace.latents;
  st.reconstruction_error = max_abs_diff(rec.z0, z0);
  if (st.reconstruction_error > options.tolerance) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "source reconstruction error %.3g exceeds tolerance %.3g; raise null-text iterations "
                  "(null-iters) or lower cfg-scale",
                  st.reconstruction_error, options.tolerance);
    throw NumericError(buf);
  }
  return st;
}

Tensor blend_variable(const Tensor& source, const Tensor& target, const Tensor& fitted_mask) {
  if (source.shape() != target.shape()) {
    throw ShapeError("blend_variable: " + shape_str(source.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t channels = source.rank() == 3 ? source.dim(2) : 1;
  const bool spatial = fitted_mask.size() * channels == source.size() && fitted_mask.size() != source.size();
  if (!spatial && fitted_mask.size() != source.size()) {
    throw ShapeError("blend_variable: mask " + shape_str(fitted_mask.shape()) + " not fitted to " +
                     shape_str(source.shape()));
  }
  Tensor out(source.shape());
  for (std::size_t i = 0; i < source.size(); ++i) {
    const float m = spatial ? fitted_mask[i / channels] : fitted_mask[i];
    out[i] = source[i] * (1.0f - m) + target[i] * m;
  }
  return out;
}

Tensor blend_with_adain(const Tensor& source, const Tensor& style, const Tensor& fitted_mask) {
  // a zero-mass mask selects no foreground: the blend is the source itself
  if (max_abs(fitted_mask) == 0.0) return blend_variable(source, style, fitted_mask);
  return blend_variable(source, masked_adain(source, style, fitted_mask), fitted_mask);
}

Tensor blend_with_adain(SwapTarget target, const Tensor& source, const Tensor& style, const Tensor& fitted_mask) {
  if (target == SwapTarget::kCrossMap || target == SwapTarget::kSelfMap) {
    throw ArgumentError("AdaIN blending applies to the latent and self-attention output only, not " +
                        std::string(swap_target_name(target)));
  }
  return blend_with_adain(source, style, fitted_mask);
}

namespace {

void check_plan(const SwapPlan& plan, const SourceTrace& trace, int total_steps) {
  plan.schedule.validate(total_steps);
  plan.sampler.validate();
  const auto& src = trace.cond.tokens;
  const auto& tgt = plan.target.tokens;
  if (src.shape() != tgt.shape()) throw ArgumentError("target conditioning must keep the source token layout");
  if (plan.concept_token >= plan.target.token_count()) throw ArgumentError("concept token index out of range");
  for (std::size_t r = 0; r < src.dim(0); ++r) {
    if (r == plan.concept_token) continue;
    for (std::size_t c = 0; c < src.dim(1); ++c) {
      if (src.at(r, c) != tgt.at(r, c)) {
        throw ArgumentError("target conditioning differs from the source at token " + std::to_string(r) +
                            ", which is not the concept token");
      }
    }
  }
}

Tensor binarize(const Tensor& m) {
  Tensor out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] >= 0.5f ? 1.0f : 0.0f;
  return out;
}

}  // namespace

SwapResult swap_generate(const Denoiser& denoiser, const NoiseSchedule& schedule, const SourceTrace& trace,
                         const SwapPlan& plan) {
  const int T = schedule.steps();
  if (trace.steps() != T || trace.latents.size() != static_cast<std::size_t>(T) + 1) {
    throw ShapeError("source trace does not cover all " + std::to_string(T) + " steps");
  }
  check_plan(plan, trace, T);
  const Tensor& z_T = trace.z_T;
  if (plan.mask.height() != z_T.dim(0) || plan.mask.width() != z_T.dim(1)) {
    throw ShapeError("swap mask extents do not match the latent");
  }
  const auto layers = denoiser.layers(z_T.dim(0), z_T.dim(1));
  const std::size_t tokens = plan.target.token_count();

  SwapResult result;
  // An empty mask selects nothing to swap. With steps_z == T the blend below
  // already reproduces the source; otherwise the target prompt would keep
  // running after the last latent blend, so the source is copied directly.
  if (max_abs(plan.mask.field()) == 0.0 && plan.schedule.steps_z < T) {
    result.z0 = trace.reconstruction();
    return result;
  }
  auto fitted_for_step = [&](int step) { return anneal(plan.mask, step, plan.anneal); };

  SampleHooks hooks;
  hooks.overrides = [&](int step, int) {
    std::vector<VariableOverride> ovs;
    const auto& rec = trace.trace.steps[static_cast<std::size_t>(step - 1)];
    const SoftMask m = fitted_for_step(step);
    auto add = [&](VariableClass cls, SwapTarget target, int limit) {
      if (step > limit) return;
      result.blended_steps[static_cast<std::size_t>(target)].push_back(step);
      for (const auto& layer : layers) {
        VariableOverride ov;
        ov.target = cls;
        ov.layer = layer.slot;
        ov.source = rec.of(cls)[layer.slot];
        Tensor fitted = fit_to(m, VariableDescriptor::of(cls, layer, tokens));
        if (cls != VariableClass::kSelfOut && !plan.soft_attention_mask) fitted = binarize(fitted);
        if (cls == VariableClass::kSelfOut && plan.adain) {
          ov.blend = [fitted](const Tensor& src, const Tensor& live) {
            return blend_with_adain(SwapTarget::kSelfOut, src, live, fitted);
          };
        } else {
          ov.mask = std::move(fitted);
        }
        ovs.push_back(std::move(ov));
      }
    };
    add(VariableClass::kCrossMap, SwapTarget::kCrossMap, plan.schedule.steps_cross_map);
    add(VariableClass::kSelfMap, SwapTarget::kSelfMap, plan.schedule.steps_self_map);
    add(VariableClass::kSelfOut, SwapTarget::kSelfOut, plan.schedule.steps_self_out);
    return ovs;
  };
  hooks.after_step = [&](int step, int, Tensor& z) {
    if (step > plan.schedule.steps_z) return;
    result.blended_steps[static_cast<std::size_t>(SwapTarget::kLatent)].push_back(step);
    const Tensor fitted = fit_to(fitted_for_step(step), VariableDescriptor::latent(z.dim(0), z.dim(1)));
    const Tensor& src = trace.latents[static_cast<std::size_t>(step)];
    z = plan.adain ? blend_with_adain(SwapTarget::kLatent, src, z, fitted) : blend_variable(src, z, fitted);
  };

  SampleOptions so;
  so.config = plan.sampler;
  so.config.cfg_scale = trace.cfg_scale;
  so.null_embeddings = trace.null_embeddings;
  if (plan.sampler.shape_weight > 0.0) so.guidance_mask = plan.mask.field();
  result.z0 = sample(denoiser, schedule, z_T, plan.target, so, hooks).z0;
  return result;
}

MultiSwapResult multi_swap(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z0,
                           const ConditioningSet& cond, std::span<const SwapPlan> plans, const RecordOptions& options) {
  MultiSwapResult out;
  out.z0 = z0;
  // feathered supports of earlier plans; overlap is allowed but reported
  Tensor covered;
  for (const auto& plan : plans) {
    const Tensor& f = plan.mask.field();
    if (covered.empty()) {
      covered = Tensor(f.shape());
    } else if (covered.shape() == f.shape()) {
      for (std::size_t i = 0; i < f.size(); ++i) {
        if (covered[i] > 0.0f && f[i] > 0.0f) out.masks_overlap = true;
      }
    }
    if (covered.shape() == f.shape()) {
      for (std::size_t i = 0; i < f.size(); ++i) covered[i] = std::max(covered[i], f[i]);
    }
  }
  for (const auto& plan : plans) {
    out.traces.push_back(record_source(denoiser, schedule, out.z0, cond, options));
    out.z0 = swap_generate(denoiser, schedule, out.traces.back(), plan).z0;
  }
  return out;
}

}  // namespace lswap
