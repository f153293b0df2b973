#include "latentswap/adapt.hpp"

#include <algorithm>
#include <cmath>

#include "latentswap/error.hpp"

namespace lswap {

void ShapeConfig::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ArgumentError("shape threshold must lie in (0, 1)");
  if (!(tau > 0.0)) throw ArgumentError("shape softness tau must be positive");
}

namespace {

struct MaskLayout {
  std::size_t positions;
  std::size_t channels;
  bool per_element;
};

MaskLayout mask_layout(const Tensor& values, const Tensor& mask) {
  if (values.rank() < 2) throw ShapeError("masked statistics need a spatial axis and a channel axis");
  const std::size_t channels = values.shape().back();
  const std::size_t positions = values.size() / channels;
  if (mask.size() == positions) return {positions, channels, false};
  if (mask.size() == values.size()) return {positions, channels, true};
  throw ShapeError("mask " + shape_str(mask.shape()) + " is not fitted to " + shape_str(values.shape()));
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

MaskedStats masked_stats(const Tensor& values, const Tensor& mask) {
  const auto lay = mask_layout(values, mask);
  MaskedStats st;
  st.mean.assign(lay.channels, 0.0);
  st.stddev.assign(lay.channels, 0.0);
  std::vector<double> mass(lay.channels, 0.0);
  auto weight = [&](std::size_t n, std::size_t c) {
    return static_cast<double>(lay.per_element ? mask[n * lay.channels + c] : mask[n]);
  };
  for (std::size_t n = 0; n < lay.positions; ++n) {
    for (std::size_t c = 0; c < lay.channels; ++c) {
      const double w = weight(n, c);
      mass[c] += w;
      st.mean[c] += w * values[n * lay.channels + c];
    }
  }
  for (std::size_t c = 0; c < lay.channels; ++c) {
    if (!(mass[c] > 0.0)) throw ArgumentError("masked statistics: mask has zero mass");
    st.mean[c] /= mass[c];
  }
  for (std::size_t n = 0; n < lay.positions; ++n) {
    for (std::size_t c = 0; c < lay.channels; ++c) {
      const double d = values[n * lay.channels + c] - st.mean[c];
      st.stddev[c] += weight(n, c) * d * d;
    }
  }
  for (std::size_t c = 0; c < lay.channels; ++c) {
    st.stddev[c] = std::max(std::sqrt(st.stddev[c] / mass[c]), kStatsEpsilon);
  }
  return st;
}

Tensor masked_adain(const Tensor& source, const Tensor& style, const Tensor& mask) {
  if (source.shape() != style.shape()) {
    throw ShapeError("masked_adain: " + shape_str(source.shape()) + " vs " + shape_str(style.shape()));
  }
  const auto src = masked_stats(source, mask);
  const auto con = masked_stats(style, mask);
  const std::size_t channels = style.shape().back();
  Tensor out(style.shape());
  for (std::size_t i = 0; i < style.size(); ++i) {
    const std::size_t c = i % channels;
    out[i] = static_cast<float>(src.stddev[c] * (style[i] - con.mean[c]) / con.stddev[c] + src.mean[c]);
  }
  return out;
}

ShapeField extract_shape(const Tensor& cross_map, std::size_t token, std::size_t h, std::size_t w,
                         const ShapeConfig& config) {
  config.validate();
  if (cross_map.rank() != 2 || cross_map.dim(0) != h * w) {
    throw ShapeError("extract_shape: cross map " + shape_str(cross_map.shape()) + " does not cover a " +
                     std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  if (token >= cross_map.dim(1)) {
    throw ArgumentError("extract_shape: token " + std::to_string(token) + " outside " +
                        std::to_string(cross_map.dim(1)) + " tokens");
  }
  const std::size_t n = h * w;
  double mn = INFINITY, mx = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = cross_map.at(i, token);
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  ShapeField out{Tensor({h, w}), false};
  if (!(mx > mn)) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (cross_map.at(i, token) - mn) / (mx - mn);
    out.field[i] = config.mode == ShapeMode::kHard ? (v > config.threshold ? 1.0f : 0.0f)
                                                   : static_cast<float>(logistic((v - config.threshold) / config.tau));
  }
  return out;
}

double shape_energy(const Tensor& mask, const Tensor& shape) {
  if (mask.shape() != shape.shape()) {
    throw ShapeError("shape_energy: " + shape_str(mask.shape()) + " vs " + shape_str(shape.shape()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) acc += std::fabs(static_cast<double>(mask[i]) - shape[i]);
  return acc;
}

Tensor aggregate_shape(const StepRecord& step, std::span<const LayerInfo> layers, std::size_t token,
                       const ShapeConfig& config, std::size_t out_h, std::size_t out_w) {
  if (step.cross_maps.empty() || layers.size() != step.cross_maps.size()) {
    throw ShapeError("aggregate_shape: layer list does not match recorded cross maps");
  }
  std::vector<double> acc(out_h * out_w, 0.0);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto shape = extract_shape(step.cross_maps[l], token, layers[l].height, layers[l].width, config);
    const Tensor resized = resize_bilinear(shape.field, out_h, out_w);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += resized[i];
  }
  Tensor out({out_h, out_w});
  const auto count = static_cast<double>(layers.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / count);
  return out;
}

CrossMapEnergy make_shape_energy(const Tensor& mask, std::size_t token, const ShapeConfig& config) {
  config.validate();
  if (mask.rank() != 2) throw ShapeError("shape energy mask must be an H x W field");
  CrossMapEnergy energy;
  energy.token = token;
  energy.fn = [mask, token, config](std::span<const Tensor> maps, std::span<const LayerInfo> layers,
                                    std::vector<Tensor>& grads) {
    const std::size_t H = mask.dim(0), W = mask.dim(1);
    const auto count = static_cast<double>(layers.size());
    ShapeConfig soft = config;
    soft.mode = ShapeMode::kSoft;

    // forward: soft shapes per layer, averaged at latent resolution
    std::vector<double> agg(H * W, 0.0);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Tensor r = resize_bilinear(extract_shape(maps[l], token, layers[l].height, layers[l].width, soft).field, H, W);
      for (std::size_t i = 0; i < agg.size(); ++i) agg[i] += r[i] / count;
    }
    double e = 0.0;
    Tensor g_agg({H, W});
    for (std::size_t i = 0; i < agg.size(); ++i) {
      const double d = mask[i] - agg[i];
      e += std::fabs(d);
      // d|m - s|/ds = -sign(m - s)
      g_agg[i] = static_cast<float>((d > 0.0 ? -1.0 : (d < 0.0 ? 1.0 : 0.0)) / count);
    }

    // reverse: resize adjoint, logistic, min-max normalization
    grads.assign(layers.size(), Tensor());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& a = maps[l];
      const std::size_t n = layers[l].queries();
      const Tensor g_shape = resize_bilinear_adjoint(g_agg, layers[l].height, layers[l].width);
      std::size_t imin = 0, imax = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (a.at(i, token) < a.at(imin, token)) imin = i;
        if (a.at(i, token) > a.at(imax, token)) imax = i;
      }
      const double mn = a.at(imin, token), mx = a.at(imax, token);
      Tensor g(a.shape());
      if (mx > mn) {
        const double range = mx - mn;
        double g_mn = 0.0, g_mx = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double v = a.at(i, token);
          const double vn = (v - mn) / range;
          const double s = logistic((vn - soft.threshold) / soft.tau);
          const double g_vn = g_shape[i] * s * (1.0 - s) / soft.tau;
          g.at(i, token) += static_cast<float>(g_vn / range);
          g_mn += g_vn * (v - mx) / (range * range);
          g_mx += -g_vn * (v - mn) / (range * range);
        }
        g.at(imin, token) += static_cast<float>(g_mn);
        g.at(imax, token) += static_cast<float>(g_mx);
      }
      grads[l] = std::move(g);
    }
    return e;
  };
  return energy;
}

}  // namespace lswap
