#include "latentswap/masks.hpp"

#include <algorithm>
#include <cmath>

#include "latentswap/error.hpp"

namespace lswap {

BinaryMask::BinaryMask(Tensor field) : field_(std::move(field)) {
  if (field_.rank() != 2 || field_.empty()) throw ShapeError("binary mask must be a non-empty H x W field");
  for (float v : field_.data()) {
    if (v != 0.0f && v != 1.0f) throw ArgumentError("binary mask holds a value other than 0 or 1");
  }
}

std::size_t BinaryMask::foreground() const {
  return static_cast<std::size_t>(std::count(field_.data().begin(), field_.data().end(), 1.0f));
}

bool BinaryMask::degenerate() const {
  const auto fg = foreground();
  return fg == 0 || fg == field_.size();
}

SoftMask::SoftMask(Tensor field, std::optional<FeatherParams> provenance)
    : field_(std::move(field)), provenance_(provenance) {
  if (field_.rank() != 2 || field_.empty()) throw ShapeError("soft mask must be a non-empty H x W field");
  for (float v : field_.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("soft mask value outside [0, 1]");
  }
}

SoftMask SoftMask::hard(const BinaryMask& mask) { return SoftMask(mask.field()); }

Tensor structuring_element(int extent) {
  if (extent < 1 || extent % 2 == 0) {
    throw ArgumentError("structuring element extent must be odd and >= 1, got " + std::to_string(extent));
  }
  const int r = extent / 2;
  const double reach = extent / 2.0;
  const auto n = static_cast<std::size_t>(extent);
  Tensor k({n, n});
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= reach * reach) k.at(static_cast<std::size_t>(dy + r), static_cast<std::size_t>(dx + r)) = 1.0f;
  return k;
}

BinaryMask dilate(const BinaryMask& mask, int extent) {
  const Tensor se = structuring_element(extent);
  const int r = extent / 2;
  const auto h = static_cast<int>(mask.height()), w = static_cast<int>(mask.width());
  Tensor out({mask.height(), mask.width()});
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      bool hit = false;
      for (int dy = -r; dy <= r && !hit; ++dy) {
        for (int dx = -r; dx <= r && !hit; ++dx) {
          if (se.at(static_cast<std::size_t>(dy + r), static_cast<std::size_t>(dx + r)) == 0.0f) continue;
          const int y = i + dy, x = j + dx;
          if (y < 0 || y >= h || x < 0 || x >= w) continue;
          hit = mask.field().at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) == 1.0f;
        }
      }
      out.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = hit ? 1.0f : 0.0f;
    }
  }
  return BinaryMask(std::move(out));
}

SoftMask feather(const BinaryMask& mask, const FeatherParams& params) {
  const BinaryMask grown = dilate(mask, params.dilate_extent);
  Tensor s = conv2d(grown.field(), gaussian_kernel(params.sigma, params.radius), Padding::kReplicate);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = mask.field()[i] == 1.0f ? 1.0f : std::clamp(s[i], 0.0f, 1.0f);
  }
  return SoftMask(std::move(s), params);
}

SoftMask anneal(const SoftMask& mask, int t_step, const AnnealSchedule& schedule) {
  if (t_step < 0) throw ArgumentError("anneal: negative step");
  if (schedule.k < 0) throw ArgumentError("anneal: negative transition length");
  if (schedule.k == 0 || t_step >= schedule.k) return mask;
  const double rate = static_cast<double>(t_step) / schedule.k;
  Tensor out(mask.field().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(mask.field()[i] * rate);
  return SoftMask(std::move(out), mask.provenance());
}

VariableDescriptor VariableDescriptor::latent(std::size_t h, std::size_t w) {
  return {VariableKind::kLatent, h, w, 0};
}
VariableDescriptor VariableDescriptor::self_map(const LayerInfo& layer) {
  return {VariableKind::kSelfMap, layer.height, layer.width, layer.queries()};
}
VariableDescriptor VariableDescriptor::cross_map(const LayerInfo& layer, std::size_t tokens) {
  return {VariableKind::kCrossMap, layer.height, layer.width, tokens};
}
VariableDescriptor VariableDescriptor::self_out(const LayerInfo& layer) {
  return {VariableKind::kSelfOut, layer.height, layer.width, layer.channels};
}
VariableDescriptor VariableDescriptor::of(VariableClass cls, const LayerInfo& layer, std::size_t tokens) {
  switch (cls) {
    case VariableClass::kSelfMap: return self_map(layer);
    case VariableClass::kCrossMap: return cross_map(layer, tokens);
    case VariableClass::kSelfOut: return self_out(layer);
  }
  throw ArgumentError("unknown variable class");
}

Tensor fit_to(const SoftMask& mask, const VariableDescriptor& d) {
  if (d.height == 0 || d.width == 0) throw ArgumentError("fit_to: descriptor has a zero extent");
  switch (d.kind) {
    case VariableKind::kLatent:
      return resize_bilinear(mask.field(), d.height, d.width);
    case VariableKind::kSelfMap:
    case VariableKind::kCrossMap:
    case VariableKind::kSelfOut: {
      if (d.columns == 0) throw ArgumentError("fit_to: attention descriptor without a second axis");
      const Tensor grid = resize_bilinear(mask.field(), d.height, d.width);
      const std::size_t n = d.height * d.width;
      Tensor out({n, d.columns});
      for (std::size_t q = 0; q < n; ++q)
        for (std::size_t c = 0; c < d.columns; ++c) out.at(q, c) = grid[q];
      return out;
    }
  }
  throw ArgumentError("fit_to: unknown variable descriptor");
}

}  // namespace lswap
