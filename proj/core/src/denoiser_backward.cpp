// Reverse pass through the U-Net graph of run_unet(). Only input gradients
// (latent and conditioning tokens) are produced; weights are constants.

#include <cmath>

#include "latentswap/error.hpp"
#include "unet_graph.hpp"

namespace lswap::detail {

namespace {

void accumulate(Tensor& into, const Tensor& g) {
  if (into.empty()) {
    into = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

struct ReverseRunner {
  const Weights& weights;
  const Tensor& tokens;
  std::span<const Tensor> grad_cross;
  Tensor* grad_tokens;
  double inv_sqrt_d;
  std::size_t levels;

  // dL/d(attn block input) from dL/d(attn block output)
  Tensor attn_block(const Tensor& grad_out, std::size_t slot, const std::string& name, const AttnCache& c) {
    // out = x_mid + (A Vc) Wco
    const Tensor g_av = matmul_nt(grad_out, weights.get(name + ".cross.o"));
    Tensor g_a = matmul_nt(g_av, c.vc);
    if (slot < grad_cross.size() && !grad_cross[slot].empty()) {
      if (grad_cross[slot].shape() != g_a.shape()) throw ShapeError("cross-map gradient shape mismatch");
      accumulate(g_a, grad_cross[slot]);
    }
    const Tensor g_vc = matmul_tn(c.a, g_av);
    const Tensor g_sc = scale(softmax_rows_backward(c.a, g_a), inv_sqrt_d);
    const Tensor g_qc = matmul(g_sc, c.kc);
    const Tensor g_kc = matmul_tn(g_sc, c.qc);
    Tensor g_mid = add(grad_out, matmul_nt(g_qc, weights.get(name + ".cross.q")));
    if (grad_tokens) {
      accumulate(*grad_tokens, matmul_nt(g_kc, weights.get(name + ".cross.k")));
      accumulate(*grad_tokens, matmul_nt(g_vc, weights.get(name + ".cross.v")));
    }

    // x_mid = x + (M V) Wo
    const Tensor g_phi = matmul_nt(g_mid, weights.get(name + ".attn.o"));
    const Tensor g_m = matmul_nt(g_phi, c.v);
    const Tensor g_v = matmul_tn(c.m, g_phi);
    const Tensor g_s = scale(softmax_rows_backward(c.m, g_m), inv_sqrt_d);
    const Tensor g_q = matmul(g_s, c.k);
    const Tensor g_k = matmul_tn(g_s, c.q);
    Tensor g_x = std::move(g_mid);
    accumulate(g_x, matmul_nt(g_q, weights.get(name + ".attn.q")));
    accumulate(g_x, matmul_nt(g_k, weights.get(name + ".attn.k")));
    accumulate(g_x, matmul_nt(g_v, weights.get(name + ".attn.v")));
    return g_x;
  }

  // y = x + conv(silu(x)) + bias
  Tensor res_block(const Tensor& grad_out, std::size_t h, std::size_t w, const std::string& name, const ResCache& c) {
    const Tensor g_act = conv3x3_backward(grad_out, h, w, weights.get(name + ".res.conv"));
    return add(grad_out, silu_backward(c.x_in, g_act));
  }

  Tensor block(const Tensor& grad_out, std::size_t slot, const BlockCache& bc) {
    const std::string name = block_name(slot, levels);
    const Tensor g = attn_block(grad_out, slot, name, bc.attn);
    return res_block(g, bc.h, bc.w, name, bc.res);
  }
};

}  // namespace

void backward_unet(const Weights& weights, const ForwardCache& cache, const Tensor& tokens,
                   const Tensor* grad_eps, std::span<const Tensor> grad_cross, Tensor& grad_z,
                   Tensor* grad_tokens) {
  const auto& cfg = weights.config();
  const std::size_t levels = cfg.levels();
  const std::size_t H = cache.height, W = cache.width, C = cfg.in_channels;
  if (grad_tokens) *grad_tokens = Tensor();

  ReverseRunner r{weights, tokens, grad_cross, grad_tokens,
                  1.0 / std::sqrt(static_cast<double>(cfg.attention_dim)), levels};

  // output head: eps = depatch(silu(x) Wout + b)
  Tensor g;
  if (grad_eps) {
    const Tensor g_y = patchify(*grad_eps);
    g = silu_backward(cache.out_in, matmul_nt(g_y, weights.get("out.proj")));
  } else {
    g = Tensor(cache.out_in.shape());
  }

  std::vector<Tensor> g_skips(levels);
  // up path, reversed
  for (std::size_t l = 0; l + 1 < levels; ++l) {
    const std::size_t slot = 2 * levels - 2 - l;
    const auto& bc = cache.blocks[slot];
    g = r.block(g, slot, bc);
    g_skips[l] = g;  // x = up(...) + skip
    const Tensor g_up = upsample2_backward(g, bc.h / 2, bc.w / 2);
    g = matmul_nt(g_up, weights.get("up" + std::to_string(l) + ".proj"));
  }
  g = r.block(g, levels - 1, cache.blocks[levels - 1]);
  // down path, reversed
  for (std::size_t l = levels - 1; l-- > 0;) {
    const auto& bc = cache.blocks[l];
    const Tensor g_pool = matmul_nt(g, weights.get("down" + std::to_string(l) + ".proj"));
    g = avgpool2_backward(g_pool, bc.h, bc.w);
    accumulate(g, g_skips[l]);
    g = r.block(g, l, bc);
  }
  // x0 = patchify(z) Win + b
  const Tensor g_patch = matmul_nt(g, weights.get("in.proj"));
  grad_z = depatchify(g_patch, H, W, C);
  if (grad_tokens && grad_tokens->empty()) *grad_tokens = Tensor(tokens.shape());
  require_finite(grad_z, "latent gradient");
}

}  // namespace lswap::detail
