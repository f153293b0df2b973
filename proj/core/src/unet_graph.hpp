#pragma once

// Internal: the U-Net forward graph shared by the forward and reverse passes.

#include <span>
#include <vector>

#include "latentswap/denoiser.hpp"

namespace lswap::detail {

struct ResCache {
  Tensor x_in;
};

struct AttnCache {
  Tensor x_in, q, k, v, m;
  Tensor x_mid, qc, kc, vc, a;
};

struct BlockCache {
  std::size_t h = 0, w = 0;
  ResCache res;
  AttnCache attn;
};

struct ForwardCache {
  std::size_t height = 0, width = 0;
  std::vector<BlockCache> blocks;  // indexed by layer slot
  Tensor out_in;                   // features entering the output head
};

// Block name for a layer slot ("down0", "mid", "up0", ...).
std::string block_name(std::size_t slot, std::size_t levels);
std::size_t block_level(std::size_t slot, std::size_t levels);

Tensor time_embedding(int t, std::size_t dim);

Tensor patchify(const Tensor& z);
Tensor depatchify(const Tensor& x, std::size_t height, std::size_t width, std::size_t channels);

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr);
Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& grad);

// 3x3 zero-padded convolution over an h x w token grid; kernel {3,3,Cin,Cout}.
Tensor conv3x3(const Tensor& x, std::size_t h, std::size_t w, const Tensor& kernel);
Tensor conv3x3_backward(const Tensor& grad, std::size_t h, std::size_t w, const Tensor& kernel);

Tensor avgpool2(const Tensor& x, std::size_t h, std::size_t w);
Tensor avgpool2_backward(const Tensor& grad, std::size_t h, std::size_t w);
Tensor upsample2(const Tensor& x, std::size_t h, std::size_t w);
Tensor upsample2_backward(const Tensor& grad, std::size_t h, std::size_t w);

Tensor softmax_rows_backward(const Tensor& probs, const Tensor& grad);

Tensor run_unet(const Weights& weights, const Tensor& z, int t, const Tensor& tokens,
                std::span<const VariableOverride> overrides, StepRecord* record, ForwardCache* cache);

// Reverse pass. `grad_eps` may be null; `grad_cross` is indexed by slot and
// may hold empty tensors. `grad_tokens` may be null.
void backward_unet(const Weights& weights, const ForwardCache& cache, const Tensor& tokens,
                   const Tensor* grad_eps, std::span<const Tensor> grad_cross, Tensor& grad_z,
                   Tensor* grad_tokens);

}  // namespace lswap::detail
