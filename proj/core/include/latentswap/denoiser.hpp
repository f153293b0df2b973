#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "latentswap/tensor.hpp"

namespace lswap {

/// Architecture of the attention U-Net. The latent is patchified 2x2 before
/// the first level, so level l works on an (H / 2^(l+1)) x (W / 2^(l+1)) grid.
struct DenoiserConfig {
  std::size_t in_channels = 1;
  std::vector<std::size_t> channels = {16, 32};
  std::size_t attention_dim = 16;
  std::size_t text_dim = 16;
  std::size_t time_dim = 32;
  std::uint64_t weight_seed = 0;
  // Init multipliers. residual_gain scales every residual branch and the
  // per-level time biases; output_gain scales the output projection. Small
  // values keep eps smooth in z so DDIM inversion round-trips tightly with
  // untrained weights.
  double residual_gain = 0.3;
  double output_gain = 0.002;

  std::size_t levels() const { return channels.size(); }
  /// Extents must be divisible by this.
  std::size_t spatial_multiple() const { return std::size_t{1} << levels(); }
  void validate() const;
};

/// (name, shape) pairs in the fixed order weights are drawn and stored.
std::vector<std::pair<std::string, Shape>> weight_manifest(const DenoiserConfig& config);

class Weights {
 public:
  /// He-style Gaussian init from SeededRng(config.weight_seed); biases zero.
  static Weights init(const DenoiserConfig& config);
  static Weights load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const DenoiserConfig& config() const { return config_; }
  const Tensor& get(std::string_view name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  bool operator==(const Weights& other) const { return entries_ == other.entries_; }

 private:
  Weights(DenoiserConfig config, std::vector<std::pair<std::string, Tensor>> entries);

  DenoiserConfig config_;
  std::vector<std::pair<std::string, Tensor>> entries_;
};

/// Prompt tokens plus the unconditional ("null") embedding.
struct ConditioningSet {
  Tensor tokens;          // T_tok x d_text
  Tensor null_embedding;  // d_text

  std::size_t token_count() const { return tokens.empty() ? 0 : tokens.dim(0); }
  std::size_t text_dim() const { return tokens.empty() ? 0 : tokens.dim(1); }
  /// Null embedding as a one-token conditioning matrix.
  Tensor null_tokens() const;
  /// Copy with row `index` replaced by `embedding`.
  ConditioningSet with_token(std::size_t index, const Tensor& embedding) const;
  void validate(std::size_t text_dim) const;
};

enum class VariableClass { kSelfMap, kCrossMap, kSelfOut };
std::string_view variable_class_name(VariableClass cls);

/// One attention layer slot: down levels, then the bottom level, then up
/// levels in reverse.
struct LayerInfo {
  std::size_t slot = 0;
  std::size_t level = 0;
  std::size_t height = 0;  // token grid
  std::size_t width = 0;
  std::size_t channels = 0;
  std::string name;

  std::size_t queries() const { return height * width; }
};

/// Variables captured from one denoiser pass, indexed by layer slot.
struct StepRecord {
  std::vector<Tensor> self_maps;   // M, N_q x N_q
  std::vector<Tensor> cross_maps;  // A, N_q x T_tok
  std::vector<Tensor> self_outs;   // phi, N_q x C

  const std::vector<Tensor>& of(VariableClass cls) const;
};

/// Per-step records of a sampling or inversion run.
struct UNetTrace {
  std::vector<StepRecord> steps;  // one per denoiser step, in run order
  std::vector<Tensor> latents;    // z before each step, plus the final latent
};

/// Replaces or blends a variable inside the forward pass.
/// Without a mask the live value is replaced by `source`. With a mask the
/// result is source * (1 - mask) + live * mask, unless `blend` is set, in
/// which case blend(source, live) is used.
struct VariableOverride {
  VariableClass target = VariableClass::kSelfMap;
  std::size_t layer = 0;
  Tensor source;
  std::optional<Tensor> mask;
  std::function<Tensor(const Tensor& source, const Tensor& live)> blend;

  Tensor apply(const Tensor& live) const;
};

/// Scalar energy over the cross-attention maps of one pass. `fn` fills
/// `grad_maps[l]` with dE/dA_l (same shape as A_l; leave empty for zero).
struct CrossMapEnergy {
  std::optional<std::size_t> token;
  std::function<double(std::span<const Tensor> cross_maps, std::span<const LayerInfo> layers,
                       std::vector<Tensor>& grad_maps)>
      fn;
};

struct EnergyGradient {
  double energy = 0.0;
  Tensor grad;  // shaped like z
};

struct TokenGradient {
  Tensor grad_z;       // shaped like z
  Tensor grad_tokens;  // shaped like the conditioning tokens
};

class Denoiser {
 public:
  explicit Denoiser(Weights weights);

  const DenoiserConfig& config() const { return weights_.config(); }
  const Weights& weights() const { return weights_; }

  std::size_t layer_count() const { return 2 * config().levels() - 1; }
  std::vector<LayerInfo> layers(std::size_t height, std::size_t width) const;
  /// Throws ShapeError unless z is H x W x in_channels with H, W divisible
  /// by spatial_multiple().
  void check_latent(const Tensor& z) const;

  struct Output {
    Tensor eps;
    std::optional<StepRecord> record;
  };

  Output predict_noise(const Tensor& z, int t, const Tensor& tokens, bool record = false) const;
  Output predict_noise_with_overrides(const Tensor& z, int t, const Tensor& tokens,
                                      std::span<const VariableOverride> overrides,
                                      bool record = false) const;

  /// dE/dz by reverse-mode through the attention layers (no overrides).
  EnergyGradient energy_gradient(const Tensor& z, int t, const Tensor& tokens,
                                 const CrossMapEnergy& energy) const;

  /// Vector-Jacobian product of eps with `grad_eps`, w.r.t. z and tokens.
  TokenGradient eps_vjp(const Tensor& z, int t, const Tensor& tokens, const Tensor& grad_eps) const;

 private:
  Weights weights_;
};

}  // namespace lswap
