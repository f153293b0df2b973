#include "latentswap/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "latentswap/error.hpp"
#include "latentswap/tensor_io.hpp"
#include "unet_graph.hpp"

namespace lswap {

void DenoiserConfig::validate() const {
  if (in_channels == 0) throw ArgumentError("denoiser: in_channels must be positive");
  if (channels.empty()) throw ArgumentError("denoiser: at least one level required");
  if (std::any_of(channels.begin(), channels.end(), [](std::size_t c) { return c == 0; })) {
    throw ArgumentError("denoiser: channel counts must be positive");
  }
  if (attention_dim == 0 || text_dim == 0) throw ArgumentError("denoiser: zero attention/text dim");
  if (time_dim == 0 || time_dim % 2 != 0) throw ArgumentError("denoiser: time_dim must be positive and even");
  if (!(output_gain > 0.0) || !std::isfinite(output_gain) || !(residual_gain > 0.0) || !std::isfinite(residual_gain)) {
    throw ArgumentError("denoiser: output_gain and residual_gain must be positive");
  }
}

std::vector<std::pair<std::string, Shape>> weight_manifest(const DenoiserConfig& config) {
  config.validate();
  const std::size_t levels = config.levels();
  const std::size_t d = config.attention_dim, dt = config.text_dim, tdim = config.time_dim;
  const auto& ch = config.channels;
  std::vector<std::pair<std::string, Shape>> m;
  m.emplace_back("time.fc", Shape{tdim, tdim});
  m.emplace_back("time.fc_bias", Shape{tdim});
  for (std::size_t l = 0; l < levels; ++l) m.emplace_back("time.level" + std::to_string(l), Shape{tdim, ch[l]});
  m.emplace_back("in.proj", Shape{4 * config.in_channels, ch[0]});
  m.emplace_back("in.bias", Shape{ch[0]});

  auto block = [&](const std::string& name, std::size_t c) {
    m.emplace_back(name + ".res.conv", Shape{3, 3, c, c});
    m.emplace_back(name + ".res.bias", Shape{c});
    m.emplace_back(name + ".attn.q", Shape{c, d});
    m.emplace_back(name + ".attn.k", Shape{c, d});
    m.emplace_back(name + ".attn.v", Shape{c, c});
    m.emplace_back(name + ".attn.o", Shape{c, c});
    m.emplace_back(name + ".cross.q", Shape{c, d});
    m.emplace_back(name + ".cross.k", Shape{dt, d});
    m.emplace_back(name + ".cross.v", Shape{dt, c});
    m.emplace_back(name + ".cross.o", Shape{c, c});
  };
  for (std::size_t l = 0; l + 1 < levels; ++l) {
    block("down" + std::to_string(l), ch[l]);
    m.emplace_back("down" + std::to_string(l) + ".proj", Shape{ch[l], ch[l + 1]});
  }
  block("mid", ch[levels - 1]);
  for (std::size_t l = levels - 1; l-- > 0;) {
    m.emplace_back("up" + std::to_string(l) + ".proj", Shape{ch[l + 1], ch[l]});
    block("up" + std::to_string(l), ch[l]);
  }
  m.emplace_back("out.proj", Shape{ch[0], 4 * config.in_channels});
  m.emplace_back("out.bias", Shape{4 * config.in_channels});
  return m;
}

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

Weights::Weights(DenoiserConfig config, std::vector<std::pair<std::string, Tensor>> entries)
    : config_(std::move(config)), entries_(std::move(entries)) {}

Weights Weights::init(const DenoiserConfig& config) {
  const auto manifest = weight_manifest(config);
  SeededRng rng(config.weight_seed);
  std::vector<std::pair<std::string, Tensor>> entries;
  entries.reserve(manifest.size());
  for (const auto& [name, shape] : manifest) {
    if (ends_with(name, "bias")) {
      entries.emplace_back(name, Tensor(shape));
      continue;
    }
    // fan-in is every axis except the last (output) one
    std::size_t fan_in = 1;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) fan_in *= shape[i];
    // query/key projections feed a softmax; low-variance logits keep maps soft
    const bool logits = ends_with(name, ".q") || ends_with(name, ".k");
    double stddev = std::sqrt((logits ? 0.1 : 2.0) / static_cast<double>(fan_in));
    const bool residual = ends_with(name, ".res.conv") || ends_with(name, ".attn.o") || ends_with(name, ".cross.o") ||
                          name.starts_with("time.level");
    if (residual) stddev *= config.residual_gain;
    if (name == "out.proj") stddev *= config.output_gain;
    entries.emplace_back(name, rng.gaussian_tensor(shape, stddev));
  }
  return Weights(config, std::move(entries));
}

const Tensor& Weights::get(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw ArgumentError("unknown weight '" + std::string(name) + "'");
}

void Weights::save(const std::filesystem::path& path) const {
  std::ostringstream os(std::ios::binary);
  os << "latentswap-weights 1\n";
  os << "in_channels " << config_.in_channels << '\n';
  os << "channels ";
  for (std::size_t i = 0; i < config_.channels.size(); ++i) os << (i ? "," : "") << config_.channels[i];
  os << '\n';
  os << "attention_dim " << config_.attention_dim << '\n';
  os << "text_dim " << config_.text_dim << '\n';
  os << "time_dim " << config_.time_dim << '\n';
  os << "weight_seed " << config_.weight_seed << '\n';
  os.precision(17);
  os << "residual_gain " << config_.residual_gain << '\n';
  os << "output_gain " << config_.output_gain << '\n';
  os << "tensors " << entries_.size() << '\n';
  for (const auto& [name, t] : entries_) {
    os << name << ' ' << t.rank();
    for (auto e : t.shape()) os << ' ' << e;
    os << '\n';
  }
  os << "end\n";
  for (const auto& [name, t] : entries_) write_tensor(os, t);
  write_file_atomic(path, os.str());
}

Weights Weights::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open weight file " + path.string());
  auto expect_line = [&](std::string_view key) {
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("weight file truncated before '" + std::string(key) + "'");
    std::istringstream ls(line);
    std::string k;
    ls >> k;
    if (k != key) throw ConfigError("weight file: expected '" + std::string(key) + "', got '" + k + "'");
    std::string rest;
    std::getline(ls >> std::ws, rest);
    return rest;
  };
  if (expect_line("latentswap-weights") != "1") throw ConfigError("weight file: unsupported version");
  DenoiserConfig cfg;
  try {
    cfg.in_channels = std::stoul(expect_line("in_channels"));
    cfg.channels.clear();
    std::istringstream cs(expect_line("channels"));
    for (std::string part; std::getline(cs, part, ',');) cfg.channels.push_back(std::stoul(part));
    cfg.attention_dim = std::stoul(expect_line("attention_dim"));
    cfg.text_dim = std::stoul(expect_line("text_dim"));
    cfg.time_dim = std::stoul(expect_line("time_dim"));
    cfg.weight_seed = std::stoull(expect_line("weight_seed"));
    cfg.residual_gain = std::stod(expect_line("residual_gain"));
    cfg.output_gain = std::stod(expect_line("output_gain"));
  } catch (const std::logic_error&) {
    throw ConfigError("weight file: malformed header value");
  }
  const auto manifest = weight_manifest(cfg);
  if (std::stoul(expect_line("tensors")) != manifest.size()) throw ConfigError("weight file: tensor count mismatch");
  for (const auto& [name, shape] : manifest) {
    std::string line;
    std::getline(is, line);
    std::ostringstream want;
    want << name << ' ' << shape.size();
    for (auto e : shape) want << ' ' << e;
    if (line != want.str()) throw ConfigError("weight file: manifest entry '" + line + "' != '" + want.str() + "'");
  }
  expect_line("end");
  std::vector<std::pair<std::string, Tensor>> entries;
  for (const auto& [name, shape] : manifest) {
    Tensor t = read_tensor(is);
    if (t.shape() != shape) throw ConfigError("weight file: payload shape mismatch for " + name);
    entries.emplace_back(name, std::move(t));
  }
  return Weights(cfg, std::move(entries));
}

// ---------------------------------------------------------------------------

Tensor ConditioningSet::null_tokens() const {
  return null_embedding.reshaped({1, null_embedding.size()});
}

ConditioningSet ConditioningSet::with_token(std::size_t index, const Tensor& embedding) const {
  if (index >= token_count()) {
    throw ArgumentError("token index " + std::to_string(index) + " outside conditioning of " +
                        std::to_string(token_count()) + " tokens");
  }
  if (embedding.size() != text_dim()) throw ShapeError("concept embedding dimension mismatch");
  ConditioningSet out = *this;
  for (std::size_t j = 0; j < text_dim(); ++j) out.tokens.at(index, j) = embedding[j];
  return out;
}

void ConditioningSet::validate(std::size_t text_dim_expected) const {
  if (tokens.rank() != 2 || tokens.dim(0) == 0) throw ShapeError("conditioning needs at least one token");
  if (tokens.dim(1) != text_dim_expected) throw ShapeError("conditioning token dim mismatch");
  if (null_embedding.size() != text_dim_expected) throw ShapeError("null embedding dim mismatch");
  require_finite(tokens, "conditioning tokens");
  require_finite(null_embedding, "null embedding");
}

std::string_view variable_class_name(VariableClass cls) {
  switch (cls) {
    case VariableClass::kSelfMap: return "self_map";
    case VariableClass::kCrossMap: return "cross_map";
    case VariableClass::kSelfOut: return "self_out";
  }
  return "?";
}

const std::vector<Tensor>& StepRecord::of(VariableClass cls) const {
  switch (cls) {
    case VariableClass::kSelfMap: return self_maps;
    case VariableClass::kCrossMap: return cross_maps;
    case VariableClass::kSelfOut: return self_outs;
  }
  return self_maps;
}

Tensor VariableOverride::apply(const Tensor& live) const {
  if (source.shape() != live.shape()) {
    throw ShapeError(std::string("override ") + std::string(variable_class_name(target)) + " at layer " +
                     std::to_string(layer) + ": source " + shape_str(source.shape()) + " vs live " +
                     shape_str(live.shape()));
  }
  if (blend) return blend(source, live);
  if (!mask) return source;
  if (mask->shape() != live.shape()) throw ShapeError("override mask shape mismatch");
  Tensor out(live.shape());
  const auto& m = *mask;
  for (std::size_t i = 0; i < live.size(); ++i) out[i] = source[i] * (1.0f - m[i]) + live[i] * m[i];
  return out;
}

// ---------------------------------------------------------------------------

namespace detail {

std::string block_name(std::size_t slot, std::size_t levels) {
  if (slot + 1 < levels) return "down" + std::to_string(slot);
  if (slot + 1 == levels) return "mid";
  return "up" + std::to_string(2 * levels - 2 - slot);
}

std::size_t block_level(std::size_t slot, std::size_t levels) {
  return slot < levels ? slot : 2 * levels - 2 - slot;
}

Tensor time_embedding(int t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor emb({1, dim});
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    emb[i] = static_cast<float>(std::sin(t * freq));
    emb[half + i] = static_cast<float>(std::cos(t * freq));
  }
  return emb;
}

Tensor patchify(const Tensor& z) {
  const std::size_t H = z.dim(0), W = z.dim(1), C = z.dim(2);
  const std::size_t h = H / 2, w = W / 2;
  Tensor out({h * w, 4 * C});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t di = 0; di < 2; ++di)
        for (std::size_t dj = 0; dj < 2; ++dj)
          for (std::size_t c = 0; c < C; ++c)
            out.at(i * w + j, (di * 2 + dj) * C + c) = z.at(2 * i + di, 2 * j + dj, c);
  return out;
}

Tensor depatchify(const Tensor& x, std::size_t H, std::size_t W, std::size_t C) {
  const std::size_t w = W / 2;
  Tensor out({H, W, C});
  for (std::size_t i = 0; i < H / 2; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t di = 0; di < 2; ++di)
        for (std::size_t dj = 0; dj < 2; ++dj)
          for (std::size_t c = 0; c < C; ++c)
            out.at(2 * i + di, 2 * j + dj, c) = x.at(i * w + j, (di * 2 + dj) * C + c);
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
  Tensor y = matmul(x, w);
  if (bias) {
    const std::size_t n = y.dim(0), c = y.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) y.at(i, j) += (*bias)[j];
  }
  return y;
}

namespace {
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Tensor silu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(x[i] * sigmoid(x[i]));
  return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& grad) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = sigmoid(x[i]);
    g[i] = static_cast<float>(grad[i] * (s + x[i] * s * (1.0 - s)));
  }
  return g;
}

Tensor conv3x3(const Tensor& x, std::size_t h, std::size_t w, const Tensor& kernel) {
  const std::size_t cin = kernel.dim(2), cout = kernel.dim(3);
  Tensor y({h * w, cout});
  std::vector<double> acc(cout);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t ky = 0; ky < 3; ++ky) {
        if (i + ky < 1 || i + ky - 1 >= h) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          if (j + kx < 1 || j + kx - 1 >= w) continue;
          const std::size_t src = (i + ky - 1) * w + (j + kx - 1);
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double xv = x.at(src, ci);
            const float* kr = &kernel.data()[((ky * 3 + kx) * cin + ci) * cout];
            for (std::size_t co = 0; co < cout; ++co) acc[co] += xv * kr[co];
          }
        }
      }
      for (std::size_t co = 0; co < cout; ++co) y.at(i * w + j, co) = static_cast<float>(acc[co]);
    }
  }
  return y;
}

Tensor conv3x3_backward(const Tensor& grad, std::size_t h, std::size_t w, const Tensor& kernel) {
  const std::size_t cin = kernel.dim(2), cout = kernel.dim(3);
  std::vector<double> acc(h * w * cin, 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const float* g = &grad.data()[(i * w + j) * cout];
      for (std::size_t ky = 0; ky < 3; ++ky) {
        if (i + ky < 1 || i + ky - 1 >= h) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          if (j + kx < 1 || j + kx - 1 >= w) continue;
          const std::size_t src = (i + ky - 1) * w + (j + kx - 1);
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const float* kr = &kernel.data()[((ky * 3 + kx) * cin + ci) * cout];
            double s = 0.0;
            for (std::size_t co = 0; co < cout; ++co) s += static_cast<double>(kr[co]) * g[co];
            acc[src * cin + ci] += s;
          }
        }
      }
    }
  }
  Tensor out({h * w, cin});
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

Tensor avgpool2(const Tensor& x, std::size_t h, std::size_t w) {
  const std::size_t c = x.dim(1), h2 = h / 2, w2 = w / 2;
  Tensor y({h2 * w2, c});
  for (std::size_t i = 0; i < h2; ++i)
    for (std::size_t j = 0; j < w2; ++j)
      for (std::size_t k = 0; k < c; ++k) {
        const double s = static_cast<double>(x.at((2 * i) * w + 2 * j, k)) + x.at((2 * i) * w + 2 * j + 1, k) +
                         x.at((2 * i + 1) * w + 2 * j, k) + x.at((2 * i + 1) * w + 2 * j + 1, k);
        y.at(i * w2 + j, k) = static_cast<float>(0.25 * s);
      }
  return y;
}

Tensor avgpool2_backward(const Tensor& grad, std::size_t h, std::size_t w) {
  const std::size_t c = grad.dim(1), w2 = w / 2;
  Tensor g({h * w, c});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < c; ++k) g.at(i * w + j, k) = 0.25f * grad.at((i / 2) * w2 + j / 2, k);
  return g;
}

Tensor upsample2(const Tensor& x, std::size_t h, std::size_t w) {
  const std::size_t c = x.dim(1), W = 2 * w;
  Tensor y({4 * h * w, c});
  for (std::size_t i = 0; i < 2 * h; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t k = 0; k < c; ++k) y.at(i * W + j, k) = x.at((i / 2) * w + j / 2, k);
  return y;
}

Tensor upsample2_backward(const Tensor& grad, std::size_t h, std::size_t w) {
  const std::size_t c = grad.dim(1), W = 2 * w;
  std::vector<double> acc(h * w * c, 0.0);
  for (std::size_t i = 0; i < 2 * h; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t k = 0; k < c; ++k) acc[((i / 2) * w + j / 2) * c + k] += grad.at(i * W + j, k);
  Tensor g({h * w, c});
  for (std::size_t i = 0; i < acc.size(); ++i) g[i] = static_cast<float>(acc[i]);
  return g;
}

Tensor softmax_rows_backward(const Tensor& p, const Tensor& grad) {
  const std::size_t rows = p.dim(0), cols = p.dim(1);
  Tensor g(p.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    double inner = 0.0;
    for (std::size_t j = 0; j < cols; ++j) inner += static_cast<double>(p.at(i, j)) * grad.at(i, j);
    for (std::size_t j = 0; j < cols; ++j) g.at(i, j) = static_cast<float>(p.at(i, j) * (grad.at(i, j) - inner));
  }
  return g;
}

namespace {

Tensor add_bias_rows(Tensor x, const Tensor& bias) {
  const std::size_t n = x.dim(0), c = x.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) x.at(i, j) += bias[j];
  return x;
}

Tensor apply_overrides(Tensor live, VariableClass cls, std::size_t slot,
                       std::span<const VariableOverride> overrides) {
  for (const auto& ov : overrides) {
    if (ov.target == cls && ov.layer == slot) live = ov.apply(live);
  }
  return live;
}

struct GraphRunner {
  const Weights& weights;
  const Tensor& tokens;
  std::span<const VariableOverride> overrides;
  StepRecord* record;
  ForwardCache* cache;
  double inv_sqrt_d;
  std::size_t levels;

  Tensor res_block(const Tensor& x, std::size_t h, std::size_t w, const std::string& name,
                   const Tensor& time_bias, BlockCache* bc) {
    if (bc) bc->res.x_in = x;
    Tensor y = conv3x3(silu(x), h, w, weights.get(name + ".res.conv"));
    const Tensor& b = weights.get(name + ".res.bias");
    for (std::size_t i = 0; i < y.dim(0); ++i)
      for (std::size_t j = 0; j < y.dim(1); ++j) y.at(i, j) += x.at(i, j) + b[j] + time_bias[j];
    return y;
  }

  Tensor attn_block(const Tensor& x, std::size_t slot, const std::string& name, BlockCache* bc) {
    Tensor q = matmul(x, weights.get(name + ".attn.q"));
    Tensor k = matmul(x, weights.get(name + ".attn.k"));
    Tensor v = matmul(x, weights.get(name + ".attn.v"));
    Tensor m = softmax_rows(scale(matmul_nt(q, k), inv_sqrt_d));
    m = apply_overrides(std::move(m), VariableClass::kSelfMap, slot, overrides);
    Tensor phi = matmul(m, v);
    phi = apply_overrides(std::move(phi), VariableClass::kSelfOut, slot, overrides);
    Tensor x_mid = add(x, matmul(phi, weights.get(name + ".attn.o")));

    Tensor qc = matmul(x_mid, weights.get(name + ".cross.q"));
    Tensor kc = matmul(tokens, weights.get(name + ".cross.k"));
    Tensor vc = matmul(tokens, weights.get(name + ".cross.v"));
    Tensor a = softmax_rows(scale(matmul_nt(qc, kc), inv_sqrt_d));
    a = apply_overrides(std::move(a), VariableClass::kCrossMap, slot, overrides);
    Tensor out = add(x_mid, matmul(matmul(a, vc), weights.get(name + ".cross.o")));

    if (record) {
      record->self_maps[slot] = m;
      record->cross_maps[slot] = a;
      record->self_outs[slot] = phi;
    }
    if (bc) {
      bc->attn = AttnCache{x, std::move(q), std::move(k), std::move(v), std::move(m),
                           std::move(x_mid), std::move(qc), std::move(kc), std::move(vc), std::move(a)};
    }
    return out;
  }

  Tensor block(const Tensor& x, std::size_t slot, std::size_t h, std::size_t w, const Tensor& time_bias) {
    const std::string name = block_name(slot, levels);
    BlockCache* bc = nullptr;
    if (cache) {
      bc = &cache->blocks[slot];
      bc->h = h;
      bc->w = w;
    }
    Tensor y = res_block(x, h, w, name, time_bias, bc);
    return attn_block(y, slot, name, bc);
  }
};

}  // namespace

Tensor run_unet(const Weights& weights, const Tensor& z, int t, const Tensor& tokens,
                std::span<const VariableOverride> overrides, StepRecord* record, ForwardCache* cache) {
  const auto& cfg = weights.config();
  const std::size_t levels = cfg.levels();
  const std::size_t slots = 2 * levels - 1;
  const std::size_t H = z.dim(0), W = z.dim(1), C = z.dim(2);

  for (const auto& ov : overrides) {
    if (ov.layer >= slots) {
      throw ArgumentError("override layer selector " + std::to_string(ov.layer) + " out of range (" +
                          std::to_string(slots) + " attention layers)");
    }
  }
  if (record) {
    record->self_maps.assign(slots, {});
    record->cross_maps.assign(slots, {});
    record->self_outs.assign(slots, {});
  }
  if (cache) {
    cache->height = H;
    cache->width = W;
    cache->blocks.assign(slots, {});
  }

  // time conditioning: one bias vector per level
  const Tensor tau = silu(linear(time_embedding(t, cfg.time_dim), weights.get("time.fc"), &weights.get("time.fc_bias")));
  std::vector<Tensor> time_bias;
  for (std::size_t l = 0; l < levels; ++l) time_bias.push_back(matmul(tau, weights.get("time.level" + std::to_string(l))));

  GraphRunner g{weights, tokens, overrides, record, cache, 1.0 / std::sqrt(static_cast<double>(cfg.attention_dim)), levels};

  std::size_t h = H / 2, w = W / 2;
  Tensor x = add_bias_rows(matmul(patchify(z), weights.get("in.proj")), weights.get("in.bias"));

  std::vector<Tensor> skips;
  for (std::size_t l = 0; l + 1 < levels; ++l) {
    x = g.block(x, l, h, w, time_bias[l]);
    skips.push_back(x);
    x = matmul(avgpool2(x, h, w), weights.get("down" + std::to_string(l) + ".proj"));
    h /= 2;
    w /= 2;
  }
  x = g.block(x, levels - 1, h, w, time_bias[levels - 1]);
  for (std::size_t l = levels - 1; l-- > 0;) {
    x = upsample2(matmul(x, weights.get("up" + std::to_string(l) + ".proj")), h, w);
    h *= 2;
    w *= 2;
    x = add(x, skips[l]);
    x = g.block(x, 2 * levels - 2 - l, h, w, time_bias[l]);
  }
  if (cache) cache->out_in = x;
  Tensor y = add_bias_rows(matmul(silu(x), weights.get("out.proj")), weights.get("out.bias"));
  Tensor eps = depatchify(y, H, W, C);
  require_finite(eps, "denoiser output");
  return eps;
}

}  // namespace detail

// ---------------------------------------------------------------------------

Denoiser::Denoiser(Weights weights) : weights_(std::move(weights)) {}

std::vector<LayerInfo> Denoiser::layers(std::size_t height, std::size_t width) const {
  const std::size_t levels = config().levels();
  std::vector<LayerInfo> out;
  for (std::size_t slot = 0; slot < layer_count(); ++slot) {
    const std::size_t level = detail::block_level(slot, levels);
    LayerInfo info;
    info.slot = slot;
    info.level = level;
    info.height = height >> (level + 1);
    info.width = width >> (level + 1);
    info.channels = config().channels[level];
    info.name = detail::block_name(slot, levels);
    out.push_back(std::move(info));
  }
  return out;
}

void Denoiser::check_latent(const Tensor& z) const {
  const std::size_t mult = config().spatial_multiple();
  if (z.rank() != 3 || z.dim(2) != config().in_channels || z.dim(0) == 0 || z.dim(1) == 0 ||
      z.dim(0) % mult != 0 || z.dim(1) % mult != 0) {
    throw ShapeError("latent " + shape_str(z.shape()) + " does not fit the denoiser (need HxWx" +
                     std::to_string(config().in_channels) + " with H, W multiples of " + std::to_string(mult) + ")");
  }
  require_finite(z, "latent");
}

namespace {

void check_tokens(const Tensor& tokens, const DenoiserConfig& cfg) {
  if (tokens.rank() != 2 || tokens.dim(0) == 0 || tokens.dim(1) != cfg.text_dim) {
    throw ShapeError("conditioning tokens " + shape_str(tokens.shape()) + " do not match text dim " +
                     std::to_string(cfg.text_dim));
  }
  require_finite(tokens, "conditioning tokens");
}

}  // namespace

Denoiser::Output Denoiser::predict_noise(const Tensor& z, int t, const Tensor& tokens, bool record) const {
  return predict_noise_with_overrides(z, t, tokens, {}, record);
}

Denoiser::Output Denoiser::predict_noise_with_overrides(const Tensor& z, int t, const Tensor& tokens,
                                                        std::span<const VariableOverride> overrides,
                                                        bool record) const {
  check_latent(z);
  check_tokens(tokens, config());
  Output out;
  StepRecord rec;
  out.eps = detail::run_unet(weights_, z, t, tokens, overrides, record ? &rec : nullptr, nullptr);
  if (record) out.record = std::move(rec);
  return out;
}

EnergyGradient Denoiser::energy_gradient(const Tensor& z, int t, const Tensor& tokens,
                                         const CrossMapEnergy& energy) const {
  check_latent(z);
  check_tokens(tokens, config());
  if (energy.token && *energy.token >= tokens.dim(0)) {
    throw ArgumentError("energy token index " + std::to_string(*energy.token) + " outside conditioning of " +
                        std::to_string(tokens.dim(0)) + " tokens");
  }
  detail::ForwardCache cache;
  StepRecord rec;
  detail::run_unet(weights_, z, t, tokens, {}, &rec, &cache);
  const auto infos = layers(z.dim(0), z.dim(1));
  std::vector<Tensor> grad_maps(infos.size());
  EnergyGradient out;
  out.energy = energy.fn ? energy.fn(rec.cross_maps, infos, grad_maps) : 0.0;
  grad_maps.resize(infos.size());
  out.grad = Tensor(z.shape());
  detail::backward_unet(weights_, cache, tokens, nullptr, grad_maps, out.grad, nullptr);
  return out;
}

TokenGradient Denoiser::eps_vjp(const Tensor& z, int t, const Tensor& tokens, const Tensor& grad_eps) const {
  check_latent(z);
  check_tokens(tokens, config());
  if (grad_eps.shape() != z.shape()) throw ShapeError("eps_vjp: gradient shape mismatch");
  detail::ForwardCache cache;
  detail::run_unet(weights_, z, t, tokens, {}, nullptr, &cache);
  TokenGradient out;
  out.grad_z = Tensor(z.shape());
  out.grad_tokens = Tensor(tokens.shape());
  const std::vector<Tensor> no_maps(layer_count());
  detail::backward_unet(weights_, cache, tokens, &grad_eps, no_maps, out.grad_z, &out.grad_tokens);
  return out;
}

}  // namespace lswap
