#include "latentswap/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

#include "latentswap/error.hpp"

namespace lswap {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor payload of " + std::to_string(data_.size()) + " values does not fill " +
                     shape_str(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::operator==(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  // memcmp-like comparison so that -0.0f != 0.0f and NaN payloads compare by bits
  return std::equal(data_.begin(), data_.end(), other.data_.begin(), [](float x, float y) {
    return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
  });
}

// ---------------------------------------------------------------------------

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

std::uint64_t SeededRng::next_u64() {
  ++position_;
  return engine_();
}

double SeededRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double SeededRng::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Tensor SeededRng::gaussian_tensor(Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(stddev * gaussian());
  return t;
}

Tensor SeededRng::uniform_tensor(Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(lo + (hi - lo) * uniform());
  return t;
}

// ---------------------------------------------------------------------------

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, std::string_view what) {
  if (!all_finite(t)) throw NumericError(std::string(what) + ": non-finite value");
}

namespace {

void require_rank(const Tensor& t, std::size_t rank, std::string_view op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows");
  require_finite(x, "softmax_rows input");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out(x.shape());
  std::vector<double> e(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, static_cast<double>(x.at(i, j)));
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      e[j] = std::exp(static_cast<double>(x.at(i, j)) - mx);
      total += e[j];
    }
    for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = static_cast<float>(e[j] / total);
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, Padding padding) {
  require_rank(x, 2, "conv2d");
  require_rank(kernel, 2, "conv2d kernel");
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ArgumentError("conv2d: kernel extents must be odd, got " + shape_str(kernel.shape()));
  }
  const auto h = static_cast<std::ptrdiff_t>(x.dim(0));
  const auto w = static_cast<std::ptrdiff_t>(x.dim(1));
  const auto ry = static_cast<std::ptrdiff_t>(kh / 2);
  const auto rx = static_cast<std::ptrdiff_t>(kw / 2);
  Tensor out(x.shape());
  for (std::ptrdiff_t i = 0; i < h; ++i) {
    for (std::ptrdiff_t j = 0; j < w; ++j) {
      double acc = 0.0;
      for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(kh); ++a) {
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(kw); ++b) {
          std::ptrdiff_t y = i + a - ry, xx = j + b - rx;
          double v;
          if (y < 0 || y >= h || xx < 0 || xx >= w) {
            if (padding == Padding::kZero) continue;
            y = std::clamp<std::ptrdiff_t>(y, 0, h - 1);
            xx = std::clamp<std::ptrdiff_t>(xx, 0, w - 1);
          }
          v = x.at(static_cast<std::size_t>(y), static_cast<std::size_t>(xx));
          acc += static_cast<double>(kernel.at(static_cast<std::size_t>(a), static_cast<std::size_t>(b))) * v;
        }
      }
      out.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = static_cast<float>(acc);
    }
  }
  require_finite(out, "conv2d output");
  return out;
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;  // weight of hi
};

// Corner-aligned source coordinates: out index i samples at i * (in-1)/(out-1).
std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    if (in == out) {
      taps[i] = {i, i, 0.0};
      continue;
    }
    const double pos = out == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) /
                                            static_cast<double>(out - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    lo = std::min(lo, in - 1);
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, pos - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 2, "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw ArgumentError("resize_bilinear: zero target extent");
  if (x.dim(0) == out_h && x.dim(1) == out_w) return x;
  const auto ty = bilinear_taps(x.dim(0), out_h);
  const auto tx = bilinear_taps(x.dim(1), out_w);
  Tensor out({out_h, out_w});
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      const auto& a = ty[i];
      const auto& b = tx[j];
      const double top = (1.0 - b.frac) * x.at(a.lo, b.lo) + b.frac * x.at(a.lo, b.hi);
      const double bot = (1.0 - b.frac) * x.at(a.hi, b.lo) + b.frac * x.at(a.hi, b.hi);
      out.at(i, j) = static_cast<float>((1.0 - a.frac) * top + a.frac * bot);
    }
  }
  return out;
}

Tensor resize_bilinear_adjoint(const Tensor& grad_out, std::size_t in_h, std::size_t in_w) {
  require_rank(grad_out, 2, "resize_bilinear_adjoint");
  if (in_h == 0 || in_w == 0) throw ArgumentError("resize_bilinear_adjoint: zero source extent");
  const std::size_t out_h = grad_out.dim(0), out_w = grad_out.dim(1);
  if (in_h == out_h && in_w == out_w) return grad_out;
  const auto ty = bilinear_taps(in_h, out_h);
  const auto tx = bilinear_taps(in_w, out_w);
  std::vector<double> acc(in_h * in_w, 0.0);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      const double g = grad_out.at(i, j);
      const auto& a = ty[i];
      const auto& b = tx[j];
      acc[a.lo * in_w + b.lo] += g * (1.0 - a.frac) * (1.0 - b.frac);
      acc[a.lo * in_w + b.hi] += g * (1.0 - a.frac) * b.frac;
      acc[a.hi * in_w + b.lo] += g * a.frac * (1.0 - b.frac);
      acc[a.hi * in_w + b.hi] += g * a.frac * b.frac;
    }
  }
  Tensor out({in_h, in_w});
  for (std::size_t k = 0; k < acc.size(); ++k) out[k] = static_cast<float>(acc[k]);
  return out;
}

Tensor gaussian_kernel(double sigma, int radius) {
  if (!(sigma > 0.0)) throw ArgumentError("gaussian_kernel: sigma must be positive");
  if (radius < 0) throw ArgumentError("gaussian_kernel: negative radius");
  const auto n = static_cast<std::size_t>(2 * radius + 1);
  std::vector<double> vals(n * n);
  double total = 0.0;
  for (int a = -radius; a <= radius; ++a) {
    for (int b = -radius; b <= radius; ++b) {
      const double v = std::exp(-static_cast<double>(a * a + b * b) / (2.0 * sigma * sigma));
      vals[static_cast<std::size_t>(a + radius) * n + static_cast<std::size_t>(b + radius)] = v;
      total += v;
    }
  }
  Tensor k({n, n});
  for (std::size_t i = 0; i < vals.size(); ++i) k[i] = static_cast<float>(vals[i] / total);
  return k;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out({n, m});
  std::vector<double> row(m);
  const float* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      const float* br = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * br[j];
    }
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = static_cast<float>(row[j]);
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " * " + shape_str(b.shape()) + "^T");
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  Tensor out({n, m});
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const float* ar = pa + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const float* br = pb + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(ar[p]) * br[p];
      out.at(i, j) = static_cast<float>(acc);
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_tn");
  require_rank(b, 2, "matmul_tn");
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("matmul_tn: " + shape_str(a.shape()) + "^T * " + shape_str(b.shape()));
  }
  const std::size_t k = a.dim(0), n = a.dim(1), m = b.dim(1);
  std::vector<double> acc(n * m, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      const double av = a.at(p, i);
      if (av == 0.0) continue;
      double* row = acc.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * b.at(p, j);
    }
  }
  Tensor out({n, m});
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<float>(s * a[i]);
  return out;
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(y[i] + alpha * x[i]);
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (float v : a.data()) m = std::max(m, static_cast<double>(std::fabs(v)));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

double sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return acc;
}

}  // namespace lswap
