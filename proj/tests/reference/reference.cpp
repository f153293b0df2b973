#include "reference.hpp"

#include <cmath>
#include <string>

namespace ref {

namespace {

Mat get(const lswap::Weights& w, const std::string& name) { return from_tensor(w.get(name)); }

Mat mul(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

Mat mul_t(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(j, k);
      c(i, j) = s;
    }
  return c;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

Mat softmax(const Mat& x, double scale) {
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    std::vector<double> row(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) row[j] = x(i, j) * scale;
    const auto p = softmax_row(row);
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = p[j];
  }
  return out;
}

struct Runner {
  const lswap::Weights& w;
  const Mat tok;
  double inv_sqrt_d;
  std::vector<std::vector<double>> tbias;
  const CrossHook& hook;
  UNetResult& res;

  Mat block(const Mat& x, std::size_t slot, std::size_t level, const std::string& name, std::size_t h,
            std::size_t wd) {
    const std::size_t c = x.cols;
    const Mat k3 = get(w, name + ".res.conv");  // 9*c rows x c
    const Mat bias = get(w, name + ".res.bias");
    Mat y(x.rows, c);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < wd; ++j)
        for (std::size_t co = 0; co < c; ++co) {
          double s = 0.0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const long yi = static_cast<long>(i) + dy, xj = static_cast<long>(j) + dx;
              if (yi < 0 || xj < 0 || yi >= static_cast<long>(h) || xj >= static_cast<long>(wd)) continue;
              const std::size_t src = static_cast<std::size_t>(yi) * wd + static_cast<std::size_t>(xj);
              const std::size_t tap = static_cast<std::size_t>((dy + 1) * 3 + (dx + 1));
              for (std::size_t ci = 0; ci < c; ++ci) s += silu(x(src, ci)) * k3(tap * c + ci, co);
            }
          const std::size_t n = i * wd + j;
          y(n, co) = s + x(n, co) + bias(0, co) + tbias[level][co];
        }

    const Mat q = mul(y, get(w, name + ".attn.q"));
    const Mat k = mul(y, get(w, name + ".attn.k"));
    const Mat v = mul(y, get(w, name + ".attn.v"));
    const Mat m = softmax(mul_t(q, k), inv_sqrt_d);
    const Mat phi = mul(m, v);
    const Mat po = mul(phi, get(w, name + ".attn.o"));
    Mat mid(y.rows, c);
    for (std::size_t i = 0; i < mid.v.size(); ++i) mid.v[i] = y.v[i] + po.v[i];

    const Mat qc = mul(mid, get(w, name + ".cross.q"));
    const Mat kc = mul(tok, get(w, name + ".cross.k"));
    const Mat vc = mul(tok, get(w, name + ".cross.v"));
    Mat a = softmax(mul_t(qc, kc), inv_sqrt_d);
    if (hook) hook(slot, a);
    const Mat co = mul(mul(a, vc), get(w, name + ".cross.o"));
    Mat out(mid.rows, c);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = mid.v[i] + co.v[i];
    res.self_maps[slot] = m;
    res.cross_maps[slot] = a;
    res.self_outs[slot] = phi;
    return out;
  }
};

}  // namespace

Mat from_tensor(const lswap::Tensor& t) {
  if (t.rank() == 1) {
    Mat m(1, t.size());
    for (std::size_t i = 0; i < t.size(); ++i) m.v[i] = t[i];
    return m;
  }
  // every axis but the last is folded into rows
  const std::size_t cols = t.shape().back();
  Mat m(t.size() / cols, cols);
  for (std::size_t i = 0; i < t.size(); ++i) m.v[i] = t[i];
  return m;
}

std::vector<double> to_doubles(const lswap::Tensor& t) { return {t.data().begin(), t.data().end()}; }

UNetResult unet_forward(const lswap::Weights& w, const std::vector<double>& z, std::size_t H, std::size_t W,
                        std::size_t C, int t, const lswap::Tensor& tokens, const CrossHook& hook) {
  const auto& cfg = w.config();
  const std::size_t L = cfg.channels.size();
  const std::size_t slots = 2 * L - 1;
  UNetResult res;
  res.cross_maps.resize(slots);
  res.self_maps.resize(slots);
  res.self_outs.resize(slots);

  // sinusoidal timestep features
  const std::size_t td = cfg.time_dim, half = td / 2;
  Mat te(1, td);
  for (std::size_t i = 0; i < half; ++i) {
    const double f = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    te(0, i) = std::sin(t * f);
    te(0, half + i) = std::cos(t * f);
  }
  Mat tau = mul(te, get(w, "time.fc"));
  const Mat tb = get(w, "time.fc_bias");
  for (std::size_t i = 0; i < td; ++i) tau(0, i) = silu(tau(0, i) + tb(0, i));

  Runner r{w, from_tensor(tokens), 1.0 / std::sqrt(static_cast<double>(cfg.attention_dim)), {}, hook, res};
  for (std::size_t l = 0; l < L; ++l) r.tbias.push_back(mul(tau, get(w, "time.level" + std::to_string(l))).v);

  // 2x2 patches, channel-fastest inside each patch
  std::size_t h = H / 2, wd = W / 2;
  Mat patches(h * wd, 4 * C);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < wd; ++j)
      for (std::size_t p = 0; p < 4; ++p)
        for (std::size_t c = 0; c < C; ++c)
          patches(i * wd + j, p * C + c) = z[((2 * i + p / 2) * W + (2 * j + p % 2)) * C + c];
  Mat x = mul(patches, get(w, "in.proj"));
  const Mat ib = get(w, "in.bias");
  for (std::size_t n = 0; n < x.rows; ++n)
    for (std::size_t c = 0; c < x.cols; ++c) x(n, c) += ib(0, c);

  std::vector<Mat> skips;
  for (std::size_t l = 0; l + 1 < L; ++l) {
    x = r.block(x, l, l, "down" + std::to_string(l), h, wd);
    skips.push_back(x);
    Mat pooled(h / 2 * (wd / 2), x.cols);
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < wd / 2; ++j)
        for (std::size_t c = 0; c < x.cols; ++c)
          pooled(i * (wd / 2) + j, c) = (x((2 * i) * wd + 2 * j, c) + x((2 * i) * wd + 2 * j + 1, c) +
                                         x((2 * i + 1) * wd + 2 * j, c) + x((2 * i + 1) * wd + 2 * j + 1, c)) /
                                        4.0;
    x = mul(pooled, get(w, "down" + std::to_string(l) + ".proj"));
    h /= 2;
    wd /= 2;
  }
  x = r.block(x, L - 1, L - 1, "mid", h, wd);
  for (std::size_t l = L - 1; l-- > 0;) {
    const Mat proj = mul(x, get(w, "up" + std::to_string(l) + ".proj"));
    Mat up(4 * h * wd, proj.cols);
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * wd; ++j)
        for (std::size_t c = 0; c < proj.cols; ++c)
          up(i * 2 * wd + j, c) = proj((i / 2) * wd + j / 2, c) + skips[l](i * 2 * wd + j, c);
    h *= 2;
    wd *= 2;
    x = r.block(up, 2 * L - 2 - l, l, "up" + std::to_string(l), h, wd);
  }
  for (double& v : x.v) v = silu(v);
  Mat y = mul(x, get(w, "out.proj"));
  const Mat ob = get(w, "out.bias");
  res.eps.assign(H * W * C, 0.0);
  for (std::size_t i = 0; i < H / 2; ++i)
    for (std::size_t j = 0; j < W / 2; ++j)
      for (std::size_t p = 0; p < 4; ++p)
        for (std::size_t c = 0; c < C; ++c)
          res.eps[((2 * i + p / 2) * W + (2 * j + p % 2)) * C + c] = y(i * (W / 2) + j, p * C + c) + ob(0, p * C + c);
  return res;
}

std::vector<double> softmax_row(const std::vector<double>& row) {
  long double mx = row[0];
  for (double v : row) mx = std::max<long double>(mx, v);
  long double total = 0.0L;
  std::vector<long double> e(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) total += e[i] = std::exp(static_cast<long double>(row[i]) - mx);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(e[i] / total);
  return out;
}

Mat conv2d(const Mat& x, const Mat& k, bool replicate) {
  const long r = static_cast<long>(k.rows / 2);
  const long H = static_cast<long>(x.rows), W = static_cast<long>(x.cols);
  Mat out(x.rows, x.cols);
  for (long i = 0; i < H; ++i)
    for (long j = 0; j < W; ++j) {
      double s = 0.0;
      for (long a = -r; a <= r; ++a)
        for (long b = -r; b <= r; ++b) {
          long y = i + a, xx = j + b;
          if (replicate) {
            y = std::clamp(y, 0L, H - 1);
            xx = std::clamp(xx, 0L, W - 1);
          } else if (y < 0 || xx < 0 || y >= H || xx >= W) {
            continue;
          }
          s += k(static_cast<std::size_t>(a + r), static_cast<std::size_t>(b + r)) *
               x(static_cast<std::size_t>(y), static_cast<std::size_t>(xx));
        }
      out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = s;
    }
  return out;
}

double bilinear_at(const Mat& x, std::size_t out_h, std::size_t out_w, std::size_t i, std::size_t j) {
  const double sy = out_h > 1 ? static_cast<double>(i) * (x.rows - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(j) * (x.cols - 1) / (out_w - 1) : 0.0;
  const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, x.rows - 1), x1 = std::min(x0 + 1, x.cols - 1);
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * ((1 - fx) * x(y0, x0) + fx * x(y0, x1)) + fy * ((1 - fx) * x(y1, x0) + fx * x(y1, x1));
}

Mat resize(const Mat& x, std::size_t out_h, std::size_t out_w) {
  Mat out(out_h, out_w);
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j) out(i, j) = bilinear_at(x, out_h, out_w, i, j);
  return out;
}

Mat gaussian(double sigma, int radius) {
  const auto n = static_cast<std::size_t>(2 * radius + 1);
  Mat k(n, n);
  double total = 0.0;
  for (int a = -radius; a <= radius; ++a)
    for (int b = -radius; b <= radius; ++b)
      total += k(static_cast<std::size_t>(a + radius), static_cast<std::size_t>(b + radius)) =
          std::exp(-(a * a + b * b) / (2.0 * sigma * sigma));
  for (double& v : k.v) v /= total;
  return k;
}

Mat dilate_disc(const Mat& mask, int extent) {
  const int r = extent / 2;
  const double reach2 = (extent / 2.0) * (extent / 2.0);
  Mat out(mask.rows, mask.cols);
  for (std::size_t i = 0; i < mask.rows; ++i)
    for (std::size_t j = 0; j < mask.cols; ++j)
      for (std::size_t y = 0; y < mask.rows; ++y)
        for (std::size_t x = 0; x < mask.cols; ++x) {
          const long dy = static_cast<long>(y) - static_cast<long>(i), dx = static_cast<long>(x) - static_cast<long>(j);
          if (std::abs(dy) > r || std::abs(dx) > r) continue;
          if (static_cast<double>(dy * dy + dx * dx) <= reach2 && mask(y, x) == 1.0) out(i, j) = 1.0;
        }
  return out;
}

Mat feather(const Mat& mask, int extent, double sigma, int radius) {
  Mat s = conv2d(dilate_disc(mask, extent), gaussian(sigma, radius), true);
  for (std::size_t i = 0; i < s.v.size(); ++i) s.v[i] = mask.v[i] == 1.0 ? 1.0 : std::clamp(s.v[i], 0.0, 1.0);
  return s;
}

std::vector<double> alpha_bars(int steps, double beta_start, double beta_end) {
  std::vector<double> out{1.0};
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double beta = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
    prod *= 1.0 - beta;
    out.push_back(prod);
  }
  return out;
}

Moments weighted_moments(const Mat& values, const std::vector<double>& weights, double floor) {
  Moments m;
  double mass = 0.0;
  for (double w : weights) mass += w;
  for (std::size_t c = 0; c < values.cols; ++c) {
    double mu = 0.0;
    for (std::size_t n = 0; n < values.rows; ++n) mu += weights[n] * values(n, c);
    mu /= mass;
    double var = 0.0;
    for (std::size_t n = 0; n < values.rows; ++n) var += weights[n] * (values(n, c) - mu) * (values(n, c) - mu);
    m.mean.push_back(mu);
    m.stddev.push_back(std::max(std::sqrt(var / mass), floor));
  }
  return m;
}

std::vector<double> shape_column(const Mat& a, std::size_t k, double threshold, double tau, bool soft) {
  double lo = a(0, k), hi = a(0, k);
  for (std::size_t q = 0; q < a.rows; ++q) {
    lo = std::min(lo, a(q, k));
    hi = std::max(hi, a(q, k));
  }
  std::vector<double> out(a.rows, 0.0);
  if (!(hi > lo)) return out;
  for (std::size_t q = 0; q < a.rows; ++q) {
    const double n = (a(q, k) - lo) / (hi - lo);
    out[q] = soft ? 1.0 / (1.0 + std::exp(-(n - threshold) / tau)) : (n > threshold ? 1.0 : 0.0);
  }
  return out;
}

double shape_energy(const std::vector<Mat>& cross_maps, const std::vector<std::pair<std::size_t, std::size_t>>& grids,
                    std::size_t k, const Mat& mask, double threshold, double tau) {
  Mat acc(mask.rows, mask.cols);
  for (std::size_t l = 0; l < cross_maps.size(); ++l) {
    const auto col = shape_column(cross_maps[l], k, threshold, tau, true);
    Mat field(grids[l].first, grids[l].second);
    field.v = col;
    const Mat up = resize(field, mask.rows, mask.cols);
    for (std::size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += up.v[i] / static_cast<double>(cross_maps.size());
  }
  double e = 0.0;
  for (std::size_t i = 0; i < acc.v.size(); ++i) e += std::abs(mask.v[i] - acc.v[i]);
  return e;
}

std::vector<std::pair<std::size_t, std::size_t>> slot_grids(std::size_t levels, std::size_t H, std::size_t W) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t l = 0; l < levels; ++l) out.emplace_back(H >> (l + 1), W >> (l + 1));
  for (std::size_t l = levels - 1; l-- > 0;) out.emplace_back(H >> (l + 1), W >> (l + 1));
  return out;
}

double unet_shape_energy(const lswap::Weights& w, const std::vector<double>& z, std::size_t H, std::size_t W,
                         std::size_t C, int t, const lswap::Tensor& tokens, std::size_t k, const Mat& mask,
                         double threshold, double tau) {
  const auto res = unet_forward(w, z, H, W, C, t, tokens);
  return shape_energy(res.cross_maps, slot_grids(w.config().channels.size(), H, W), k, mask, threshold, tau);
}

namespace {

struct EnergyPiece {
  double energy = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> extrema;  // argmin, argmax of column k per layer
};

EnergyPiece energy_piece(const lswap::Weights& w, const std::vector<double>& z, std::size_t H, std::size_t W,
                         std::size_t C, int t, const lswap::Tensor& tokens, std::size_t k, const Mat& mask,
                         double threshold, double tau) {
  const auto res = unet_forward(w, z, H, W, C, t, tokens);
  EnergyPiece p;
  p.energy = shape_energy(res.cross_maps, slot_grids(w.config().channels.size(), H, W), k, mask, threshold, tau);
  for (const Mat& a : res.cross_maps) {
    std::size_t lo = 0, hi = 0;
    for (std::size_t q = 1; q < a.rows; ++q) {
      if (a(q, k) < a(lo, k)) lo = q;
      if (a(q, k) > a(hi, k)) hi = q;
    }
    p.extrema.emplace_back(lo, hi);
  }
  return p;
}

}  // namespace

std::vector<double> unet_shape_energy_fd(const lswap::Weights& w, const std::vector<double>& z, std::size_t H,
                                         std::size_t W, std::size_t C, int t, const lswap::Tensor& tokens,
                                         std::size_t k, const Mat& mask, double threshold, double tau, double h) {
  const auto centre = energy_piece(w, z, H, W, C, t, tokens, k, mask, threshold, tau).extrema;
  std::vector<double> g(z.size());
  std::vector<double> zp = z;
  for (std::size_t i = 0; i < z.size(); ++i) {
    // min-max normalization is smooth only while the column's extrema stay
    // on the same pixels, so shrink the step until both probes do
    for (double step = h;; step /= 10.0) {
      zp[i] = z[i] + step;
      const auto up = energy_piece(w, zp, H, W, C, t, tokens, k, mask, threshold, tau);
      zp[i] = z[i] - step;
      const auto down = energy_piece(w, zp, H, W, C, t, tokens, k, mask, threshold, tau);
      zp[i] = z[i];
      g[i] = (up.energy - down.energy) / (2.0 * step);
      if ((up.extrema == centre && down.extrema == centre) || step < h * 1e-4) break;
    }
  }
  return g;
}

double affine_encode(int pixel) { return pixel / 127.5 - 1.0; }

}  // namespace ref
