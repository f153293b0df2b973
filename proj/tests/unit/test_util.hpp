#pragma once

#include <filesystem>
#include <string>

#include "latentswap/denoiser.hpp"
#include "latentswap/pipeline.hpp"
#include "latentswap/tensor.hpp"
#include "reference.hpp"

namespace testutil {

inline lswap::Tensor gaussian(std::uint64_t seed, lswap::Shape shape, double stddev = 1.0) {
  lswap::SeededRng rng(seed);
  return rng.gaussian_tensor(std::move(shape), stddev);
}

inline lswap::Tensor uniform(std::uint64_t seed, lswap::Shape shape, double lo = 0.0, double hi = 1.0) {
  lswap::SeededRng rng(seed);
  return rng.uniform_tensor(std::move(shape), lo, hi);
}

/// Weights with full-strength residual branches and output, so internal
/// mistakes show up in eps instead of being damped.
inline lswap::DenoiserConfig loud_config(std::uint64_t seed = 7) {
  lswap::DenoiserConfig c;
  c.weight_seed = seed;
  c.residual_gain = 1.0;
  c.output_gain = 1.0;
  return c;
}

inline lswap::ConditioningSet prompt(std::size_t dim = 16, std::uint64_t seed = 0) {
  return lswap::encode_prompt(lswap::split_words("a photo of a object"), dim, seed);
}

/// Binary H x W field with a filled rectangle.
inline lswap::Tensor rect(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0, std::size_t y1,
                          std::size_t x1) {
  lswap::Tensor m({h, w});
  for (std::size_t i = y0; i < y1; ++i)
    for (std::size_t j = x0; j < x1; ++j) m.at(i, j) = 1.0f;
  return m;
}

inline ref::Mat to_mat(const lswap::Tensor& field) {
  ref::Mat m(field.dim(0), field.dim(1));
  for (std::size_t i = 0; i < field.size(); ++i) m.v[i] = field[i];
  return m;
}

inline std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::path(LATENTSWAP_TEST_SCRATCH) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline double max_abs_diff(const std::vector<double>& a, const lswap::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
