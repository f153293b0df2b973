#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace lswap {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major binary32 array. Reductions in the free functions below
/// accumulate in binary64.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  float at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Same data, new extents. Throws ShapeError when the element count differs.
  Tensor reshaped(Shape shape) const;

  /// Bitwise equality of shape and payload.
  bool operator==(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Deterministic generator: mt19937_64 for the bit stream, Box-Muller for
/// normals. Same seed gives the same sequence everywhere.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return position_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double gaussian();

  Tensor gaussian_tensor(Shape shape, double stddev = 1.0);
  Tensor uniform_tensor(Shape shape, double lo = 0.0, double hi = 1.0);

 private:
  std::uint64_t seed_;
  std::uint64_t position_ = 0;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

enum class Padding { kReplicate, kZero };

/// Throws NumericError naming `what` if any element is NaN or infinite.
void require_finite(const Tensor& t, std::string_view what);
bool all_finite(const Tensor& t);

Tensor softmax_rows(const Tensor& x);

/// Single-field 2-D convolution (correlation form) with an odd kernel.
Tensor conv2d(const Tensor& x, const Tensor& kernel, Padding padding = Padding::kReplicate);

/// Corner-aligned bilinear resampling of an H x W field.
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
/// Transpose of resize_bilinear: maps a gradient on the resized field back
/// onto the in_h x in_w source field.
Tensor resize_bilinear_adjoint(const Tensor& grad_out, std::size_t in_h, std::size_t in_w);

Tensor gaussian_kernel(double sigma, int radius);

// Rank-2 products, binary64 accumulation.
Tensor matmul(const Tensor& a, const Tensor& b);     // a * b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T * b

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// y += alpha * x, in place.
void axpy(double alpha, const Tensor& x, Tensor& y);

double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);
double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);

}  // namespace lswap
