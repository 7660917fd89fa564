#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace maproto {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles. The last axis is contiguous.
///
/// Volumetric tensors follow (N, C, X, Y, Z) order throughout the library;
/// single-subject tensors drop the leading batch axis.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double value) { return Tensor(std::move(shape), value); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;
  void fill(double value);

  bool all_finite() const;
  double sum() const;
  double max() const;
  double min() const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

/// Extents of a 5-axis (N, C, X, Y, Z) tensor, with flat-offset helpers.
struct Dims5 {
  std::size_t n = 1, c = 1, x = 1, y = 1, z = 1;

  static Dims5 of(const Tensor& t);
  std::size_t spatial() const { return x * y * z; }
  std::size_t numel() const { return n * c * x * y * z; }
  std::size_t index(std::size_t in, std::size_t ic, std::size_t ix, std::size_t iy,
                    std::size_t iz) const {
    return (((in * c + ic) * x + ix) * y + iy) * z + iz;
  }
  Shape shape() const { return {n, c, x, y, z}; }
};

/// Throws std::invalid_argument unless `t` is a rank-5 tensor with positive extents.
void require_volume_batch(const Tensor& t, const char* what);

/// Swaps two axes of a tensor, materialising the result.
Tensor transpose(const Tensor& t, std::size_t a, std::size_t b);

/// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace maproto
