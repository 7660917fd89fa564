#include "maproto/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace maproto {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw std::invalid_argument("Tensor: data size " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw std::out_of_range("Tensor::at: rank mismatch");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw std::out_of_range("Tensor::at: index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::max() const {
  if (data_.empty()) return -std::numeric_limits<double>::infinity();
  return *std::max_element(data_.begin(), data_.end());
}

double Tensor::min() const {
  if (data_.empty()) return std::numeric_limits<double>::infinity();
  return *std::min_element(data_.begin(), data_.end());
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw std::invalid_argument("Tensor +=: shape " + shape_str(shape_) + " vs " +
                                shape_str(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

Dims5 Dims5::of(const Tensor& t) {
  if (t.rank() != 5) throw std::invalid_argument("expected rank-5 tensor, got " + shape_str(t.shape()));
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), t.dim(4)};
}

void require_volume_batch(const Tensor& t, const char* what) {
  if (t.rank() != 5) {
    throw std::invalid_argument(std::string(what) + ": expected (N,C,X,Y,Z), got " +
                                shape_str(t.shape()));
  }
  for (auto d : t.shape()) {
    if (d == 0) throw std::invalid_argument(std::string(what) + ": empty tensor " + shape_str(t.shape()));
  }
}

Tensor transpose(const Tensor& t, std::size_t a, std::size_t b) {
  const std::size_t r = t.rank();
  if (a >= r || b >= r) throw std::invalid_argument("transpose: axis out of range");
  if (a == b) return t;
  Shape out_shape = t.shape();
  std::swap(out_shape[a], out_shape[b]);

  std::vector<std::size_t> in_strides(r), out_strides(r);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_strides[i] = s;
    s *= t.dim(i);
  }
  s = 1;
  for (std::size_t i = r; i-- > 0;) {
    out_strides[i] = s;
    s *= out_shape[i];
  }
  // Input stride seen from each output axis.
  std::vector<std::size_t> src_strides = in_strides;
  std::swap(src_strides[a], src_strides[b]);

  Tensor out(out_shape);
  std::vector<std::size_t> idx(r, 0);
  const std::size_t inner = out_shape[r - 1];
  const std::size_t inner_stride = src_strides[r - 1];
  const double* src = t.raw();
  double* dst = out.raw();
  const std::size_t total = out.numel();
  for (std::size_t o = 0; o < total; o += inner) {
    std::size_t base = 0;
    for (std::size_t i = 0; i + 1 < r; ++i) base += idx[i] * src_strides[i];
    for (std::size_t k = 0; k < inner; ++k) dst[o + k] = src[base + k * inner_stride];
    for (std::size_t i = r - 1; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("max_abs_diff: shape " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace maproto
