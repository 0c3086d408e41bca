#include "roadenkf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "roadenkf/error.hpp"

namespace roadenkf::ad {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, Kind kind)
    : shape_(std::move(shape)),
      kind_(kind),
      numel_(shape_numel(shape_)),
      data_(numel_ * (kind == Kind::complex ? 2 : 1), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data, Kind kind)
    : shape_(std::move(shape)), kind_(kind), numel_(shape_numel(shape_)), data_(data.begin(), data.end()) {
  const std::size_t expect = numel_ * (kind == Kind::complex ? 2 : 1);
  if (data_.size() != expect) {
    throw DimensionError("tensor payload has " + std::to_string(data_.size()) + " values, shape " +
                         shape_str(shape_) + " needs " + std::to_string(expect));
  }
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (numel_ != 1 || kind_ != Kind::real) {
    throw ContractError("item() needs a single real element, got shape " + shape_str(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel_) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

bool same_shape(const Tensor& a, const Tensor& b) noexcept {
  return a.shape() == b.shape() && a.kind() == b.kind();
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
  return same_shape(a, b) && std::memcmp(a.raw(), b.raw(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(const Tensor& a) noexcept {
  double m = 0.0;
  for (double x : a.data()) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace roadenkf::ad
