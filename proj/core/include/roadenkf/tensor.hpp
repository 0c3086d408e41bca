#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace roadenkf::ad {

enum class Kind : std::uint8_t { real = 0, complex = 1 };

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

/// 64-byte aligned allocation. Vectorized kernels choose their scalar peel
/// from the buffer address, so a fixed alignment keeps results independent of
/// where the allocator happens to place a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}  // NOLINT: rebinding

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;
std::string shape_str(const Shape& shape);

/// Dense row-major array of 64-bit floats. Complex tensors store interleaved
/// (re, im) pairs, so the buffer holds 2 * numel() doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Kind kind = Kind::real);
  Tensor(Shape shape, std::vector<double> data, Kind kind = Kind::real);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape, Kind kind = Kind::real) { return Tensor(std::move(shape), kind); }
  static Tensor full(Shape shape, double v);
  static Tensor identity(std::size_t n);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  Kind kind() const noexcept { return kind_; }
  bool is_complex() const noexcept { return kind_ == Kind::complex; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const;
  /// Logical element count (complex entries count once).
  std::size_t numel() const noexcept { return numel_; }
  /// Number of doubles in the buffer.
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return {data_.data(), data_.size()}; }
  std::span<const double> data() const noexcept { return {data_.data(), data_.size()}; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }
  std::complex<double>* craw() noexcept { return reinterpret_cast<std::complex<double>*>(data_.data()); }
  const std::complex<double>* craw() const noexcept {
    return reinterpret_cast<const std::complex<double>*>(data_.data());
  }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_.back() + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_.back() + j]; }
  std::complex<double> cat(std::size_t flat) const { return craw()[flat]; }

  /// Value of a single-element real tensor.
  double item() const;

  /// Same buffer, new shape (element counts must agree).
  Tensor reshaped(Shape shape) const;

  void fill(double v);
  bool all_finite() const noexcept;

 private:
  Shape shape_;
  Kind kind_ = Kind::real;
  std::size_t numel_ = 0;
  Buffer data_;
};

bool same_shape(const Tensor& a, const Tensor& b) noexcept;

/// Bitwise equality of shape, kind and payload.
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

/// max_i |a_i - b_i|; shapes must agree.
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a) noexcept;

}  // namespace roadenkf::ad
