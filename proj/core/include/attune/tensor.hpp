#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "attune/config.hpp"

ATTUNE_NAMESPACE_BEGIN

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of Real values.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> values);

  static Tensor scalar(Real value);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  Real* data() noexcept { return values_.data(); }
  const Real* data() const noexcept { return values_.data(); }
  std::span<Real> values() noexcept { return values_; }
  std::span<const Real> values() const noexcept { return values_; }

  Real& operator[](std::size_t i) { return values_[i]; }
  Real operator[](std::size_t i) const { return values_[i]; }

  /// Multi-index access; bounds are checked.
  Real& at(std::initializer_list<std::size_t> index);
  Real at(std::initializer_list<std::size_t> index) const;

  /// The single value of a one-element tensor.
  Real item() const;

  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(Real value);
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<Real> values_;
};

/// Throws NumericError naming `what` if any value is NaN or infinite.
void require_finite(const Tensor& t, const char* what);

ATTUNE_NAMESPACE_END
