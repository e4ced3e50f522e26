#include "attune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "attune/errors.hpp"

ATTUNE_NAMESPACE_BEGIN

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape_));
  }
  values_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<Real> values) : shape_(std::move(shape)), values_(std::move(values)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape_));
  }
  if (shape_size(shape_) != values_.size()) {
    throw DimensionError("shape " + shape_to_string(shape_) + " holds " + std::to_string(shape_size(shape_)) +
                         " values, got " + std::to_string(values_.size()));
  }
}

Tensor Tensor::scalar(Real value) { return Tensor(Shape{1}, value); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw DimensionError("axis out of range for shape " + shape_to_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw DimensionError("index rank does not match " + shape_to_string(shape_));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for " + shape_to_string(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

Real& Tensor::at(std::initializer_list<std::size_t> index) { return values_[offset(index)]; }
Real Tensor::at(std::initializer_list<std::size_t> index) const { return values_[offset(index)]; }

Real Tensor::item() const {
  if (values_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape_));
  return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_size(shape) != values_.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), std::move(values_));
}

void Tensor::fill(Real value) { std::fill(values_.begin(), values_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](Real v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite values in ") + what);
}

ATTUNE_NAMESPACE_END
