#include "tsrm/tensor.hpp"

#include <cmath>
#include <sstream>

#include "tsrm/error.hpp"

namespace tsrm {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, real fill) : shape_(std::move(shape)) {
  for (auto s : shape_) {
    if (s == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  data_.assign(numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<real> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto s : shape_) {
    if (s == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  if (numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
  }
}

Tensor Tensor::from(Shape shape, std::initializer_list<real> values) {
  return Tensor(std::move(shape), std::vector<real>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError("index rank " + std::to_string(index.size()) + " does not match " + shape_str(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for " + shape_str(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

real& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
real Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(real v) {
  for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (auto x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace tsrm
