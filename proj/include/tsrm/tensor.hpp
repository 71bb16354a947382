#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace tsrm {

#ifdef TSRM_FLOAT32
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major n-dimensional array. A plain value type; gradient tracking
// lives on the Tape (see autodiff.hpp).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, real fill = 0);
  Tensor(Shape shape, std::vector<real> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1); }
  static Tensor scalar(real v) { return Tensor(Shape{1}, v); }
  static Tensor from(Shape shape, std::initializer_list<real> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const;
  bool empty() const { return data_.empty(); }

  std::span<real> data() { return data_; }
  std::span<const real> data() const { return data_; }
  real* ptr() { return data_.data(); }
  const real* ptr() const { return data_.data(); }
  const std::vector<real>& vec() const { return data_; }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }
  real& at(std::initializer_list<std::size_t> index);
  real at(std::initializer_list<std::size_t> index) const;

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;
  void fill(real v);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<real> data_;
};

}  // namespace tsrm
