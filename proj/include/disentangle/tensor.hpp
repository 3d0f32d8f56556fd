#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace disentangle {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Dense row-major array. Carries values only; tape membership lives in Var.
template <class Scalar>
struct Tensor {
  Shape shape;
  std::vector<Scalar> values;

  Tensor() = default;

  explicit Tensor(Shape s, Scalar fill = Scalar(0)) : shape(std::move(s)), values(numel(shape), fill) {
    check_dims();
  }

  Tensor(Shape s, std::vector<Scalar> v) : shape(std::move(s)), values(std::move(v)) {
    check_dims();
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, std::vector<Scalar>{v}); }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  std::size_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return size() / last_dim(); }

  Scalar* data() { return values.data(); }
  const Scalar* data() const { return values.data(); }
  Scalar& operator[](std::size_t i) { return values[i]; }
  const Scalar& operator[](std::size_t i) const { return values[i]; }

  Scalar item() const {
    if (values.size() != 1) {
      throw ShapeError("item() on non-scalar tensor of shape " + to_string(shape));
    }
    return values[0];
  }

  bool all_finite() const {
    for (const Scalar v : values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.values.assign(values.begin(), values.end());
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.values == b.values;
  }

 private:
  void check_dims() const {
    for (const std::size_t d : shape) {
      if (d == 0) throw ShapeError("zero-length dimension in shape " + to_string(shape));
    }
  }
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

}  // namespace disentangle
