#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace jscc {

/// Base error for everything the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user input: bad config, bad flags, malformed files. CLI exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
bool all_finite(std::span<const T> values) {
  for (T v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

/// Dense row-major n-d array. An empty shape denotes a scalar.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::optional<std::vector<T>> grad;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(numel(shape), fill) {
    check_dims();
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_dims();
    if (data.size() != numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape));
    return data[0];
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T{0});
  }

  /// Accumulates into the gradient slot, creating it on first use.
  void accumulate_grad(std::span<const T> g) {
    if (!grad) grad.emplace(data.size(), T{0});
    for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] += g[i];
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    out.requires_grad = requires_grad;
    return out;
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
};

/// Shape-and-value equality; gradients are not compared.
template <class T>
bool operator==(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape && a.data == b.data;
}

}  // namespace jscc
