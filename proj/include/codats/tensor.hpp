#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace codats {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Dense rank-N real array, row-major. T is float for training, double for
// the verification suites.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> values;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)), values(shape_numel(shape), T(0)) {
    for (std::size_t e : shape) {
      if (e == 0) throw std::invalid_argument("tensor: zero extent in " + shape_str(shape));
    }
  }

  Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != shape_numel(shape)) {
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(shape));
    }
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    std::fill(t.values.begin(), t.values.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t extent(std::size_t axis) const {
    if (axis >= shape.size()) throw std::invalid_argument("tensor: axis out of range");
    return shape[axis];
  }

  T* data() { return values.data(); }
  const T* data() const { return values.data(); }

  T& operator[](std::size_t i) { return values[i]; }
  const T& operator[](std::size_t i) const { return values[i]; }

  T& at2(std::size_t i, std::size_t j) { return values[i * shape[1] + j]; }
  const T& at2(std::size_t i, std::size_t j) const { return values[i * shape[1] + j]; }

  T& at3(std::size_t i, std::size_t j, std::size_t k) {
    return values[(i * shape[1] + j) * shape[2] + k];
  }
  const T& at3(std::size_t i, std::size_t j, std::size_t k) const {
    return values[(i * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : values) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<U>(values[i]);
    return Tensor<U>(shape, std::move(out));
  }
};

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& want, const char* where) {
  if (t.shape != want) {
    throw std::invalid_argument(std::string(where) + ": expected shape " + shape_str(want) +
                                ", got " + shape_str(t.shape));
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* where) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(where) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(t.shape));
  }
}

// Row-major matrix product c[m x n] = a[m x k] * b[k x n], accumulating into c.
// The i/l/j loop order keeps the inner loop contiguous so it vectorizes.
template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const T av = arow[l];
      if (av == T(0)) continue;
      const T* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace codats
