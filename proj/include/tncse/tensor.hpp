#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tncse/errors.hpp"
#include "tncse/rng.hpp"

namespace tncse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major array. Rank 1 is treated as a single row wherever a matrix
// is expected.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty until first accumulation

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_size(shape) != data.size())
      throw InvalidArgument("tensor: shape " + shape_str(shape) + " does not match " +
                            std::to_string(data.size()) + " values");
  }

  static Tensor matrix(std::size_t r, std::size_t c, std::vector<T> values) {
    return Tensor({r, c}, std::move(values));
  }
  static Tensor vector(std::vector<T> values) {
    const auto n = values.size();
    return Tensor({n}, std::move(values));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.size() >= 2 ? shape_size(Shape(shape.begin(), shape.end() - 1)) : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.assign(data.size(), T(0)); }
  void clear_grad() { grad.clear(); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }
};

template <class T>
Tensor<T> random_normal(Shape s, double stddev, Rng& rng) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <class T>
bool all_finite(const std::vector<T>& v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace tncse
