#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "tncse/errors.hpp"

namespace tncse {

template <class T>
T l2_norm(std::span<const T> x) {
  T s = 0;
  for (T v : x) s += v * v;
  return std::sqrt(s);
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size())
    throw InvalidArgument("dot: length mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Cosine similarity clamped to [-1, 1]; zero vectors are rejected.
template <class T>
T cosine_sim(std::span<const T> a, std::span<const T> b) {
  const T na = l2_norm(a), nb = l2_norm(b);
  if (!(na > T(0)) || !(nb > T(0))) throw InvalidArgument("cosine_sim: zero-norm input");
  return std::clamp(dot(a, b) / (na * nb), T(-1), T(1));
}

}  // namespace tncse
