#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tncse/autodiff.hpp"

namespace tncse {

struct GradCheckResult {
  std::string name;
  double rel_error = 0.0;  // |g_analytic - g_numeric| / (|g_analytic| + |g_numeric|)
  bool passed = false;
};

using NamedParam = std::pair<std::string, Tensor<double>*>;

// Five-point central finite differences against the tape gradient. `loss_fn(tape)` must
// bind every entry of `params` through tape.leaf and return a scalar; it is
// re-invoked on a fresh tape for each perturbation, so any stochastic state
// it uses must be re-seeded per call.
template <class LossFn>
std::vector<GradCheckResult> gradient_check(const std::vector<NamedParam>& params, LossFn&& loss_fn,
                                            double step = 1e-4, double tolerance = 1e-6,
                                            double zero_floor = 1e-9) {
  for (auto& [name, p] : params) {
    p->requires_grad = true;
    p->zero_grad();
  }
  {
    Tape<double> tape;
    auto loss = loss_fn(tape);
    tape.backward(loss);
  }
  std::vector<GradCheckResult> out;
  for (auto& [name, p] : params) {
    std::vector<double> numeric(p->data.size());
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const double orig = p->data[i];
      auto at = [&](double offset) {
        p->data[i] = orig + offset;
        Tape<double> t;
        return loss_fn(t).item();
      };
      const double f2 = at(2 * step), f1 = at(step), b1 = at(-step), b2 = at(-2 * step);
      p->data[i] = orig;
      numeric[i] = (-f2 + 8.0 * f1 - 8.0 * b1 + b2) / (12.0 * step);
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (p->grad[i] - numeric[i]) * (p->grad[i] - numeric[i]);
      na += p->grad[i] * p->grad[i];
      nn += numeric[i] * numeric[i];
    }
    diff = std::sqrt(diff);
    const double denom = std::sqrt(na) + std::sqrt(nn);
    GradCheckResult r;
    r.name = name;
    // Both sides below the floor: a structurally zero gradient, where the
    // ratio would only measure finite-difference noise.
    r.rel_error = denom < zero_floor ? 0.0 : diff / denom;
    r.passed = std::isfinite(r.rel_error) && r.rel_error < tolerance;
    out.push_back(std::move(r));
  }
  return out;
}

inline bool all_passed(const std::vector<GradCheckResult>& rs) {
  for (const auto& r : rs)
    if (!r.passed) return false;
  return true;
}

inline double max_error(const std::vector<GradCheckResult>& rs) {
  double m = 0;
  for (const auto& r : rs) m = std::max(m, r.rel_error);
  return m;
}

}  // namespace tncse
