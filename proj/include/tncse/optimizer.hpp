#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tncse/tensor.hpp"

namespace tncse {

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled

  void validate() const {
    if (!(lr > 0.0)) throw InvalidArgument("optim: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw InvalidArgument("optim: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw InvalidArgument("optim: eps must be positive");
    if (!(weight_decay >= 0.0)) throw InvalidArgument("optim: weight_decay must be non-negative");
  }
};

// Adam with per-parameter step counts. Parameters without a gradient are
// skipped entirely (state untouched).
template <class T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>*> params, OptimConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    state_.resize(params_.size());
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (p.grad.empty()) continue;
      auto& s = state_[i];
      if (s.m.empty()) {
        s.m.assign(p.data.size(), 0.0);
        s.v.assign(p.data.size(), 0.0);
      }
      ++s.t;
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
      for (std::size_t k = 0; k < p.data.size(); ++k) {
        const double g = p.grad[k];
        s.m[k] = cfg_.beta1 * s.m[k] + (1.0 - cfg_.beta1) * g;
        s.v[k] = cfg_.beta2 * s.v[k] + (1.0 - cfg_.beta2) * g * g;
        const double update = (s.m[k] / bc1) / (std::sqrt(s.v[k] / bc2) + cfg_.eps);
        double w = static_cast<double>(p.data[k]);
        if (cfg_.weight_decay > 0.0) w -= cfg_.lr * cfg_.weight_decay * w;
        p.data[k] = static_cast<T>(w - cfg_.lr * update);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->clear_grad();
  }

  const OptimConfig& config() const { return cfg_; }

 private:
  struct State {
    std::vector<double> m, v;
    long t = 0;
  };
  std::vector<Tensor<T>*> params_;
  OptimConfig cfg_;
  std::vector<State> state_;
};

}  // namespace tncse
