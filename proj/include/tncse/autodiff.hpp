#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape records primitives in creation order. Each node keeps a forward
// closure (so the whole tape can be replayed against updated parameters) and
// a backward closure that pushes its output gradient into its inputs.
// Parameters enter through Tape::leaf and receive their gradients only when
// Tape::backward finishes.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "tncse/errors.hpp"
#include "tncse/rng.hpp"
#include "tncse/tensor.hpp"

namespace tncse {

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const std::vector<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->shape(id); }
  std::size_t rows() const { return shape()[0]; }
  std::size_t cols() const { return shape()[1]; }
  std::size_t numel() const { return value().size(); }
  T item() const;
  const std::vector<T>& grad() const { return tape->grad(id); }
  Tensor<T> tensor() const { return Tensor<T>(shape(), value()); }
};

template <class T>
class Tape {
 public:
  using ForwardFn = std::function<void(Tape&, std::size_t)>;
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    std::string op;
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    std::vector<std::size_t> inputs;
    ForwardFn forward;
    BackwardFn backward;
    Tensor<T>* param = nullptr;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Binds an externally owned parameter. Its gradient is accumulated into
  // param.grad when backward() completes.
  Var<T> leaf(Tensor<T>& param) {
    Node n;
    n.op = "leaf";
    n.shape = as_matrix(param.shape);
    n.value = param.data;
    n.needs_grad = param.requires_grad;
    n.param = &param;
    return push(std::move(n));
  }

  Var<T> constant(const Tensor<T>& value) {
    Node n;
    n.op = "constant";
    n.shape = as_matrix(value.shape);
    n.value = value.data;
    return push(std::move(n));
  }

  Var<T> constant(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return constant(Tensor<T>::matrix(rows, cols, std::move(values)));
  }

  Var<T> record(std::string op, Shape shape, std::vector<std::size_t> inputs, ForwardFn fwd,
                BackwardFn bwd) {
    Node n;
    n.op = std::move(op);
    n.shape = std::move(shape);
    n.value.assign(shape_size(n.shape), T(0));
    for (auto i : inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    n.inputs = std::move(inputs);
    n.forward = std::move(fwd);
    n.backward = std::move(bwd);
    auto v = push(std::move(n));
    nodes_[v.id].forward(*this, v.id);
    return v;
  }

  const std::vector<T>& value(std::size_t id) const { return nodes_[id].value; }
  std::vector<T>& mutable_value(std::size_t id) { return nodes_[id].value; }
  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  const std::vector<T>& grad(std::size_t id) const { return nodes_[id].grad; }
  bool wants_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Zero-initialized accumulator for an input's gradient.
  std::vector<T>& grad_acc(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw InvalidArgument("backward: variable belongs to another tape");
    if (nodes_[loss.id].value.size() != 1)
      throw InvalidArgument("backward: loss must be a scalar, got " + shape_str(nodes_[loss.id].shape));
    if (backward_done_)
      throw std::logic_error("backward: tape already differentiated; replay or rebuild the forward pass first");
    backward_done_ = true;
    grad_acc(loss.id)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
    for (auto& n : nodes_) {
      if (!n.param || !n.param->requires_grad || n.grad.empty()) continue;
      auto& pg = n.param->grad;
      if (pg.empty()) pg.assign(n.grad.size(), T(0));
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
  }

  // Re-runs every primitive in recorded order, re-reading bound parameters.
  // Saved stochastic context (dropout masks) is reused, so fixed inputs give
  // bit-identical outputs.
  void replay() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      auto& n = nodes_[i];
      n.grad.clear();
      if (n.param) {
        n.value = n.param->data;
      } else if (n.forward) {
        n.forward(*this, i);
      }
    }
    backward_done_ = false;
  }

  bool differentiated() const { return backward_done_; }

 private:
  static Shape as_matrix(const Shape& s) {
    if (s.empty()) return {1, 1};
    if (s.size() == 1) return {1, s[0]};
    if (s.size() == 2) return s;
    return {shape_size(Shape(s.begin(), s.end() - 1)), s.back()};
  }

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <class T>
T Var<T>::item() const {
  if (numel() != 1) throw InvalidArgument("item: not a scalar " + shape_str(shape()));
  return value()[0];
}

namespace ad {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

template <class T>
ConstMatMap<T> cmap(const Tape<T>& t, std::size_t id) {
  const auto& s = t.shape(id);
  return ConstMatMap<T>(t.value(id).data(), static_cast<Eigen::Index>(s[0]), static_cast<Eigen::Index>(s[1]));
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T>
void require_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw InvalidArgument(std::string(op) + ": operands on different tapes");
}

// Elementwise unary op given f(x) and f'(x, y).
template <class T, class F, class D>
Var<T> unary(const char* name, Var<T> x, F f, D df) {
  auto& tp = *x.tape;
  const auto xi = x.id;
  return tp.record(
      name, tp.shape(xi), {xi},
      [xi, f](Tape<T>& t, std::size_t self) {
        const auto& in = t.value(xi);
        auto& out = t.mutable_value(self);
        for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
      },
      [xi, df](Tape<T>& t, std::size_t self) {
        if (!t.wants_grad(xi)) return;
        const auto& in = t.value(xi);
        const auto& y = t.value(self);
        const auto& g = t.grad(self);
        auto& gx = t.grad_acc(xi);
        for (std::size_t i = 0; i < in.size(); ++i) gx[i] += g[i] * df(in[i], y[i]);
      });
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "matmul");
  auto& tp = *a.tape;
  const auto ai = a.id, bi = b.id;
  const auto m = tp.shape(ai)[0], k = tp.shape(ai)[1], k2 = tp.shape(bi)[0], n = tp.shape(bi)[1];
  if (k != k2)
    throw InvalidArgument("matmul: inner extents differ, " + shape_str(tp.shape(ai)) + " x " + shape_str(tp.shape(bi)));
  return tp.record(
      "matmul", {m, n}, {ai, bi},
      [ai, bi, m, n](Tape<T>& t, std::size_t self) {
        MatMap<T> c(t.mutable_value(self).data(), m, n);
        c.noalias() = detail::cmap(t, ai) * detail::cmap(t, bi);
      },
      [ai, bi, m, k, n](Tape<T>& t, std::size_t self) {
        ConstMatMap<T> g(t.grad(self).data(), m, n);
        if (t.wants_grad(ai)) {
          MatMap<T> ga(t.grad_acc(ai).data(), m, k);
          ga.noalias() += g * detail::cmap(t, bi).transpose();
        }
        if (t.wants_grad(bi)) {
          MatMap<T> gb(t.grad_acc(bi).data(), k, n);
          gb.noalias() += detail::cmap(t, ai).transpose() * g;
        }
      });
}

// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "matmul_nt");
  auto& tp = *a.tape;
  const auto ai = a.id, bi = b.id;
  const auto m = tp.shape(ai)[0], k = tp.shape(ai)[1], n = tp.shape(bi)[0], k2 = tp.shape(bi)[1];
  if (k != k2)
    throw InvalidArgument("matmul_nt: inner extents differ, " + shape_str(tp.shape(ai)) + " x " +
                          shape_str(tp.shape(bi)) + "^T");
  return tp.record(
      "matmul_nt", {m, n}, {ai, bi},
      [ai, bi, m, n](Tape<T>& t, std::size_t self) {
        MatMap<T> c(t.mutable_value(self).data(), m, n);
        c.noalias() = detail::cmap(t, ai) * detail::cmap(t, bi).transpose();
      },
      [ai, bi, m, k, n](Tape<T>& t, std::size_t self) {
        ConstMatMap<T> g(t.grad(self).data(), m, n);
        if (t.wants_grad(ai)) {
          MatMap<T> ga(t.grad_acc(ai).data(), m, k);
          ga.noalias() += g * detail::cmap(t, bi);
        }
        if (t.wants_grad(bi)) {
          MatMap<T> gb(t.grad_acc(bi).data(), n, k);
          gb.noalias() += g.transpose() * detail::cmap(t, ai);
        }
      });
}

namespace detail {

template <class T, class F, class DA, class DB>
Var<T> binary(const char* name, Var<T> a, Var<T> b, F f, DA da, DB db) {
  require_tape(a, b, name);
  auto& tp = *a.tape;
  const auto ai = a.id, bi = b.id;
  require_same(tp.shape(ai), tp.shape(bi), name);
  return tp.record(
      name, tp.shape(ai), {ai, bi},
      [ai, bi, f](Tape<T>& t, std::size_t self) {
        const auto& x = t.value(ai);
        const auto& y = t.value(bi);
        auto& out = t.mutable_value(self);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
      },
      [ai, bi, da, db](Tape<T>& t, std::size_t self) {
        const auto& x = t.value(ai);
        const auto& y = t.value(bi);
        const auto& g = t.grad(self);
        if (t.wants_grad(ai)) {
          auto& gx = t.grad_acc(ai);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * da(x[i], y[i]);
        }
        if (t.wants_grad(bi)) {
          auto& gy = t.grad_acc(bi);
          for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * db(x[i], y[i]);
        }
      });
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// x[m x n] + bias[n] broadcast over rows.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  detail::require_tape(x, bias, "add_bias");
  auto& tp = *x.tape;
  const auto xi = x.id, bi = bias.id;
  const auto m = tp.shape(xi)[0], n = tp.shape(xi)[1];
  if (tp.value(bi).size() != n)
    throw InvalidArgument("add_bias: bias " + shape_str(tp.shape(bi)) + " does not match " + shape_str(tp.shape(xi)));
  return tp.record(
      "add_bias", {m, n}, {xi, bi},
      [xi, bi, m, n](Tape<T>& t, std::size_t self) {
        const auto& x = t.value(xi);
        const auto& b = t.value(bi);
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[r * n + c] + b[c];
      },
      [xi, bi, m, n](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.wants_grad(xi)) {
          auto& gx = t.grad_acc(xi);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.wants_grad(bi)) {
          auto& gb = t.grad_acc(bi);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
        }
      });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
  return detail::unary<T>("scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return detail::unary<T>("tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// Exact (erf) GELU.
template <class T>
Var<T> gelu(Var<T> x) {
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        return cdf + v * pdf;
      });
}

template <class T>
Var<T> log(Var<T> x) {
  return detail::unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// Gradient passes only strictly inside (lo, hi).
template <class T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  return detail::unary<T>(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

template <class T>
Var<T> sum(Var<T> x) {
  auto& tp = *x.tape;
  const auto xi = x.id;
  return tp.record(
      "sum", {1, 1}, {xi},
      [xi](Tape<T>& t, std::size_t self) {
        T s = 0;
        for (T v : t.value(xi)) s += v;
        t.mutable_value(self)[0] = s;
      },
      [xi](Tape<T>& t, std::size_t self) {
        if (!t.wants_grad(xi)) return;
        const T g = t.grad(self)[0];
        for (auto& v : t.grad_acc(xi)) v += g;
      });
}

template <class T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Per-row layer normalization followed by the affine map (gamma, beta).
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  detail::require_tape(x, gamma, "layer_norm");
  detail::require_tape(x, beta, "layer_norm");
  auto& tp = *x.tape;
  const auto xi = x.id, gi = gamma.id, bi = beta.id;
  const auto m = tp.shape(xi)[0], d = tp.shape(xi)[1];
  if (d < 2) throw InvalidArgument("layer_norm: feature extent must be >= 2, got " + std::to_string(d));
  if (tp.value(gi).size() != d || tp.value(bi).size() != d)
    throw InvalidArgument("layer_norm: gamma/beta must have " + std::to_string(d) + " entries");
  if (!(eps >= T(0))) throw InvalidArgument("layer_norm: eps must be non-negative");
  // xhat and 1/sigma per row, refreshed on every forward.
  auto ctx = std::make_shared<std::pair<std::vector<T>, std::vector<T>>>();
  return tp.record(
      "layer_norm", {m, d}, {xi, gi, bi},
      [xi, gi, bi, m, d, eps, ctx](Tape<T>& t, std::size_t self) {
        const auto& in = t.value(xi);
        const auto& g = t.value(gi);
        const auto& b = t.value(bi);
        auto& out = t.mutable_value(self);
        auto& [xhat, rstd] = *ctx;
        xhat.resize(m * d);
        rstd.resize(m);
        for (std::size_t r = 0; r < m; ++r) {
          const T* row = &in[r * d];
          T mu = 0;
          for (std::size_t c = 0; c < d; ++c) mu += row[c];
          mu /= static_cast<T>(d);
          T var = 0;
          for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
          var /= static_cast<T>(d);
          const T denom = std::sqrt(var + eps);
          const T inv = denom > T(0) ? T(1) / denom : T(0);
          rstd[r] = inv;
          for (std::size_t c = 0; c < d; ++c) {
            const T h = (row[c] - mu) * inv;
            xhat[r * d + c] = h;
            out[r * d + c] = g[c] * h + b[c];
          }
        }
      },
      [xi, gi, bi, m, d, ctx](Tape<T>& t, std::size_t self) {
        const auto& gout = t.grad(self);
        const auto& g = t.value(gi);
        const auto& [xhat, rstd] = *ctx;
        if (t.wants_grad(gi)) {
          auto& gg = t.grad_acc(gi);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += gout[r * d + c] * xhat[r * d + c];
        }
        if (t.wants_grad(bi)) {
          auto& gb = t.grad_acc(bi);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += gout[r * d + c];
        }
        if (t.wants_grad(xi)) {
          auto& gx = t.grad_acc(xi);
          for (std::size_t r = 0; r < m; ++r) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t c = 0; c < d; ++c) {
              const T dh = gout[r * d + c] * g[c];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + c];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t c = 0; c < d; ++c) {
              const T dh = gout[r * d + c] * g[c];
              gx[r * d + c] += rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
            }
          }
        }
      });
}

// Inverted dropout. The mask is drawn once at record time and kept on the
// tape, so replay reuses it.
template <class T>
Var<T> dropout(Var<T> x, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidArgument("dropout: p must lie in [0, 1), got " + std::to_string(p));
  auto& tp = *x.tape;
  const auto xi = x.id;
  const auto n = tp.value(xi).size();
  auto mask = std::make_shared<std::vector<T>>(n, T(1));
  if (p > 0.0) {
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (auto& v : *mask) v = rng.uniform() < p ? T(0) : keep_scale;
  }
  return tp.record(
      "dropout", tp.shape(xi), {xi},
      [xi, mask](Tape<T>& t, std::size_t self) {
        const auto& in = t.value(xi);
        auto& out = t.mutable_value(self);
        for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * (*mask)[i];
      },
      [xi, mask](Tape<T>& t, std::size_t self) {
        if (!t.wants_grad(xi)) return;
        const auto& g = t.grad(self);
        auto& gx = t.grad_acc(xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
      });
}

// Gathers rows of table[V x d] by id.
template <class T>
Var<T> embedding(Var<T> table, std::vector<std::int32_t> ids) {
  auto& tp = *table.tape;
  const auto ti = table.id;
  const auto vocab = tp.shape(ti)[0], d = tp.shape(ti)[1];
  for (auto id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw InvalidArgument("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(vocab));
  auto shared_ids = std::make_shared<const std::vector<std::int32_t>>(std::move(ids));
  return tp.record(
      "embedding", {shared_ids->size(), d}, {ti},
      [ti, d, shared_ids](Tape<T>& t, std::size_t self) {
        const auto& w = t.value(ti);
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < shared_ids->size(); ++r)
          std::copy_n(&w[static_cast<std::size_t>((*shared_ids)[r]) * d], d, &out[r * d]);
      },
      [ti, d, shared_ids](Tape<T>& t, std::size_t self) {
        if (!t.wants_grad(ti)) return;
        const auto& g = t.grad(self);
        auto& gw = t.grad_acc(ti);
        for (std::size_t r = 0; r < shared_ids->size(); ++r) {
          T* dst = &gw[static_cast<std::size_t>((*shared_ids)[r]) * d];
          for (std::size_t c = 0; c < d; ++c) dst[c] += g[r * d + c];
        }
      });
}

// Multi-head scaled dot-product attention over a packed batch.
// q, k, v: [batch*seq x d]; key_mask: batch*seq entries, 0 marks padding.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::vector<std::uint8_t> key_mask, std::size_t batch,
                 std::size_t seq, std::size_t heads) {
  detail::require_tape(q, k, "attention");
  detail::require_tape(q, v, "attention");
  auto& tp = *q.tape;
  const auto qi = q.id, ki = k.id, vi = v.id;
  const auto d = tp.shape(qi)[1];
  detail::require_same(tp.shape(qi), tp.shape(ki), "attention");
  detail::require_same(tp.shape(qi), tp.shape(vi), "attention");
  if (tp.shape(qi)[0] != batch * seq || key_mask.size() != batch * seq)
    throw InvalidArgument("attention: rows must equal batch*seq");
  if (heads == 0 || d % heads != 0) throw InvalidArgument("attention: hidden dim not divisible by heads");
  const auto dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::move(key_mask));
  auto probs = std::make_shared<std::vector<T>>(batch * heads * seq * seq);
  return tp.record(
      "attention", {batch * seq, d}, {qi, ki, vi},
      [=](Tape<T>& t, std::size_t self) {
        const auto& Q = t.value(qi);
        const auto& K = t.value(ki);
        const auto& V = t.value(vi);
        auto& out = t.mutable_value(self);
        std::fill(out.begin(), out.end(), T(0));
        std::vector<T> s(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < seq; ++i) {
              const T* qrow = &Q[(b * seq + i) * d + h * dh];
              T mx = -std::numeric_limits<T>::infinity();
              for (std::size_t j = 0; j < seq; ++j) {
                if (!(*mask)[b * seq + j]) continue;
                const T* krow = &K[(b * seq + j) * d + h * dh];
                T acc = 0;
                for (std::size_t c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
                s[j] = acc * inv_sqrt;
                mx = std::max(mx, s[j]);
              }
              T* p = &(*probs)[((b * heads + h) * seq + i) * seq];
              T z = 0;
              for (std::size_t j = 0; j < seq; ++j) {
                p[j] = (*mask)[b * seq + j] ? std::exp(s[j] - mx) : T(0);
                z += p[j];
              }
              T* orow = &out[(b * seq + i) * d + h * dh];
              for (std::size_t j = 0; j < seq; ++j) {
                if (z > T(0)) p[j] /= z;
                if (p[j] == T(0)) continue;
                const T* vrow = &V[(b * seq + j) * d + h * dh];
                for (std::size_t c = 0; c < dh; ++c) orow[c] += p[j] * vrow[c];
              }
            }
          }
        }
      },
      [=](Tape<T>& t, std::size_t self) {
        const auto& Q = t.value(qi);
        const auto& K = t.value(ki);
        const auto& V = t.value(vi);
        const auto& G = t.grad(self);
        const bool wq = t.wants_grad(qi), wk = t.wants_grad(ki), wv = t.wants_grad(vi);
        T* gq = wq ? t.grad_acc(qi).data() : nullptr;
        T* gk = wk ? t.grad_acc(ki).data() : nullptr;
        T* gv = wv ? t.grad_acc(vi).data() : nullptr;
        std::vector<T> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < seq; ++i) {
              const T* p = &(*probs)[((b * heads + h) * seq + i) * seq];
              const T* grow = &G[(b * seq + i) * d + h * dh];
              T dot = 0;
              for (std::size_t j = 0; j < seq; ++j) {
                if (p[j] == T(0)) {
                  dp[j] = 0;
                  continue;
                }
                const T* vrow = &V[(b * seq + j) * d + h * dh];
                T acc = 0;
                for (std::size_t c = 0; c < dh; ++c) acc += grow[c] * vrow[c];
                dp[j] = acc;
                dot += p[j] * acc;
                if (wv) {
                  T* gvrow = &gv[(b * seq + j) * d + h * dh];
                  for (std::size_t c = 0; c < dh; ++c) gvrow[c] += p[j] * grow[c];
                }
              }
              const T* qrow = &Q[(b * seq + i) * d + h * dh];
              for (std::size_t j = 0; j < seq; ++j) {
                if (p[j] == T(0)) continue;
                const T ds = p[j] * (dp[j] - dot) * inv_sqrt;
                const T* krow = &K[(b * seq + j) * d + h * dh];
                if (wq) {
                  T* gqrow = &gq[(b * seq + i) * d + h * dh];
                  for (std::size_t c = 0; c < dh; ++c) gqrow[c] += ds * krow[c];
                }
                if (wk) {
                  T* gkrow = &gk[(b * seq + j) * d + h * dh];
                  for (std::size_t c = 0; c < dh; ++c) gkrow[c] += ds * qrow[c];
                }
              }
            }
          }
        }
      });
}

template <class T>
Var<T> select_rows(Var<T> x, std::vector<std::size_t> rows) {
  auto& tp = *x.tape;
  const auto xi = x.id;
  const auto m = tp.shape(xi)[0], n = tp.shape(xi)[1];
  for (auto r : rows)
    if (r >= m) throw InvalidArgument("select_rows: row " + std::to_string(r) + " out of " + std::to_string(m));
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(rows));
  return tp.record(
      "select_rows", {idx->size(), n}, {xi},
      [xi, n, idx](Tape<T>& t, std::size_t self) {
        const auto& in = t.value(xi);
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < idx->size(); ++r) std::copy_n(&in[(*idx)[r] * n], n, &out[r * n]);
      },
      [xi, n, idx](Tape<T>& t, std::size_t self) {
        if (!t.wants_grad(xi)) return;
        const auto& g = t.grad(self);
        auto& gx = t.grad_acc(xi);
        for (std::size_t r = 0; r < idx->size(); ++r)
          for (std::size_t c = 0; c < n; ++c) gx[(*idx)[r] * n + c] += g[r * n + c];
      });
}

// Mean over the unmasked rows of each of `batch` groups of `seq` rows.
template <class T>
Var<T> masked_mean_rows(Var<T> x, std::vector<std::uint8_t> mask, std::size_t batch, std::size_t seq) {
  auto& tp = *x.tape;
  const auto xi = x.id;
  const auto n = tp.shape(xi)[1];
  if (tp.shape(xi)[0] != batch * seq || mask.size() != batch * seq)
    throw InvalidArgument("masked_mean_rows: rows must equal batch*seq");
  auto m = std::make_shared<const std::vector<std::uint8_t>>(std::move(mask));
  auto counts = std::make_shared<std::vector<T>>(batch, T(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < seq; ++s) (*counts)[b] += (*m)[b * seq + s] ? T(1) : T(0);
  for (auto c : *counts)
    if (c == T(0)) throw InvalidArgument("masked_mean_rows: a row group has no unmasked entries");
  return tp.record(
      "masked_mean_rows", {batch, n}, {xi},
      [xi, n, batch, seq, m, counts](Tape<T>& t, std::size_t self) {
        const auto& in = t.value(xi);
        auto& out = t.mutable_value(self);
        std::fill(out.begin(), out.end(), T(0));
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t s = 0; s < seq; ++s) {
            if (!(*m)[b * seq + s]) continue;
            for (std::size_t c = 0; c < n; ++c) out[b * n + c] += in[(b * seq + s) * n + c];
          }
          for (std::size_t c = 0; c < n; ++c) out[b * n + c] /= (*counts)[b];
        }
      },
      [xi, n, batch, seq, m, counts](Tape<T>& t, std::size_t self) {
        if (!t.wants_grad(xi)) return;
        const auto& g = t.grad(self);
        auto& gx = t.grad_acc(xi);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t s = 0; s < seq; ++s) {
            if (!(*m)[b * seq + s]) continue;
            for (std::size_t c = 0; c < n; ++c) gx[(b * seq + s) * n + c] += g[b * n + c] / (*counts)[b];
          }
      });
}

// Per-row Euclidean norm -> [m x 1]. The forward value is exact; the backward
// pass uses x / sqrt(|x|^2 + grad_eps), and a zero row has zero gradient.
template <class T>
Var<T> row_norm(Var<T> x, T grad_eps = T(0)) {
  auto& tp = *x.tape;
  const auto xi = x.id;
  const auto m = tp.shape(xi)[0], n = tp.shape(xi)[1];
  return tp.record(
      "row_norm", {m, 1}, {xi},
      [xi, m, n](Tape<T>& t, std::size_t self) {
        const auto& in = t.value(xi);
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < m; ++r) {
          T s = 0;
          for (std::size_t c = 0; c < n; ++c) s += in[r * n + c] * in[r * n + c];
          out[r] = std::sqrt(s);
        }
      },
      [xi, m, n, grad_eps](Tape<T>& t, std::size_t self) {
        if (!t.wants_grad(xi)) return;
        const auto& in = t.value(xi);
        const auto& y = t.value(self);
        const auto& g = t.grad(self);
        auto& gx = t.grad_acc(xi);
        for (std::size_t r = 0; r < m; ++r) {
          const T denom = grad_eps > T(0) ? std::sqrt(y[r] * y[r] + grad_eps) : y[r];
          if (denom == T(0)) continue;
          for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g[r] * in[r * n + c] / denom;
        }
      });
}

// x / |x| per row; zero rows are rejected.
template <class T>
Var<T> row_normalize(Var<T> x) {
  auto& tp = *x.tape;
  const auto xi = x.id;
  const auto m = tp.shape(xi)[0], n = tp.shape(xi)[1];
  auto norms = std::make_shared<std::vector<T>>(m);
  return tp.record(
      "row_normalize", {m, n}, {xi},
      [xi, m, n, norms](Tape<T>& t, std::size_t self) {
        const auto& in = t.value(xi);
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < m; ++r) {
          T s = 0;
          for (std::size_t c = 0; c < n; ++c) s += in[r * n + c] * in[r * n + c];
          const T nrm = std::sqrt(s);
          if (!(nrm > T(0))) throw InvalidArgument("row_normalize: zero-norm row " + std::to_string(r));
          (*norms)[r] = nrm;
          for (std::size_t c = 0; c < n; ++c) out[r * n + c] = in[r * n + c] / nrm;
        }
      },
      [xi, m, n, norms](Tape<T>& t, std::size_t self) {
        if (!t.wants_grad(xi)) return;
        const auto& y = t.value(self);
        const auto& g = t.grad(self);
        auto& gx = t.grad_acc(xi);
        for (std::size_t r = 0; r < m; ++r) {
          T yg = 0;
          for (std::size_t c = 0; c < n; ++c) yg += y[r * n + c] * g[r * n + c];
          for (std::size_t c = 0; c < n; ++c)
            gx[r * n + c] += (g[r * n + c] - y[r * n + c] * yg) / (*norms)[r];
        }
      });
}

// Row-wise dot product -> [m x 1].
template <class T>
Var<T> row_dot(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "row_dot");
  auto& tp = *a.tape;
  const auto ai = a.id, bi = b.id;
  detail::require_same(tp.shape(ai), tp.shape(bi), "row_dot");
  const auto m = tp.shape(ai)[0], n = tp.shape(ai)[1];
  return tp.record(
      "row_dot", {m, 1}, {ai, bi},
      [ai, bi, m, n](Tape<T>& t, std::size_t self) {
        const auto& x = t.value(ai);
        const auto& y = t.value(bi);
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < m; ++r) {
          T s = 0;
          for (std::size_t c = 0; c < n; ++c) s += x[r * n + c] * y[r * n + c];
          out[r] = s;
        }
      },
      [ai, bi, m, n](Tape<T>& t, std::size_t self) {
        const auto& x = t.value(ai);
        const auto& y = t.value(bi);
        const auto& g = t.grad(self);
        if (t.wants_grad(ai)) {
          auto& ga = t.grad_acc(ai);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r] * y[r * n + c];
        }
        if (t.wants_grad(bi)) {
          auto& gb = t.grad_acc(bi);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[r * n + c] += g[r] * x[r * n + c];
        }
      });
}

// Row softmax of x / tau.
template <class T>
Var<T> softmax(Var<T> x, T tau = T(1)) {
  if (!(tau > T(0))) throw InvalidArgument("softmax: temperature must be positive");
  auto& tp = *x.tape;
  const auto xi = x.id;
  const auto m = tp.shape(xi)[0], n = tp.shape(xi)[1];
  return tp.record(
      "softmax", {m, n}, {xi},
      [xi, m, n, tau](Tape<T>& t, std::size_t self) {
        const auto& in = t.value(xi);
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < m; ++r) {
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, in[r * n + c] / tau);
          T z = 0;
          for (std::size_t c = 0; c < n; ++c) z += (out[r * n + c] = std::exp(in[r * n + c] / tau - mx));
          for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
        }
      },
      [xi, m, n, tau](Tape<T>& t, std::size_t self) {
        if (!t.wants_grad(xi)) return;
        const auto& y = t.value(self);
        const auto& g = t.grad(self);
        auto& gx = t.grad_acc(xi);
        for (std::size_t r = 0; r < m; ++r) {
          T dot = 0;
          for (std::size_t c = 0; c < n; ++c) dot += y[r * n + c] * g[r * n + c];
          for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += y[r * n + c] * (g[r * n + c] - dot) / tau;
        }
      });
}

// mean_i [ logsumexp_j logits[i,j] - logits[i, target_i] ].
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<std::size_t> targets) {
  auto& tp = *logits.tape;
  const auto li = logits.id;
  const auto m = tp.shape(li)[0], n = tp.shape(li)[1];
  if (targets.size() != m) throw InvalidArgument("softmax_cross_entropy: one target per row required");
  for (auto c : targets)
    if (c >= n) throw InvalidArgument("softmax_cross_entropy: target out of range");
  auto tg = std::make_shared<const std::vector<std::size_t>>(std::move(targets));
  auto probs = std::make_shared<std::vector<T>>(m * n);
  return tp.record(
      "softmax_cross_entropy", {1, 1}, {li},
      [li, m, n, tg, probs](Tape<T>& t, std::size_t self) {
        const auto& z = t.value(li);
        T total = 0;
        for (std::size_t r = 0; r < m; ++r) {
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, z[r * n + c]);
          T s = 0;
          for (std::size_t c = 0; c < n; ++c) s += ((*probs)[r * n + c] = std::exp(z[r * n + c] - mx));
          for (std::size_t c = 0; c < n; ++c) (*probs)[r * n + c] /= s;
          const auto tc = (*tg)[r];
          if (z[r * n + tc] == mx) {
            // Target is the max: log1p of the off-target mass stays accurate
            // when the loss is near zero.
            T rest = 0;
            for (std::size_t c = 0; c < n; ++c)
              if (c != tc) rest += std::exp(z[r * n + c] - mx);
            total += std::log1p(rest);
          } else {
            total += mx + std::log(s) - z[r * n + tc];
          }
        }
        t.mutable_value(self)[0] = total / static_cast<T>(m);
      },
      [li, m, n, tg, probs](Tape<T>& t, std::size_t self) {
        if (!t.wants_grad(li)) return;
        const T g = t.grad(self)[0] / static_cast<T>(m);
        auto& gz = t.grad_acc(li);
        for (std::size_t r = 0; r < m; ++r) {
          // p_t - 1 written as minus the off-target mass.
          T rest = 0;
          for (std::size_t c = 0; c < n; ++c) {
            if (c == (*tg)[r]) continue;
            gz[r * n + c] += g * (*probs)[r * n + c];
            rest += (*probs)[r * n + c];
          }
          gz[r * n + (*tg)[r]] -= g * rest;
        }
      });
}

// Composites.

template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_bias(matmul(x, w), b);
}

// Row-wise cosine similarity of matching rows -> [m x 1].
template <class T>
Var<T> cosine_rows(Var<T> a, Var<T> b) {
  return row_dot(row_normalize(a), row_normalize(b));
}

// Pairwise cosine similarity matrix cos(a_i, b_j) -> [m x n].
template <class T>
Var<T> cosine_matrix(Var<T> a, Var<T> b) {
  return matmul_nt(row_normalize(a), row_normalize(b));
}

template <class T>
Var<T> l2_norm(Var<T> x) {
  if (x.rows() != 1) throw InvalidArgument("l2_norm: expects a single vector, got " + shape_str(x.shape()));
  return row_norm(x);
}

}  // namespace ad
}  // namespace tncse
