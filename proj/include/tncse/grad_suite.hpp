#pragma once

// Finite-difference checks for every differentiable primitive, every loss
// and a tiny encoder, each over a number of random configurations.

#include <functional>
#include <string>
#include <vector>

#include "tncse/encoder.hpp"
#include "tncse/grad_check.hpp"
#include "tncse/losses.hpp"

namespace tncse {

struct GradSuiteEntry {
  std::string name;
  std::size_t configs = 0;
  double max_error = 0.0;
  bool passed = true;
};

namespace grad_suite_detail {

using Check = std::function<std::vector<GradCheckResult>(Rng&, double tol)>;

inline std::size_t pick(Rng& r, std::size_t lo, std::size_t hi) { return lo + r.below(hi - lo + 1); }

inline Tensor<double> rnd(Shape s, Rng& r, double sd = 1.0) { return random_normal<double>(std::move(s), sd, r); }

// Values kept at least `gap` away from zero, keeping log/div/clamp smooth.
inline Tensor<double> away_from(Shape s, Rng& r, double lo, double hi) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = lo + (hi - lo) * r.uniform();
  return t;
}

// Reduces an arbitrary output to a scalar with fixed random weights.
inline Var<double> project(Var<double> y, const Tensor<double>& w) {
  auto& tape = *y.tape;
  return ad::sum(ad::mul(y, tape.constant(w)));
}

inline Tensor<double> weights_for(Var<double> y, Rng& r) { return rnd({y.rows(), y.cols()}, r); }

// Binds params, runs the forward once to size the projection, then checks.
template <class Fwd>
std::vector<GradCheckResult> check(std::vector<NamedParam> params, Rng& r, double tol, Fwd fwd, double step = 1e-4) {
  Tensor<double> w;
  {
    Tape<double> t;
    std::vector<Var<double>> v;
    for (auto& [n, p] : params) v.push_back(t.leaf(*p));
    auto y = fwd(t, v);
    w = y.rows() * y.cols() == 1 ? Tensor<double>({1, 1}, 1.0) : weights_for(y, r);
  }
  return gradient_check(
      params,
      [&](Tape<double>& t) {
        std::vector<Var<double>> v;
        for (auto& [n, p] : params) v.push_back(t.leaf(*p));
        return project(fwd(t, v), w);
      },
      step, tol);
}

}  // namespace grad_suite_detail

inline std::vector<std::pair<std::string, grad_suite_detail::Check>> grad_suite_checks() {
  using namespace grad_suite_detail;
  using V = std::vector<Var<double>>;
  using T = Tape<double>;
  std::vector<std::pair<std::string, Check>> c;

  c.emplace_back("matmul", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), k = pick(r, 1, 5), n = pick(r, 1, 4);
    auto a = rnd({m, k}, r), b = rnd({k, n}, r);
    return check({{"a", &a}, {"b", &b}}, r, tol, [](T&, V v) { return ad::matmul(v[0], v[1]); });
  });
  c.emplace_back("matmul_nt", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), k = pick(r, 1, 5), n = pick(r, 1, 4);
    auto a = rnd({m, k}, r), b = rnd({n, k}, r);
    return check({{"a", &a}, {"b", &b}}, r, tol, [](T&, V v) { return ad::matmul_nt(v[0], v[1]); });
  });
  c.emplace_back("add", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), n = pick(r, 1, 4);
    auto a = rnd({m, n}, r), b = rnd({m, n}, r);
    return check({{"a", &a}, {"b", &b}}, r, tol, [](T&, V v) { return ad::add(v[0], v[1]); });
  });
  c.emplace_back("sub", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), n = pick(r, 1, 4);
    auto a = rnd({m, n}, r), b = rnd({m, n}, r);
    return check({{"a", &a}, {"b", &b}}, r, tol, [](T&, V v) { return ad::sub(v[0], v[1]); });
  });
  c.emplace_back("mul", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), n = pick(r, 1, 4);
    auto a = rnd({m, n}, r), b = rnd({m, n}, r);
    return check({{"a", &a}, {"b", &b}}, r, tol, [](T&, V v) { return ad::mul(v[0], v[1]); });
  });
  c.emplace_back("div", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), n = pick(r, 1, 4);
    auto a = rnd({m, n}, r), b = away_from({m, n}, r, 0.5, 2.0);
    return check({{"a", &a}, {"b", &b}}, r, tol, [](T&, V v) { return ad::div(v[0], v[1]); });
  });
  c.emplace_back("add_bias", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), n = pick(r, 1, 5);
    auto x = rnd({m, n}, r), b = rnd({n}, r);
    return check({{"x", &x}, {"b", &b}}, r, tol, [](T&, V v) { return ad::add_bias(v[0], v[1]); });
  });
  c.emplace_back("scale", [](Rng& r, double tol) {
    auto x = rnd({pick(r, 1, 4), pick(r, 1, 4)}, r);
    const double s = 3.0 * (r.uniform() - 0.5);
    return check({{"x", &x}}, r, tol, [s](T&, V v) { return ad::scale(v[0], s); });
  });
  c.emplace_back("tanh", [](Rng& r, double tol) {
    auto x = rnd({pick(r, 1, 4), pick(r, 1, 4)}, r);
    return check({{"x", &x}}, r, tol, [](T&, V v) { return ad::tanh(v[0]); });
  });
  c.emplace_back("gelu", [](Rng& r, double tol) {
    auto x = rnd({pick(r, 1, 4), pick(r, 1, 4)}, r, 2.0);
    return check({{"x", &x}}, r, tol, [](T&, V v) { return ad::gelu(v[0]); });
  });
  c.emplace_back("log", [](Rng& r, double tol) {
    auto x = away_from({pick(r, 1, 4), pick(r, 1, 4)}, r, 0.2, 3.0);
    return check({{"x", &x}}, r, tol, [](T&, V v) { return ad::log(v[0]); });
  });
  // Entries sit at least 0.05 away from the clamp bounds (the kinks).
  c.emplace_back("clamp", [](Rng& r, double tol) {
    Tensor<double> x({pick(r, 1, 4), pick(r, 1, 4)});
    for (auto& v : x.data) {
      do v = 3.0 * (r.uniform() - 0.5);
      while (std::abs(v - 0.5) < 0.05 || std::abs(v + 0.5) < 0.05);
    }
    return check({{"x", &x}}, r, tol, [](T&, V v) { return ad::clamp(v[0], -0.5, 0.5); });
  });
  c.emplace_back("sum", [](Rng& r, double tol) {
    auto x = rnd({pick(r, 1, 4), pick(r, 1, 4)}, r);
    return check({{"x", &x}}, r, tol, [](T&, V v) { return ad::sum(v[0]); });
  });
  c.emplace_back("mean", [](Rng& r, double tol) {
    auto x = rnd({pick(r, 1, 4), pick(r, 1, 4)}, r);
    return check({{"x", &x}}, r, tol, [](T&, V v) { return ad::mean(v[0]); });
  });
  c.emplace_back("layer_norm", [](Rng& r, double tol) {
    // Two features normalize to +-1 regardless of x, so n starts at 3.
    auto m = pick(r, 1, 4), n = pick(r, 3, 6);
    auto x = rnd({m, n}, r), g = rnd({n}, r), b = rnd({n}, r);
    return check({{"x", &x}, {"gamma", &g}, {"beta", &b}}, r, tol,
                 [](T&, V v) { return ad::layer_norm(v[0], v[1], v[2], 1e-5); });
  });
  // The mask is redrawn from the same seed on every evaluation.
  c.emplace_back("dropout", [](Rng& r, double tol) {
    auto x = rnd({pick(r, 1, 4), pick(r, 1, 5)}, r);
    const auto seed = r.next();
    const double p = 0.1 + 0.5 * r.uniform();
    return check({{"x", &x}}, r, tol, [seed, p](T&, V v) {
      Rng d(seed);
      return ad::dropout(v[0], p, d);
    });
  });
  c.emplace_back("embedding", [](Rng& r, double tol) {
    auto vocab = pick(r, 2, 6), d = pick(r, 1, 4), n = pick(r, 1, 6);
    auto table = rnd({vocab, d}, r);
    std::vector<std::int32_t> ids(n);
    for (auto& i : ids) i = static_cast<std::int32_t>(r.below(vocab));
    return check({{"table", &table}}, r, tol, [ids](T&, V v) { return ad::embedding(v[0], ids); });
  });
  c.emplace_back("attention", [](Rng& r, double tol) {
    auto B = pick(r, 1, 3), L = pick(r, 1, 4), H = pick(r, 1, 2), dh = pick(r, 1, 3);
    auto q = rnd({B * L, H * dh}, r), k = rnd({B * L, H * dh}, r), v = rnd({B * L, H * dh}, r);
    std::vector<std::uint8_t> mask(B * L, 1);
    for (std::size_t b = 0; b < B; ++b) {
      const auto valid = pick(r, 1, L);
      for (std::size_t s = valid; s < L; ++s) mask[b * L + s] = 0;
    }
    return check({{"q", &q}, {"k", &k}, {"v", &v}}, r, tol,
                 [=](T&, V x) { return ad::attention(x[0], x[1], x[2], mask, B, L, H); });
  });
  c.emplace_back("select_rows", [](Rng& r, double tol) {
    auto m = pick(r, 1, 5), n = pick(r, 1, 4), k = pick(r, 1, 5);
    auto x = rnd({m, n}, r);
    std::vector<std::size_t> rows(k);
    for (auto& i : rows) i = r.below(m);
    return check({{"x", &x}}, r, tol, [rows](T&, V v) { return ad::select_rows(v[0], rows); });
  });
  c.emplace_back("masked_mean_rows", [](Rng& r, double tol) {
    auto B = pick(r, 1, 3), L = pick(r, 1, 4), d = pick(r, 1, 4);
    auto x = rnd({B * L, d}, r);
    std::vector<std::uint8_t> mask(B * L, 0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto valid = pick(r, 1, L);
      for (std::size_t s = 0; s < valid; ++s) mask[b * L + s] = 1;
    }
    return check({{"x", &x}}, r, tol, [=](T&, V v) { return ad::masked_mean_rows(v[0], mask, B, L); });
  });
  c.emplace_back("row_norm", [](Rng& r, double tol) {
    auto x = rnd({pick(r, 1, 4), pick(r, 1, 5)}, r);
    return check({{"x", &x}}, r, tol, [](T&, V v) { return ad::row_norm(v[0]); });
  });
  c.emplace_back("row_normalize", [](Rng& r, double tol) {
    auto x = rnd({pick(r, 1, 4), pick(r, 2, 5)}, r);
    return check({{"x", &x}}, r, tol, [](T&, V v) { return ad::row_normalize(v[0]); });
  });
  c.emplace_back("row_dot", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), n = pick(r, 1, 5);
    auto a = rnd({m, n}, r), b = rnd({m, n}, r);
    return check({{"a", &a}, {"b", &b}}, r, tol, [](T&, V v) { return ad::row_dot(v[0], v[1]); });
  });
  c.emplace_back("softmax", [](Rng& r, double tol) {
    auto x = rnd({pick(r, 1, 4), pick(r, 1, 5)}, r);
    const double tau = 0.2 + r.uniform();
    return check({{"x", &x}}, r, tol, [tau](T&, V v) { return ad::softmax(v[0], tau); });
  });
  c.emplace_back("softmax_cross_entropy", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), n = pick(r, 1, 5);
    auto x = rnd({m, n}, r, 2.0);
    std::vector<std::size_t> t(m);
    for (auto& i : t) i = r.below(n);
    return check({{"logits", &x}}, r, tol, [t](T&, V v) { return ad::softmax_cross_entropy(v[0], t); });
  });
  c.emplace_back("linear", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
    auto x = rnd({m, k}, r), w = rnd({k, n}, r), b = rnd({n}, r);
    return check({{"x", &x}, {"w", &w}, {"b", &b}}, r, tol, [](T&, V v) { return ad::linear(v[0], v[1], v[2]); });
  });
  c.emplace_back("cosine_rows", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), n = pick(r, 2, 5);
    auto a = rnd({m, n}, r), b = rnd({m, n}, r);
    return check({{"a", &a}, {"b", &b}}, r, tol, [](T&, V v) { return ad::cosine_rows(v[0], v[1]); });
  });
  c.emplace_back("cosine_matrix", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 2, 5);
    auto a = rnd({m, n}, r), b = rnd({k, n}, r);
    return check({{"a", &a}, {"b", &b}}, r, tol, [](T&, V v) { return ad::cosine_matrix(v[0], v[1]); });
  });

  // Losses. Random pairs are far from the h = h+ singularity with
  // probability one; the modulation cosine is kept inside (eps, 1).
  c.emplace_back("loss.l_tn", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), n = pick(r, 2, 5);
    auto p = rnd({m, n}, r), q = rnd({m, n}, r);
    return check({{"h", &p}, {"h_plus", &q}}, r, tol,
                 [](T&, V v) { return ad::mean(l_tn_rows(v[0], v[1], 1e-12)); });
  });
  c.emplace_back("loss.info_nce", [](Rng& r, double tol) {
    auto m = pick(r, 1, 5), n = pick(r, 2, 6);
    auto a = rnd({m, n}, r), b = rnd({m, n}, r);
    return check({{"h", &a}, {"h_plus", &b}}, r, tol, [](T&, V v) { return info_nce(v[0], v[1], 0.05); });
  });
  c.emplace_back("loss.icnce", [](Rng& r, double tol) {
    auto m = pick(r, 1, 5), n = pick(r, 2, 6);
    auto a = rnd({m, n}, r), b = rnd({m, n}, r);
    return check({{"hL_I", &a}, {"hL_II", &b}}, r, tol, [](T&, V v) { return icnce(v[0], v[1], 0.05); });
  });
  c.emplace_back("loss.l_tn_modulated", [](Rng& r, double tol) {
    auto m = pick(r, 1, 4), n = pick(r, 2, 5);
    auto p = rnd({m, n}, r), q = rnd({m, n}, r);
    // Last-hidden pairs built as x and x + small noise, so cosines are
    // positive and the clamp is inactive.
    auto hI = rnd({m, n}, r), hII = hI;
    for (auto& v : hII.data) v += 0.3 * r.normal();
    return check({{"hP_i", &p}, {"hP_j_plus", &q}, {"hL_I", &hI}, {"hL_II", &hII}}, r, tol,
                 [](T&, V v) { return l_tn_modulated(v[0], v[1], v[2], v[3], LossConfig{}); });
  });
  auto bundle_check = [](bool total) {
    return [total](Rng& r, double tol) {
      auto m = pick(r, 1, 4), n = pick(r, 2, 5);
      // First views of I and II are close (positive modulation cosine); the
      // second views are independent so the InfoNCE gradients do not vanish.
      std::vector<Tensor<double>> t(8);
      t[0] = rnd({m, n}, r);
      t[2] = t[0];
      for (auto& v : t[2].data) v += 0.3 * r.normal();
      t[1] = rnd({m, n}, r);
      t[3] = rnd({m, n}, r);
      for (int i = 4; i < 8; ++i) t[static_cast<std::size_t>(i)] = rnd({m, n}, r);
      std::vector<NamedParam> params;
      const char* names[] = {"hL_I", "hL_I+", "hL_II", "hL_II+", "hP_I", "hP_I+", "hP_II", "hP_II+"};
      for (int i = 0; i < 8; ++i) params.emplace_back(names[i], &t[static_cast<std::size_t>(i)]);
      return check(params, r, tol, [total](T&, V v) {
        ViewBundle<double> b{{v[0], v[4]}, {v[1], v[5]}, {v[2], v[6]}, {v[3], v[7]}};
        return total ? total_loss(b, LossConfig{}).total_var : ictn(b, LossConfig{});
      });
    };
  };
  c.emplace_back("loss.ictn", bundle_check(false));
  c.emplace_back("loss.total", bundle_check(true));

  // A one-layer double-precision encoder, dropout on, every parameter.
  c.emplace_back("encoder", [](Rng& r, double tol) {
    EncoderConfig cfg;
    cfg.vocab_size = 9;
    cfg.max_seq_len = 5;
    cfg.hidden_dim = 4;
    cfg.num_heads = 2;
    cfg.ffn_dim = 6;
    cfg.num_layers = 1;
    cfg.dropout_p = 0.1;
    cfg.pooling = r.below(2) ? PoolingMode::cls : PoolingMode::mean;
    Encoder<double> enc(cfg, r.next());
    // Larger weights than the 0.02 init, so every path carries gradient.
    for (auto& [n, p] : enc.parameters())
      for (auto& v : p->data) v += 0.5 * r.normal();
    TokenBatch batch;
    batch.batch = pick(r, 1, 3);
    batch.seq_len = cfg.max_seq_len;
    for (std::size_t b = 0; b < batch.batch; ++b) {
      const auto len = pick(r, 2, cfg.max_seq_len);
      for (std::size_t s = 0; s < cfg.max_seq_len; ++s) {
        batch.ids.push_back(s < len ? static_cast<std::int32_t>(r.below(cfg.vocab_size)) : 0);
        batch.mask.push_back(s < len ? 1 : 0);
      }
    }
    const auto seed = r.next();
    auto wl = rnd({batch.batch, cfg.hidden_dim}, r), wp = rnd({batch.batch, cfg.hidden_dim}, r);
    std::vector<NamedParam> params;
    for (auto& [n, p] : enc.parameters()) params.emplace_back(n, p);
    return gradient_check(
        params,
        [&](Tape<double>& t) {
          auto o = encode(t, enc, batch, EncodeOptions{true, 0, seed, 1});
          return ad::add(project(o.last_hidden, wl), project(o.pooler, wp));
        },
        1e-4, tol);
  });
  return c;
}

inline std::vector<GradSuiteEntry> run_grad_suite(std::size_t configs = 20, std::uint64_t seed = 1,
                                                  double tolerance = 1e-6) {
  std::vector<GradSuiteEntry> out;
  std::uint64_t k = 0;
  for (auto& [name, fn] : grad_suite_checks()) {
    GradSuiteEntry e{name, configs, 0.0, true};
    for (std::size_t i = 0; i < configs; ++i) {
      Rng r(derive_seed({seed, k, i, 0x6C4ULL}));
      const auto res = fn(r, tolerance);
      e.max_error = std::max(e.max_error, max_error(res));
      e.passed = e.passed && all_passed(res);
    }
    ++k;
    out.push_back(e);
  }
  return out;
}

}  // namespace tncse
