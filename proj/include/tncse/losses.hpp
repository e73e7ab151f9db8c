#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tncse/autodiff.hpp"
#include "tncse/encoder.hpp"
#include "tncse/vector_ops.hpp"

namespace tncse {

// Subset of {NCE, ICNCE, ICTN}, stored as bits 1, 2, 4.
class TermSet {
 public:
  static constexpr unsigned nce = 1, icnce = 2, ictn = 4;

  constexpr TermSet() = default;
  constexpr explicit TermSet(unsigned bits) : bits_(bits & 7u) {}
  static constexpr TermSet all() { return TermSet(7); }

  constexpr bool has(unsigned term) const { return (bits_ & term) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr unsigned bits() const { return bits_; }
  bool operator==(const TermSet&) const = default;

  // "nce+icnce+ictn" style; order-insensitive.
  static TermSet parse(const std::string& s) {
    unsigned bits = 0;
    std::size_t start = 0;
    for (;;) {
      auto plus = s.find('+', start);
      auto tok = s.substr(start, plus - start);
      if (tok == "nce") bits |= nce;
      else if (tok == "icnce") bits |= icnce;
      else if (tok == "ictn") bits |= ictn;
      else throw InvalidArgument("unknown loss term '" + tok + "' (expected nce, icnce, ictn joined by '+')");
      if (plus == std::string::npos) break;
      start = plus + 1;
    }
    return TermSet(bits);
  }

  std::string str() const {
    std::string out;
    auto app = [&](const char* t) { out += (out.empty() ? "" : "+") + std::string(t); };
    if (has(nce)) app("nce");
    if (has(icnce)) app("icnce");
    if (has(ictn)) app("ictn");
    return out.empty() ? "none" : out;
  }

  // The seven non-empty subsets in a fixed order.
  static std::vector<TermSet> non_empty_subsets() {
    return {TermSet(nce), TermSet(icnce), TermSet(ictn), TermSet(nce | icnce),
            TermSet(nce | ictn), TermSet(icnce | ictn), TermSet(nce | icnce | ictn)};
  }

 private:
  unsigned bits_ = 0;
};

// Which last-hidden cosine drives the -log(sim) modulation of the norm term.
enum class ModulationViews { first_view, view_average };

inline std::string to_string(ModulationViews m) { return m == ModulationViews::first_view ? "view1" : "average"; }
inline ModulationViews parse_modulation(const std::string& s) {
  if (s == "view1") return ModulationViews::first_view;
  if (s == "average") return ModulationViews::view_average;
  throw InvalidArgument("unknown modulation '" + s + "' (expected view1 or average)");
}

struct LossConfig {
  double tau = 0.05;
  double sim_clamp_eps = 1e-4;
  double norm_eps = 1e-12;
  TermSet enabled = TermSet::all();
  ModulationViews modulation = ModulationViews::first_view;

  void validate() const {
    if (!(tau > 0.0)) throw InvalidArgument("loss: tau must be positive");
    if (!(sim_clamp_eps > 0.0 && sim_clamp_eps < 1.0)) throw InvalidArgument("loss: sim_clamp_eps must lie in (0, 1)");
    if (!(norm_eps >= 0.0)) throw InvalidArgument("loss: norm_eps must be non-negative");
  }
};

// --- scalar forms -----------------------------------------------------------

// |h - h+| / (|h| + |h+|), in [0, 1].
template <class T>
T l_tn(std::span<const T> h, std::span<const T> h_plus) {
  if (h.size() != h_plus.size()) throw InvalidArgument("l_tn: length mismatch");
  const T nh = l2_norm(h), np = l2_norm(h_plus);
  if (!(nh > T(0)) || !(np > T(0))) throw InvalidArgument("l_tn: zero-norm input");
  T s = 0;
  for (std::size_t i = 0; i < h.size(); ++i) s += (h[i] - h_plus[i]) * (h[i] - h_plus[i]);
  return std::sqrt(s) / (nh + np);
}

// The same loss written in the norm ratio k = |h+|/|h| and cosine t.
inline double l_tn_kt(double k, double t) {
  if (!(k > 0.0) || !std::isfinite(k)) throw InvalidArgument("l_tn_kt: k must be positive");
  if (!(t >= -1.0 && t <= 1.0)) throw InvalidArgument("l_tn_kt: t must lie in [-1, 1]");
  return std::sqrt(std::max(0.0, 1.0 + k * k - 2.0 * k * t)) / (1.0 + k);
}

// --- differentiable forms ---------------------------------------------------

namespace loss_detail {

template <class T>
void require_nonzero_rows(Var<T> x, const char* op) {
  const auto m = x.rows(), n = x.cols();
  const auto& v = x.value();
  for (std::size_t r = 0; r < m; ++r) {
    T s = 0;
    for (std::size_t c = 0; c < n; ++c) s += v[r * n + c] * v[r * n + c];
    if (!(s > T(0))) throw InvalidArgument(std::string(op) + ": zero-norm row " + std::to_string(r));
  }
}

}  // namespace loss_detail

// Batch-mean InfoNCE with in-batch negatives; the denominator includes the
// positive term.
template <class T>
Var<T> info_nce(Var<T> anchors, Var<T> positives, T tau) {
  if (anchors.shape() != positives.shape())
    throw InvalidArgument("info_nce: shape mismatch " + shape_str(anchors.shape()) + " vs " +
                          shape_str(positives.shape()));
  if (anchors.rows() < 1) throw InvalidArgument("info_nce: empty batch");
  if (!(tau > T(0))) throw InvalidArgument("info_nce: tau must be positive");
  loss_detail::require_nonzero_rows(anchors, "info_nce");
  loss_detail::require_nonzero_rows(positives, "info_nce");
  std::vector<std::size_t> diag(anchors.rows());
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = i;
  return ad::softmax_cross_entropy(ad::scale(ad::cosine_matrix(anchors, positives), T(1) / tau), diag);
}

// Cross-encoder InfoNCE: Encoder I rows anchor, Encoder II rows are the
// positives and negatives.
template <class T>
Var<T> icnce(Var<T> last_hidden_I, Var<T> last_hidden_II, T tau) {
  return info_nce(last_hidden_I, last_hidden_II, tau);
}

// Per-row norm ratio |p - q| / (|p| + |q|) -> [batch x 1].
template <class T>
Var<T> l_tn_rows(Var<T> p, Var<T> q, T norm_eps) {
  loss_detail::require_nonzero_rows(p, "l_tn");
  loss_detail::require_nonzero_rows(q, "l_tn");
  using namespace ad;
  return div(row_norm(sub(p, q), norm_eps), add(row_norm(p), row_norm(q)));
}

// Per-row cosine that drives the modulation term, before clamping.
template <class T>
Var<T> modulation_similarity(const ViewBundle<T>& v, ModulationViews mode) {
  auto first = ad::cosine_rows(v.enc_I.last_hidden, v.enc_II.last_hidden);
  if (mode == ModulationViews::first_view) return first;
  auto second = ad::cosine_rows(v.enc_I_plus.last_hidden, v.enc_II_plus.last_hidden);
  return ad::scale(ad::add(first, second), T(0.5));
}

// mean_i [ -log(clamp(sim_i, eps, 1)) * |p_i - q_i| / (|p_i| + |q_i|) ].
template <class T>
Var<T> l_tn_modulated(Var<T> pooler_i, Var<T> pooler_j_plus, Var<T> sim_rows, const LossConfig& cfg) {
  using namespace ad;
  auto mod = scale(log(clamp(sim_rows, static_cast<T>(cfg.sim_clamp_eps), T(1))), T(-1));
  return mean(mul(mod, l_tn_rows(pooler_i, pooler_j_plus, static_cast<T>(cfg.norm_eps))));
}

// Overload taking the two last-hidden batches whose row cosine modulates.
template <class T>
Var<T> l_tn_modulated(Var<T> pooler_i, Var<T> pooler_j_plus, Var<T> last_hidden_I, Var<T> last_hidden_II,
                      const LossConfig& cfg) {
  return l_tn_modulated(pooler_i, pooler_j_plus, ad::cosine_rows(last_hidden_I, last_hidden_II), cfg);
}

// Symmetric cross-encoder norm constraint on pooler outputs.
template <class T>
Var<T> ictn(const ViewBundle<T>& v, const LossConfig& cfg) {
  auto sim = modulation_similarity(v, cfg.modulation);
  return ad::add(l_tn_modulated(v.enc_I.pooler, v.enc_II_plus.pooler, sim, cfg),
                 l_tn_modulated(v.enc_II.pooler, v.enc_I_plus.pooler, sim, cfg));
}

template <class T>
struct LossBundle {
  std::optional<double> l_nce_I;
  std::optional<double> l_nce_II;
  std::optional<double> l_icnce;
  std::optional<double> l_ictn;
  double total = 0.0;
  Var<T> total_var;

  bool finite() const {
    auto ok = [](const std::optional<double>& x) { return !x || std::isfinite(*x); };
    return ok(l_nce_I) && ok(l_nce_II) && ok(l_icnce) && ok(l_ictn) && std::isfinite(total);
  }
};

// Sum of the enabled terms: per-encoder InfoNCE on each encoder's own dropout
// pair, cross-encoder InfoNCE, and the cross-encoder pooler norm constraint.
template <class T>
LossBundle<T> total_loss(const ViewBundle<T>& v, const LossConfig& cfg) {
  cfg.validate();
  if (cfg.enabled.empty()) throw InvalidArgument("total_loss: no loss terms enabled");
  const T tau = static_cast<T>(cfg.tau);
  LossBundle<T> out;
  std::vector<Var<T>> terms;
  if (cfg.enabled.has(TermSet::nce)) {
    auto a = info_nce(v.enc_I.last_hidden, v.enc_I_plus.last_hidden, tau);
    auto b = info_nce(v.enc_II.last_hidden, v.enc_II_plus.last_hidden, tau);
    out.l_nce_I = a.item();
    out.l_nce_II = b.item();
    terms.push_back(a);
    terms.push_back(b);
  }
  if (cfg.enabled.has(TermSet::icnce)) {
    auto c = icnce(v.enc_I.last_hidden, v.enc_II.last_hidden, tau);
    out.l_icnce = c.item();
    terms.push_back(c);
  }
  if (cfg.enabled.has(TermSet::ictn)) {
    auto d = ictn(v, cfg);
    out.l_ictn = d.item();
    terms.push_back(d);
  }
  Var<T> total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  out.total_var = total;
  out.total = total.item();
  return out;
}

}  // namespace tncse
