#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tncse/data.hpp"
#include "tncse/encoder.hpp"
#include "tncse/tensor.hpp"
#include "tncse/vector_ops.hpp"

namespace tncse {

// Ranks starting at 1; tied values share their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  const auto n = x.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Spearman's rho as the Pearson correlation of average ranks.
inline double spearman(std::span<const double> pred, std::span<const double> gold) {
  if (pred.size() != gold.size())
    throw InvalidArgument("spearman: length mismatch " + std::to_string(pred.size()) + " vs " +
                          std::to_string(gold.size()));
  if (pred.size() < 2) throw InvalidArgument("spearman: undefined for fewer than 2 items");
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
  };
  if (constant(pred)) throw InvalidArgument("spearman: undefined for constant predictions");
  if (constant(gold)) throw InvalidArgument("spearman: undefined for constant gold scores");
  const auto rp = average_ranks(pred), rg = average_ranks(gold);
  return std::clamp(pearson(rp, rg), -1.0, 1.0);
}

inline double spearman(const std::vector<double>& pred, const std::vector<double>& gold) {
  return spearman(std::span<const double>(pred), std::span<const double>(gold));
}

// Maps sentences to embedding rows.
using EmbedFn = std::function<Tensor<double>(const std::vector<std::string>&)>;

// Spearman between cos(embed(a), embed(b)) and the gold scores.
inline double sts_eval(const EmbedFn& embed, const std::vector<StsPair>& dataset) {
  if (dataset.size() < 2) throw InvalidArgument("sts_eval: need at least 2 pairs (rho undefined otherwise)");
  std::vector<std::string> a, b;
  std::vector<double> gold;
  for (const auto& p : dataset) {
    a.push_back(p.sentence_a);
    b.push_back(p.sentence_b);
    gold.push_back(p.gold_score);
  }
  const auto ea = embed(a), eb = embed(b);
  const auto d = ea.cols();
  std::vector<double> pred(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i)
    pred[i] = cosine_sim(std::span<const double>(&ea.data[i * d], d), std::span<const double>(&eb.data[i * d], d));
  return spearman(pred, gold);
}

namespace eval_detail {

inline std::vector<double> normalized_row(const Tensor<double>& x, std::size_t r) {
  const auto d = x.cols();
  std::vector<double> v(x.data.begin() + static_cast<std::ptrdiff_t>(r * d),
                        x.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
  const double n = l2_norm(std::span<const double>(v));
  if (!(n > 0.0)) throw InvalidArgument("alignment/uniformity: zero embedding row " + std::to_string(r));
  for (auto& e : v) e /= n;
  return v;
}

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace eval_detail

// Mean squared distance between L2-normalized positive pairs (alpha = 2).
inline double alignment(const Tensor<double>& x, const Tensor<double>& x_pos) {
  if (x.rows() == 0 || x.numel() == 0) throw InvalidArgument("alignment: empty input");
  if (x.shape != x_pos.shape) throw InvalidArgument("alignment: pair shapes differ");
  double s = 0;
  for (std::size_t r = 0; r < x.rows(); ++r)
    s += eval_detail::sq_dist(eval_detail::normalized_row(x, r), eval_detail::normalized_row(x_pos, r));
  return s / static_cast<double>(x.rows());
}

// log mean over distinct pairs of exp(-2 |x_i - x_j|^2) on the unit sphere (t = 2).
inline double uniformity(const Tensor<double>& x) {
  const auto n = x.numel() == 0 ? 0 : x.rows();
  if (n < 2) throw InvalidArgument("uniformity: need at least 2 embeddings");
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < n; ++r) rows.push_back(eval_detail::normalized_row(x, r));
  double s = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) s += std::exp(-2.0 * eval_detail::sq_dist(rows[i], rows[j]));
  return std::log(s / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1)));
}

struct NormStats {
  double mean = 0, std = 0, cv = 0;
};

inline NormStats norm_stats(const Tensor<double>& x) {
  NormStats s;
  const auto n = x.rows(), d = x.cols();
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) norms[r] = l2_norm(std::span<const double>(&x.data[r * d], d));
  s.mean = std::accumulate(norms.begin(), norms.end(), 0.0) / static_cast<double>(n);
  double v = 0;
  for (double q : norms) v += (q - s.mean) * (q - s.mean);
  s.std = std::sqrt(v / static_cast<double>(n));
  s.cv = s.mean > 0 ? s.std / s.mean : 0.0;
  return s;
}

struct ProbeRow {
  std::size_t stripped = 0;
  NormStats last_hidden;
  NormStats pooler;
};

template <class T>
Tensor<double> to_double(const Tensor<T>& t) {
  return t.template cast<double>();
}

// Norm statistics of h^L and h^P with the last n LayerNorms removed, one row
// per requested n.
template <class T>
std::vector<ProbeRow> norm_probe(const Encoder<T>& enc, const Vocab& vocab, const std::vector<std::string>& sentences,
                                 const std::vector<std::size_t>& strip_counts) {
  std::vector<std::string> distinct = sentences;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 100)
    throw InvalidArgument("norm_probe: need at least 100 distinct sentences, got " + std::to_string(distinct.size()));
  std::vector<ProbeRow> out;
  for (auto n : strip_counts) {
    auto stripped = strip_layernorms(enc, n);
    auto o = encode_sentences(stripped, vocab, sentences);
    out.push_back({n, norm_stats(to_double(o.last_hidden)), norm_stats(to_double(o.pooler))});
  }
  return out;
}

template <class T>
EmbedFn encoder_embed_fn(const Encoder<T>& enc, const Vocab& vocab) {
  return [&enc, &vocab](const std::vector<std::string>& s) {
    return to_double(encode_sentences(enc, vocab, s).last_hidden);
  };
}

struct EvalReport {
  std::string model;
  std::map<std::string, double> spearman;  // per dataset
  double average = 0.0;
  std::optional<double> alignment_value;
  std::optional<double> uniformity_value;
  std::vector<ProbeRow> probe;

  void finalize() {
    double s = 0;
    for (auto& [k, v] : spearman) s += v;
    average = spearman.empty() ? 0.0 : s / static_cast<double>(spearman.size());
  }

  std::string text() const {
    std::ostringstream os;
    os << "# evaluation report: " << model << "\n";
    os << "# alignment: mean |f(x) - f(x+)|^2 over normalized positive pairs (alpha = 2)\n";
    os << "# uniformity: log mean exp(-2 |f(x) - f(y)|^2) over normalized distinct pairs (t = 2)\n";
    for (auto& [k, v] : spearman) os << "spearman[" << k << "] = " << format_number(v) << "\n";
    os << "spearman[avg] = " << format_number(average) << "\n";
    if (alignment_value) os << "alignment = " << format_number(*alignment_value) << "\n";
    if (uniformity_value) os << "uniformity = " << format_number(*uniformity_value) << "\n";
    if (!probe.empty()) {
      os << "norm probe (stripped: mean/std/cv of |h^L| | mean/std/cv of |h^P|)\n";
      for (const auto& r : probe)
        os << "  " << r.stripped << ": " << format_number(r.last_hidden.mean) << " / "
           << format_number(r.last_hidden.std) << " / " << format_number(r.last_hidden.cv) << " | "
           << format_number(r.pooler.mean) << " / " << format_number(r.pooler.std) << " / "
           << format_number(r.pooler.cv) << "\n";
    }
    return os.str();
  }

  std::string key_values() const {
    std::ostringstream os;
    os << "model=" << model << "\n";
    for (auto& [k, v] : spearman) os << "spearman." << k << "=" << format_number(v) << "\n";
    os << "spearman.avg=" << format_number(average) << "\n";
    if (alignment_value) os << "alignment=" << format_number(*alignment_value) << "\n";
    if (uniformity_value) os << "uniformity=" << format_number(*uniformity_value) << "\n";
    os << "alignment.alpha=2\nuniformity.t=2\n";
    return os.str();
  }
};

inline std::string probe_csv(const std::vector<ProbeRow>& rows) {
  std::ostringstream os;
  os << "stripped,hl_mean,hl_std,hl_cv,hp_mean,hp_std,hp_cv\n";
  for (const auto& r : rows)
    os << r.stripped << ',' << format_number(r.last_hidden.mean) << ',' << format_number(r.last_hidden.std) << ','
       << format_number(r.last_hidden.cv) << ',' << format_number(r.pooler.mean) << ','
       << format_number(r.pooler.std) << ',' << format_number(r.pooler.cv) << '\n';
  return os.str();
}

}  // namespace tncse
