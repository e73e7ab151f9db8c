#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tncse/data.hpp"
#include "tncse/encoder.hpp"
#include "tncse/ensemble.hpp"
#include "tncse/errors.hpp"
#include "tncse/evaluation.hpp"
#include "tncse/losses.hpp"
#include "tncse/optimizer.hpp"

namespace tncse {

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t batch_size = 32;
  std::size_t steps = 2000;
  std::size_t eval_interval = 100;
  OptimConfig optim;
  LossConfig loss;
  double single_tn_weight = 1.0;
  // Reload the parameters of the best validation step once training ends.
  bool restore_best = true;

  void validate() const {
    if (eval_interval < 1) throw InvalidArgument("train: eval_interval must be >= 1");
    if (steps < eval_interval)
      throw InvalidArgument("train: steps (" + std::to_string(steps) + ") must be >= eval_interval (" +
                            std::to_string(eval_interval) + ")");
    if (batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
    if (!(single_tn_weight >= 0.0)) throw InvalidArgument("train: single_tn_weight must be non-negative");
    optim.validate();
    loss.validate();
  }
};

struct StepRecord {
  std::size_t step = 0;
  std::optional<double> l_nce_I, l_nce_II, l_icnce, l_ictn, l_tn, l_distill;
  double total = 0.0;
};

struct EvalRecord {
  std::size_t step = 0;
  double val_spearman = 0.0;
  std::optional<double> val_distill;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  // First argmax of the logged validation Spearman.
  std::size_t best_index() const {
    if (evals.empty()) throw InvalidArgument("train log has no evaluations");
    std::size_t best = 0;
    for (std::size_t i = 1; i < evals.size(); ++i)
      if (evals[i].val_spearman > evals[best].val_spearman) best = i;
    return best;
  }
  std::size_t best_step() const { return evals[best_index()].step; }
  double best_spearman() const { return evals[best_index()].val_spearman; }
  double initial_spearman() const { return evals.at(0).val_spearman; }

  std::string csv() const {
    auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
    std::ostringstream os;
    os << "step,l_nce_I,l_nce_II,l_icnce,l_ictn,l_tn,l_distill,total,val_spearman,val_distill\n";
    std::size_t e = 0;
    auto emit_eval_only = [&](const EvalRecord& r) {
      os << r.step << ",,,,,,,," << format_number(r.val_spearman) << ',' << opt(r.val_distill) << '\n';
    };
    for (const auto& s : steps) {
      while (e < evals.size() && evals[e].step < s.step) emit_eval_only(evals[e++]);
      os << s.step << ',' << opt(s.l_nce_I) << ',' << opt(s.l_nce_II) << ',' << opt(s.l_icnce) << ','
         << opt(s.l_ictn) << ',' << opt(s.l_tn) << ',' << opt(s.l_distill) << ',' << format_number(s.total) << ',';
      if (e < evals.size() && evals[e].step == s.step) {
        os << format_number(evals[e].val_spearman) << ',' << opt(evals[e].val_distill);
        ++e;
      } else {
        os << ',';
      }
      os << '\n';
    }
    while (e < evals.size()) emit_eval_only(evals[e++]);
    return os.str();
  }
};

// Validation data and the corpus a run draws batches from.
struct TrainData {
  const std::vector<std::string>* corpus = nullptr;
  const Vocab* vocab = nullptr;
  const std::vector<StsPair>* dev = nullptr;

  void validate() const {
    if (!corpus || corpus->empty()) throw DataError("training corpus is empty");
    if (!vocab) throw InvalidArgument("train: no vocabulary");
    if (!dev || dev->size() < 2) throw DataError("validation set needs at least 2 pairs");
  }
};

namespace train_detail {

inline std::uint64_t batch_seed(std::uint64_t seed) { return derive_seed({seed, 0xBA7C4ULL}); }

inline TokenBatch batch_at(BatchSchedule& sched, const TrainData& d, std::size_t step, std::size_t max_len) {
  std::vector<std::string> s;
  for (auto i : sched.at(step)) s.push_back((*d.corpus)[i]);
  return make_batch(*d.vocab, s, max_len);
}

template <class T>
void append_params(std::vector<Tensor<T>*>& out, Encoder<T>& enc) {
  for (auto& [name, p] : enc.parameters()) out.push_back(p);
}

}  // namespace train_detail

struct Validation {
  double spearman = 0.0;
  std::optional<double> aux;
};

// Generic loop. `step_fn(step)` builds the loss for update `step` (1-based),
// runs backward and returns the record; the loop then checks finiteness and
// applies Adam. Validation runs before the first update, every
// eval_interval updates and after the last one.
template <class StepFn, class ValFn>
TrainLog run_training(const TrainConfig& cfg, const std::vector<Tensor<float>*>& params, StepFn&& step_fn,
                      ValFn&& val_fn) {
  cfg.validate();
  Adam<float> adam(params, cfg.optim);
  TrainLog log;
  std::vector<std::vector<float>> best;
  auto snapshot = [&] {
    best.clear();
    for (auto* p : params) best.push_back(p->data);
  };
  auto evaluate = [&](std::size_t step) {
    const Validation v = val_fn();
    if (!std::isfinite(v.spearman))
      throw NumericError("non-finite validation Spearman at step " + std::to_string(step));
    const bool improved = log.evals.empty() || v.spearman > log.best_spearman();
    log.evals.push_back({step, v.spearman, v.aux});
    if (improved) snapshot();
  };
  evaluate(0);
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    StepRecord rec = step_fn(s);
    rec.step = s;
    auto bad = [](const std::optional<double>& x) { return x && !std::isfinite(*x); };
    if (!std::isfinite(rec.total) || bad(rec.l_nce_I) || bad(rec.l_nce_II) || bad(rec.l_icnce) || bad(rec.l_ictn) ||
        bad(rec.l_tn) || bad(rec.l_distill))
      throw NumericError("non-finite loss at step " + std::to_string(s));
    for (auto* p : params)
      for (float g : p->grad)
        if (!std::isfinite(g)) throw NumericError("non-finite gradient at step " + std::to_string(s));
    log.steps.push_back(rec);
    adam.step();
    adam.zero_grad();
    if (s % cfg.eval_interval == 0 || s == cfg.steps) evaluate(s);
  }
  if (cfg.restore_best)
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->data = best[i];
  return log;
}

// Positive views for single-encoder pretraining: by default the same batch
// under a second dropout mask; with an augmenter, a synonym-substituted copy.
struct AugmentSpec {
  const Augmenter* augmenter = nullptr;
};

namespace train_detail {

inline TokenBatch positive_batch(const AugmentSpec& aug, const TokenBatch& batch, BatchSchedule& sched,
                                 const TrainData& data, std::uint64_t seed, std::uint64_t stream_id, std::size_t s,
                                 std::size_t max_len) {
  if (!aug.augmenter) return batch;
  Rng r(derive_seed({seed, stream_id, s, 0xA0ULL}));
  std::vector<std::string> sent;
  for (auto i : sched.at(s - 1)) sent.push_back(aug.augmenter->augment((*data.corpus)[i], r));
  return make_batch(*data.vocab, sent, max_len);
}

}  // namespace train_detail

// InfoNCE on (dropout view, dropout view) pairs for one encoder.
inline TrainLog pretrain_single(Encoder<float>& enc, const TrainData& data, const TrainConfig& cfg,
                                AugmentSpec aug = {}) {
  data.validate();
  cfg.validate();
  if (enc.vocab_hash != data.vocab->hash()) throw InvalidArgument("pretrain: encoder and vocabulary disagree");
  BatchSchedule sched(data.corpus->size(), cfg.batch_size, train_detail::batch_seed(cfg.seed));
  std::vector<Tensor<float>*> params;
  train_detail::append_params(params, enc);
  const auto max_len = enc.config.max_seq_len;
  const float tau = static_cast<float>(cfg.loss.tau);
  auto step = [&](std::size_t s) {
    const auto batch = train_detail::batch_at(sched, data, s - 1, max_len);
    const auto pos = train_detail::positive_batch(aug, batch, sched, data, cfg.seed, enc.stream_id, s, max_len);
    Tape<float> tape;
    auto a = encode(tape, enc, batch, EncodeOptions{true, 0, cfg.seed, s});
    auto b = encode(tape, enc, pos, EncodeOptions{true, 1, cfg.seed, s});
    auto loss = info_nce(a.last_hidden, b.last_hidden, tau);
    tape.backward(loss);
    StepRecord r;
    r.l_nce_I = r.total = loss.item();
    return r;
  };
  auto val = [&] { return Validation{sts_eval(encoder_embed_fn(enc, *data.vocab), *data.dev), {}}; };
  return run_training(cfg, params, step, val);
}

// Joint update of both encoders from the enabled terms of the total loss;
// validation scores the summed embedding.
inline TrainLog train_tncse(Encoder<float>& enc_I, Encoder<float>& enc_II, const TrainData& data,
                            const TrainConfig& cfg) {
  data.validate();
  cfg.validate();
  if (enc_I.vocab_hash != enc_II.vocab_hash) throw InvalidArgument("train: the two encoders use different vocabularies");
  if (enc_I.vocab_hash != data.vocab->hash()) throw InvalidArgument("train: encoders and corpus vocabulary disagree");
  if (enc_I.config.hidden_dim != enc_II.config.hidden_dim)
    throw InvalidArgument("train: encoders differ in hidden_dim");
  if (enc_I.stream_id == enc_II.stream_id) throw InvalidArgument("train: encoders share a dropout stream id");
  if (cfg.loss.enabled.empty()) throw InvalidArgument("train: no loss terms enabled");
  BatchSchedule sched(data.corpus->size(), cfg.batch_size, train_detail::batch_seed(cfg.seed));
  std::vector<Tensor<float>*> params;
  train_detail::append_params(params, enc_I);
  train_detail::append_params(params, enc_II);
  const auto max_len = std::min(enc_I.config.max_seq_len, enc_II.config.max_seq_len);
  auto step = [&](std::size_t s) {
    const auto batch = train_detail::batch_at(sched, data, s - 1, max_len);
    Tape<float> tape;
    auto views = dual_view(tape, enc_I, enc_II, batch, cfg.seed, s);
    auto losses = total_loss(views, cfg.loss);
    tape.backward(losses.total_var);
    StepRecord r;
    r.l_nce_I = losses.l_nce_I;
    r.l_nce_II = losses.l_nce_II;
    r.l_icnce = losses.l_icnce;
    r.l_ictn = losses.l_ictn;
    r.total = losses.total;
    return r;
  };
  EnsembleModel<float> ens({&enc_I, &enc_II}, *data.vocab);
  auto val = [&] { return Validation{sts_eval(ensemble_embed_fn(ens), *data.dev), {}}; };
  return run_training(cfg, params, step, val);
}

// pretrain_single's objective plus the modulated norm term on the two pooler
// outputs, scaled by single_tn_weight.
inline TrainLog train_single_tn(Encoder<float>& enc, const TrainData& data, const TrainConfig& cfg,
                                AugmentSpec aug = {}) {
  data.validate();
  cfg.validate();
  if (enc.vocab_hash != data.vocab->hash()) throw InvalidArgument("train: encoder and vocabulary disagree");
  BatchSchedule sched(data.corpus->size(), cfg.batch_size, train_detail::batch_seed(cfg.seed));
  std::vector<Tensor<float>*> params;
  train_detail::append_params(params, enc);
  const auto max_len = enc.config.max_seq_len;
  const float tau = static_cast<float>(cfg.loss.tau);
  auto step = [&](std::size_t s) {
    const auto batch = train_detail::batch_at(sched, data, s - 1, max_len);
    const auto pos = train_detail::positive_batch(aug, batch, sched, data, cfg.seed, enc.stream_id, s, max_len);
    Tape<float> tape;
    auto a = encode(tape, enc, batch, EncodeOptions{true, 0, cfg.seed, s});
    auto b = encode(tape, enc, pos, EncodeOptions{true, 1, cfg.seed, s});
    auto nce = info_nce(a.last_hidden, b.last_hidden, tau);
    auto tn = l_tn_modulated(a.pooler, b.pooler, a.last_hidden, b.last_hidden, cfg.loss);
    auto total = ad::add(nce, ad::scale(tn, static_cast<float>(cfg.single_tn_weight)));
    tape.backward(total);
    StepRecord r;
    r.l_nce_I = nce.item();
    r.l_tn = tn.item();
    r.total = total.item();
    return r;
  };
  auto val = [&] { return Validation{sts_eval(encoder_embed_fn(enc, *data.vocab), *data.dev), {}}; };
  return run_training(cfg, params, step, val);
}

// --- pipelines --------------------------------------------------------------

struct AugmentConfig {
  bool enabled = true;
  double coverage = 0.5;
  double swap_p = 0.5;

  void validate() const {
    if (!(coverage >= 0.0 && coverage <= 1.0)) throw InvalidArgument("augment: coverage must lie in [0, 1]");
    if (!(swap_p >= 0.0 && swap_p <= 1.0)) throw InvalidArgument("augment: swap_p must lie in [0, 1]");
  }
};

inline std::uint64_t init_seed(std::uint64_t seed, std::uint64_t stream_id) {
  return derive_seed({seed, stream_id, 0x1A17ULL});
}

// Fresh encoder for a given run seed and stream; `init_stream` picks the
// initial weights and defaults to the dropout stream.
inline Encoder<float> make_encoder(EncoderConfig cfg, const Vocab& vocab, std::uint64_t seed, std::uint64_t stream_id,
                                   std::optional<std::uint64_t> init_stream = std::nullopt) {
  cfg.vocab_size = vocab.size();
  Encoder<float> enc(cfg, init_seed(seed, init_stream.value_or(stream_id)));
  enc.stream_id = stream_id;
  enc.vocab_hash = vocab.hash();
  return enc;
}

struct PretrainedPair {
  Encoder<float> enc_I, enc_II;
  TrainLog log_I, log_II;
};

// Two independently initialized encoders (streams 0 and 1), each pretrained
// with its own augmenter member.
inline PretrainedPair pretrain_pair(const EncoderConfig& ecfg, const TrainData& data, const TrainConfig& cfg,
                                    const SynonymTable* table, const AugmentConfig& acfg) {
  acfg.validate();
  PretrainedPair out;
  out.enc_I = make_encoder(ecfg, *data.vocab, cfg.seed, 0);
  out.enc_II = make_encoder(ecfg, *data.vocab, cfg.seed, 1);
  std::optional<Augmenter> aug_I, aug_II;
  if (acfg.enabled && table) {
    aug_I.emplace(*table, cfg.seed, 0, acfg.coverage, acfg.swap_p);
    aug_II.emplace(*table, cfg.seed, 1, acfg.coverage, acfg.swap_p);
  }
  out.log_I = pretrain_single(out.enc_I, data, cfg, AugmentSpec{aug_I ? &*aug_I : nullptr});
  out.log_II = pretrain_single(out.enc_II, data, cfg, AugmentSpec{aug_II ? &*aug_II : nullptr});
  return out;
}

struct AblationRow {
  std::string name;  // "baseline" or a term set such as "nce+ictn"
  TermSet terms;
  double val_spearman = 0.0;
  std::size_t best_step = 0;
  TrainLog log;
};

inline double ensemble_spearman(const Encoder<float>& a, const Encoder<float>& b, const TrainData& data) {
  EnsembleModel<float> ens({&a, &b}, *data.vocab);
  return sts_eval(ensemble_embed_fn(ens), *data.dev);
}

// Untrained-pair baseline followed by one dual run per non-empty term subset,
// each starting from the same pretrained pair.
inline std::vector<AblationRow> run_ablation(const PretrainedPair& pair, const TrainData& data, const TrainConfig& cfg,
                                             const std::function<void(const AblationRow&)>& on_row = {}) {
  std::vector<AblationRow> rows;
  AblationRow base;
  base.name = "baseline";
  base.val_spearman = ensemble_spearman(pair.enc_I, pair.enc_II, data);
  rows.push_back(base);
  if (on_row) on_row(rows.back());
  for (auto terms : TermSet::non_empty_subsets()) {
    auto I = pair.enc_I, II = pair.enc_II;
    TrainConfig c = cfg;
    c.loss.enabled = terms;
    AblationRow r;
    r.name = terms.str();
    r.terms = terms;
    r.log = train_tncse(I, II, data, c);
    r.val_spearman = r.log.best_spearman();
    r.best_step = r.log.best_step();
    rows.push_back(std::move(r));
    if (on_row) on_row(rows.back());
  }
  return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "terms,val_spearman,best_step\n";
  for (const auto& r : rows) os << r.name << ',' << format_number(r.val_spearman) << ',' << r.best_step << '\n';
  return os.str();
}

struct SignificanceRow {
  std::uint64_t seed = 0;
  double val_spearman = 0.0;
};

struct SignificanceTable {
  std::vector<SignificanceRow> rows;
  double mean = 0, std = 0, min = 0, max = 0;

  std::string csv() const {
    std::ostringstream os;
    os << "seed,val_spearman\n";
    for (const auto& r : rows) os << r.seed << ',' << format_number(r.val_spearman) << '\n';
    os << "# mean=" << format_number(mean) << " std=" << format_number(std) << " min=" << format_number(min)
       << " max=" << format_number(max) << '\n';
    return os.str();
  }
};

inline std::vector<std::uint64_t> significance_seeds() { return {1, 2, 3, 4, 5}; }

// Runs `trial(seed)` for seeds 1..5; std is the sample standard deviation.
inline SignificanceTable significance_suite(const std::function<double(std::uint64_t)>& trial) {
  SignificanceTable t;
  for (auto seed : significance_seeds()) {
    double v;
    try {
      v = trial(seed);
    } catch (const Error& e) {
      throw Error(e.error_class(), "significance run for seed " + std::to_string(seed) + " failed: " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("significance run for seed " + std::to_string(seed) + " failed: " + e.what());
    } catch (const std::exception& e) {
      throw NumericError("significance run for seed " + std::to_string(seed) + " failed: " + e.what());
    }
    t.rows.push_back({seed, v});
  }
  double s = 0;
  t.min = std::numeric_limits<double>::infinity();
  t.max = -t.min;
  for (const auto& r : t.rows) {
    s += r.val_spearman;
    t.min = std::min(t.min, r.val_spearman);
    t.max = std::max(t.max, r.val_spearman);
  }
  t.mean = s / static_cast<double>(t.rows.size());
  double v = 0;
  for (const auto& r : t.rows) v += (r.val_spearman - t.mean) * (r.val_spearman - t.mean);
  t.std = std::sqrt(v / static_cast<double>(t.rows.size() - 1));
  return t;
}

}  // namespace tncse
