#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tncse/ensemble.hpp"
#include "tncse/training.hpp"

namespace tncse {

enum class DistillObjective { similarity, embedding };

inline std::string to_string(DistillObjective o) { return o == DistillObjective::similarity ? "similarity" : "embedding"; }
inline DistillObjective parse_distill_objective(const std::string& s) {
  if (s == "similarity") return DistillObjective::similarity;
  if (s == "embedding") return DistillObjective::embedding;
  throw InvalidArgument("unknown distill objective '" + s + "' (expected similarity or embedding)");
}

struct DistillConfig {
  DistillObjective objective = DistillObjective::similarity;
  // Targets become sign(s) |s|^(1/temperature); 1 leaves them unchanged.
  double temperature = 1.0;
  EncoderConfig student;
  std::uint64_t student_stream = 2;
  std::size_t probe_size = 256;
  TrainConfig train;

  void validate() const {
    if (train.steps < 1) throw InvalidArgument("distill: steps must be >= 1");
    if (!(temperature > 0.0)) throw InvalidArgument("distill: temperature must be positive");
    if (objective == DistillObjective::similarity && train.batch_size < 2)
      throw InvalidArgument("distill: similarity objective needs batch_size >= 2");
    if (probe_size < 2) throw InvalidArgument("distill: probe_size must be >= 2");
    train.validate();
  }
};

namespace distill_detail {

// Cosine matrix of the rows of x, clamped to [-1, 1].
inline std::vector<double> cosine_matrix(const Tensor<double>& x) {
  const auto n = x.rows(), d = x.cols();
  std::vector<double> norms(n), out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = l2_norm(std::span<const double>(&x.data[i * d], d));
    if (!(norms[i] > 0.0)) throw InvalidArgument("distill: zero-norm embedding row " + std::to_string(i));
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += x.data[i * d + k] * x.data[j * d + k];
      out[i * n + j] = std::clamp(s / (norms[i] * norms[j]), -1.0, 1.0);
    }
  return out;
}

inline void sharpen(std::vector<double>& s, double temperature) {
  if (temperature == 1.0) return;
  for (auto& v : s) v = std::copysign(std::pow(std::abs(v), 1.0 / temperature), v);
}

}  // namespace distill_detail

// Teacher similarity targets for a batch of teacher embeddings, in [-1, 1].
inline std::vector<double> similarity_targets(const Tensor<double>& teacher, double temperature) {
  auto s = distill_detail::cosine_matrix(teacher);
  distill_detail::sharpen(s, temperature);
  return s;
}

// Objective value on one batch, student and teacher both in eval mode.
inline double distill_objective(const Tensor<double>& student, const Tensor<double>& teacher, const DistillConfig& cfg) {
  if (student.rows() != teacher.rows()) throw InvalidArgument("distill: batch sizes differ");
  const auto n = student.rows();
  if (cfg.objective == DistillObjective::embedding) {
    if (student.shape != teacher.shape)
      throw InvalidArgument("distill: embedding objective needs equal student and teacher dims");
    double s = 0;
    for (std::size_t i = 0; i < student.data.size(); ++i)
      s += (student.data[i] - teacher.data[i]) * (student.data[i] - teacher.data[i]);
    return s / static_cast<double>(student.data.size());
  }
  if (n < 2) throw InvalidArgument("distill: similarity objective needs at least 2 rows");
  const auto ss = distill_detail::cosine_matrix(student);
  const auto tt = similarity_targets(teacher, cfg.temperature);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s += (ss[i * n + j] - tt[i * n + j]) * (ss[i * n + j] - tt[i * n + j]);
  return s / static_cast<double>(n * (n - 1));
}

// Differentiable objective for one training batch; the teacher side is a
// constant.
template <class T>
Var<T> distill_objective(Var<T> student, const Tensor<double>& teacher, const DistillConfig& cfg) {
  auto& tape = *student.tape;
  const auto n = student.rows();
  if (cfg.objective == DistillObjective::embedding) {
    if (student.shape() != teacher.shape)
      throw InvalidArgument("distill: embedding objective needs equal student and teacher dims");
    auto diff = ad::sub(student, tape.constant(teacher.template cast<T>()));
    return ad::mean(ad::mul(diff, diff));
  }
  const auto targets = similarity_targets(teacher, cfg.temperature);
  std::vector<T> tv(targets.begin(), targets.end()), mask(n * n, T(1));
  for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = T(0);
  auto diff = ad::sub(ad::cosine_matrix(student, student), tape.constant(n, n, tv));
  auto sq = ad::mul(ad::mul(diff, diff), tape.constant(n, n, mask));
  return ad::scale(ad::sum(sq), T(1) / static_cast<T>(n * (n - 1)));
}

// Mean eval-mode objective over fixed probe batches.
inline double distill_loss(const Encoder<float>& student, const EnsembleModel<float>& teacher,
                           const std::vector<std::string>& probe, const DistillConfig& cfg) {
  const auto bs = std::max<std::size_t>(cfg.train.batch_size, 2);
  double s = 0;
  std::size_t batches = 0;
  for (std::size_t i = 0; i + 1 < probe.size(); i += bs) {
    std::vector<std::string> part(probe.begin() + static_cast<std::ptrdiff_t>(i),
                                  probe.begin() + static_cast<std::ptrdiff_t>(std::min(probe.size(), i + bs)));
    if (part.size() < 2) break;
    const auto st = to_double(encode_sentences(student, teacher.vocab(), part).last_hidden);
    const auto te = to_double(ensemble_embed(teacher, part));
    s += distill_objective(st, te, cfg);
    ++batches;
  }
  if (batches == 0) throw InvalidArgument("distill: probe set too small");
  return s / static_cast<double>(batches);
}

struct DistillResult {
  Encoder<float> student;
  TrainLog log;
};

// The probe set: the first probe_size distinct corpus sentences.
inline std::vector<std::string> distill_probe(const std::vector<std::string>& corpus, std::size_t n) {
  std::vector<std::string> out;
  for (const auto& s : corpus) {
    if (out.size() == n) break;
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

// Trains a fresh student to match the frozen teacher on corpus batches; keeps
// the student with the best validation Spearman.
inline DistillResult distill(const EnsembleModel<float>& teacher, const TrainData& data, const DistillConfig& cfg) {
  cfg.validate();
  data.validate();
  if (teacher.member(0).vocab_hash != data.vocab->hash())
    throw InvalidArgument("distill: teacher and corpus vocabulary disagree");
  DistillResult out{make_encoder(cfg.student, *data.vocab, cfg.train.seed, cfg.student_stream), {}};
  if (cfg.objective == DistillObjective::embedding && out.student.config.hidden_dim != teacher.hidden_dim())
    throw InvalidArgument("distill: embedding objective needs student hidden_dim " +
                          std::to_string(teacher.hidden_dim()));
  const auto probe = distill_probe(*data.corpus, cfg.probe_size);
  auto& student = out.student;
  BatchSchedule sched(data.corpus->size(), cfg.train.batch_size, train_detail::batch_seed(cfg.train.seed));
  std::vector<Tensor<float>*> params;
  train_detail::append_params(params, student);
  auto step = [&](std::size_t s) {
    const auto batch = train_detail::batch_at(sched, data, s - 1, student.config.max_seq_len);
    const auto target = to_double(ensemble_embed(teacher, batch));
    Tape<float> tape;
    auto h = encode(tape, student, batch, EncodeOptions{true, 0, cfg.train.seed, s});
    auto loss = distill_objective(h.last_hidden, target, cfg);
    tape.backward(loss);
    StepRecord r;
    r.l_distill = r.total = loss.item();
    return r;
  };
  auto val = [&] {
    return Validation{sts_eval(encoder_embed_fn(student, *data.vocab), *data.dev),
                      distill_loss(student, teacher, probe, cfg)};
  };
  out.log = run_training(cfg.train, params, step, val);
  return out;
}

}  // namespace tncse
