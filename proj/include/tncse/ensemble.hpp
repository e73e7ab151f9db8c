#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "tncse/data.hpp"
#include "tncse/encoder.hpp"
#include "tncse/evaluation.hpp"

namespace tncse {

// K >= 1 encoders of equal hidden width sharing one vocabulary. Members are
// borrowed, not owned.
template <class T>
class EnsembleModel {
 public:
  EnsembleModel(std::vector<const Encoder<T>*> members, const Vocab& vocab) : members_(std::move(members)), vocab_(&vocab) {
    if (members_.empty()) throw InvalidArgument("ensemble: needs at least one member");
    const auto d = members_[0]->config.hidden_dim;
    for (std::size_t i = 0; i < members_.size(); ++i) {
      if (members_[i]->config.hidden_dim != d)
        throw InvalidArgument("ensemble: member " + std::to_string(i) + " has hidden_dim " +
                              std::to_string(members_[i]->config.hidden_dim) + ", expected " + std::to_string(d));
      if (members_[i]->vocab_hash != members_[0]->vocab_hash)
        throw InvalidArgument("ensemble: member " + std::to_string(i) + " was built on a different vocabulary");
    }
  }

  std::size_t size() const { return members_.size(); }
  std::size_t hidden_dim() const { return members_[0]->config.hidden_dim; }
  const Encoder<T>& member(std::size_t i) const { return *members_.at(i); }
  const std::vector<const Encoder<T>*>& members() const { return members_; }
  const Vocab& vocab() const { return *vocab_; }

 private:
  std::vector<const Encoder<T>*> members_;
  const Vocab* vocab_;
};

namespace ensemble_detail {

// Elementwise sum with the K addends sorted first, so the result does not
// depend on member order.
template <class T>
Tensor<T> ordered_sum(const std::vector<Tensor<T>>& parts) {
  Tensor<T> out = parts[0];
  if (parts.size() == 1) return out;
  std::vector<T> col(parts.size());
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    for (std::size_t k = 0; k < parts.size(); ++k) col[k] = parts[k].data[i];
    std::sort(col.begin(), col.end());
    T s = col[0];
    for (std::size_t k = 1; k < col.size(); ++k) s += col[k];
    out.data[i] = s;
  }
  return out;
}

}  // namespace ensemble_detail

// Sum of the members' last hidden states in eval mode; pooler heads are not
// used.
template <class T>
Tensor<T> ensemble_embed(const EnsembleModel<T>& model, const TokenBatch& batch) {
  std::vector<Tensor<T>> parts;
  for (const auto* m : model.members()) parts.push_back(encode(*m, batch).last_hidden);
  return ensemble_detail::ordered_sum(parts);
}

template <class T>
Tensor<T> ensemble_embed(const EnsembleModel<T>& model, const std::vector<std::string>& sentences) {
  std::vector<Tensor<T>> parts;
  for (const auto* m : model.members()) parts.push_back(encode_sentences(*m, model.vocab(), sentences).last_hidden);
  return ensemble_detail::ordered_sum(parts);
}

template <class T>
EmbedFn ensemble_embed_fn(const EnsembleModel<T>& model) {
  return [&model](const std::vector<std::string>& s) { return to_double(ensemble_embed(model, s)); };
}

}  // namespace tncse
