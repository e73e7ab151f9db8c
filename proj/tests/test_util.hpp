#pragma once

#include <gtest/gtest.h>

#include <string>
#include <vector>

#include "tncse/tncse.hpp"

namespace tncse::test {

// Small synthetic world shared by the unit tests.
struct Tiny {
  SynonymTable table;
  SynthDataset ds;
  Vocab vocab;
  EncoderConfig enc;

  Tiny() : table(SynonymTable::load(TNCSE_DATA_DIR "/synonyms.tsv")) {
    SynthConfig sc;
    sc.n_sentences = 300;
    sc.n_dev = 60;
    sc.n_test = 40;
    ds = synth_corpus(table, sc);
    vocab = Vocab::build(ds.corpus);
    enc.vocab_size = vocab.size();
    enc.max_seq_len = 16;
    enc.hidden_dim = 16;
    enc.num_layers = 1;
    enc.num_heads = 2;
    enc.ffn_dim = 32;
    enc.dropout_p = 0.1;
  }

  TrainData data() const { return TrainData{&ds.corpus, &vocab, &ds.dev}; }

  TrainConfig train_config(std::size_t steps = 6, std::size_t interval = 3) const {
    TrainConfig c;
    c.steps = steps;
    c.eval_interval = interval;
    c.batch_size = 8;
    return c;
  }

  Encoder<float> encoder(std::uint64_t stream = 0, std::uint64_t seed = 1) const {
    return make_encoder(enc, vocab, seed, stream);
  }
};

inline const Tiny& tiny() {
  static const Tiny t;
  return t;
}

template <class T>
bool same_params(const Encoder<T>& a, const Encoder<T>& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].second->data != pb[i].second->data) return false;
  return true;
}

inline Tensor<double> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return random_normal<double>({r, c}, sd, rng);
}

}  // namespace tncse::test
