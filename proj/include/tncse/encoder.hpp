#pragma once

// BERT-style post-LN transformer encoder with learned token and position
// embeddings, CLS (or masked-mean) pooling and a tanh pooler head.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tncse/autodiff.hpp"
#include "tncse/data.hpp"
#include "tncse/rng.hpp"
#include "tncse/tensor.hpp"

namespace tncse {

enum class PoolingMode { cls, mean };

inline std::string to_string(PoolingMode m) { return m == PoolingMode::cls ? "cls" : "mean"; }

inline PoolingMode parse_pooling(const std::string& s) {
  if (s == "cls") return PoolingMode::cls;
  if (s == "mean") return PoolingMode::mean;
  throw InvalidArgument("unknown pooling mode '" + s + "' (expected cls or mean)");
}

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 32;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 256;
  double dropout_p = 0.1;
  // LayerNorms replaced by identity, counted from the end of the stack.
  std::size_t layernorms_stripped = 0;
  PoolingMode pooling = PoolingMode::cls;

  std::size_t num_layernorms() const { return 2 * num_layers; }

  void validate() const {
    if (vocab_size <= Vocab::num_reserved) throw InvalidArgument("encoder: vocab_size must exceed the reserved ids");
    if (max_seq_len < 2) throw InvalidArgument("encoder: max_seq_len must be >= 2");
    if (hidden_dim < 2) throw InvalidArgument("encoder: hidden_dim must be >= 2");
    if (num_heads == 0 || hidden_dim % num_heads != 0)
      throw InvalidArgument("encoder: hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                            std::to_string(num_heads));
    if (ffn_dim == 0) throw InvalidArgument("encoder: ffn_dim must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw InvalidArgument("encoder: dropout_p must lie in [0, 1)");
    if (layernorms_stripped > num_layernorms())
      throw InvalidArgument("encoder: layernorms_stripped " + std::to_string(layernorms_stripped) + " exceeds " +
                            std::to_string(num_layernorms()));
  }

  bool operator==(const EncoderConfig&) const = default;
};

template <class T>
struct EncoderLayer {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> w1, b1, w2, b2;
  Tensor<T> ln2_gamma, ln2_beta;
};

template <class T>
class Encoder {
 public:
  EncoderConfig config;
  // Names this encoder's dropout streams; Encoder I and II use 0 and 1.
  std::uint64_t stream_id = 0;
  std::uint64_t vocab_hash = 0;

  Tensor<T> token_embedding;
  Tensor<T> position_embedding;
  std::vector<EncoderLayer<T>> layers;
  Tensor<T> pooler_weight;
  Tensor<T> pooler_bias;

  Encoder() = default;

  // Weights ~ N(0, 0.02), biases 0, LayerNorm gain 1.
  Encoder(EncoderConfig cfg, std::uint64_t init_seed) : config(cfg) {
    config.validate();
    Rng rng(derive_seed({init_seed, 0xE2CULL}));
    const auto d = cfg.hidden_dim, f = cfg.ffn_dim;
    constexpr double sd = 0.02;
    token_embedding = random_normal<T>({cfg.vocab_size, d}, sd, rng);
    position_embedding = random_normal<T>({cfg.max_seq_len, d}, sd, rng);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      EncoderLayer<T> L;
      L.wq = random_normal<T>({d, d}, sd, rng);
      L.bq = Tensor<T>({d});
      L.wk = random_normal<T>({d, d}, sd, rng);
      L.bk = Tensor<T>({d});
      L.wv = random_normal<T>({d, d}, sd, rng);
      L.bv = Tensor<T>({d});
      L.wo = random_normal<T>({d, d}, sd, rng);
      L.bo = Tensor<T>({d});
      L.ln1_gamma = Tensor<T>({d}, T(1));
      L.ln1_beta = Tensor<T>({d});
      L.w1 = random_normal<T>({d, f}, sd, rng);
      L.b1 = Tensor<T>({f});
      L.w2 = random_normal<T>({f, d}, sd, rng);
      L.b2 = Tensor<T>({d});
      L.ln2_gamma = Tensor<T>({d}, T(1));
      L.ln2_beta = Tensor<T>({d});
      layers.push_back(std::move(L));
    }
    pooler_weight = random_normal<T>({d, d}, sd, rng);
    pooler_bias = Tensor<T>({d});
    for (auto& [name, p] : parameters()) p->requires_grad = true;
  }

  // Stable order; checkpoints and optimizers rely on it.
  std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("token_embedding", &token_embedding);
    out.emplace_back("position_embedding", &position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& L = layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      out.emplace_back(p + "attn.wq", &L.wq);
      out.emplace_back(p + "attn.bq", &L.bq);
      out.emplace_back(p + "attn.wk", &L.wk);
      out.emplace_back(p + "attn.bk", &L.bk);
      out.emplace_back(p + "attn.wv", &L.wv);
      out.emplace_back(p + "attn.bv", &L.bv);
      out.emplace_back(p + "attn.wo", &L.wo);
      out.emplace_back(p + "attn.bo", &L.bo);
      out.emplace_back(p + "ln1.gamma", &L.ln1_gamma);
      out.emplace_back(p + "ln1.beta", &L.ln1_beta);
      out.emplace_back(p + "ffn.w1", &L.w1);
      out.emplace_back(p + "ffn.b1", &L.b1);
      out.emplace_back(p + "ffn.w2", &L.w2);
      out.emplace_back(p + "ffn.b2", &L.b2);
      out.emplace_back(p + "ln2.gamma", &L.ln2_gamma);
      out.emplace_back(p + "ln2.beta", &L.ln2_beta);
    }
    out.emplace_back("pooler.weight", &pooler_weight);
    out.emplace_back("pooler.bias", &pooler_bias);
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> parameters() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& [n, p] : const_cast<Encoder*>(this)->parameters()) out.emplace_back(n, p);
    return out;
  }

  // LayerNorm `index` counts attention-LN and FFN-LN alternately from the
  // first layer: layer l owns indices 2l and 2l+1.
  bool layernorm_active(std::size_t index) const { return index < config.num_layernorms() - config.layernorms_stripped; }

  void zero_grad() {
    for (auto& [n, p] : parameters()) p->clear_grad();
  }

  template <class U>
  Encoder<U> cast() const {
    Encoder<U> out;
    out.config = config;
    out.stream_id = stream_id;
    out.vocab_hash = vocab_hash;
    auto src = parameters();
    // Build the destination layout, then copy tensors across.
    out.layers.resize(layers.size());
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return out;
  }
};

struct EncodeOptions {
  bool train = false;
  std::size_t pass_index = 0;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

template <class T>
struct EncoderVars {
  Var<T> last_hidden;  // [batch x d]
  Var<T> pooler;       // [batch x d]
};

template <class T>
struct EncoderOutput {
  Tensor<T> last_hidden;
  Tensor<T> pooler;
};

// Dropout stream for one (encoder, pass) at a given step.
inline Rng dropout_stream(std::uint64_t seed, std::uint64_t encoder_stream, std::uint64_t pass_index,
                          std::uint64_t step) {
  return Rng(derive_seed({seed, encoder_stream, pass_index, step, 0xD0ULL}));
}

namespace encoder_detail {

template <class T, class Bind>
EncoderVars<T> forward(Tape<T>& tape, const Encoder<T>& enc, const TokenBatch& batch, const EncodeOptions& opt,
                       Bind bind) {
  const auto& cfg = enc.config;
  if (batch.batch == 0) throw InvalidArgument("encode: empty batch");
  if (batch.seq_len > cfg.max_seq_len)
    throw InvalidArgument("encode: batch length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
  for (auto id : batch.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw InvalidArgument("encode: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));

  // Trailing all-padding columns never influence unmasked positions, so the
  // batch is cut to its longest row.
  const std::size_t B = batch.batch;
  const std::size_t L = std::max<std::size_t>(batch.effective_len(), 1);
  std::vector<std::int32_t> ids(B * L), pos(B * L);
  std::vector<std::uint8_t> mask(B * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < L; ++s) {
      ids[b * L + s] = batch.ids[b * batch.seq_len + s];
      mask[b * L + s] = batch.mask[b * batch.seq_len + s];
      pos[b * L + s] = static_cast<std::int32_t>(s);
    }

  const bool drop = opt.train && cfg.dropout_p > 0.0;
  Rng rng = dropout_stream(opt.seed, enc.stream_id, opt.pass_index, opt.step);
  auto maybe_drop = [&](Var<T> x) { return drop ? ad::dropout(x, cfg.dropout_p, rng) : x; };

  using namespace ad;
  Var<T> x = add(embedding(bind(enc.token_embedding), ids), embedding(bind(enc.position_embedding), pos));
  x = maybe_drop(x);
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    const auto& P = enc.layers[l];
    auto q = linear(x, bind(P.wq), bind(P.bq));
    auto k = linear(x, bind(P.wk), bind(P.bk));
    auto v = linear(x, bind(P.wv), bind(P.bv));
    auto a = linear(attention(q, k, v, mask, B, L, cfg.num_heads), bind(P.wo), bind(P.bo));
    x = add(x, maybe_drop(a));
    if (enc.layernorm_active(2 * l)) x = layer_norm(x, bind(P.ln1_gamma), bind(P.ln1_beta), T(1e-5));
    auto f = linear(gelu(linear(x, bind(P.w1), bind(P.b1))), bind(P.w2), bind(P.b2));
    x = add(x, maybe_drop(f));
    if (enc.layernorm_active(2 * l + 1)) x = layer_norm(x, bind(P.ln2_gamma), bind(P.ln2_beta), T(1e-5));
  }

  Var<T> h;
  if (cfg.pooling == PoolingMode::cls) {
    std::vector<std::size_t> rows(B);
    for (std::size_t b = 0; b < B; ++b) rows[b] = b * L;
    h = select_rows(x, rows);
  } else {
    h = masked_mean_rows(x, mask, B, L);
  }
  auto pooled = ad::tanh(linear(h, bind(enc.pooler_weight), bind(enc.pooler_bias)));
  return {h, pooled};
}

}  // namespace encoder_detail

// Differentiable forward pass; parameters are bound as tape leaves.
template <class T>
EncoderVars<T> encode(Tape<T>& tape, Encoder<T>& enc, const TokenBatch& batch, const EncodeOptions& opt) {
  return encoder_detail::forward(tape, enc, batch, opt,
                                 [&tape](const Tensor<T>& p) { return tape.leaf(const_cast<Tensor<T>&>(p)); });
}

// Inference pass with no dropout and no gradient tracking.
template <class T>
EncoderOutput<T> encode(const Encoder<T>& enc, const TokenBatch& batch) {
  Tape<T> tape;
  auto out = encoder_detail::forward(tape, enc, batch, EncodeOptions{},
                                     [&tape](const Tensor<T>& p) { return tape.constant(p); });
  return {out.last_hidden.tensor(), out.pooler.tensor()};
}

// Inference over an arbitrary number of sentences, chunked.
template <class T>
EncoderOutput<T> encode_sentences(const Encoder<T>& enc, const Vocab& vocab, const std::vector<std::string>& sentences,
                                  std::size_t chunk = 64) {
  const auto d = enc.config.hidden_dim;
  EncoderOutput<T> out{Tensor<T>({sentences.size(), d}), Tensor<T>({sentences.size(), d})};
  for (std::size_t s = 0; s < sentences.size(); s += chunk) {
    const auto e = std::min(sentences.size(), s + chunk);
    std::vector<std::string> part(sentences.begin() + static_cast<std::ptrdiff_t>(s),
                                  sentences.begin() + static_cast<std::ptrdiff_t>(e));
    auto o = encode(enc, make_batch(vocab, part, enc.config.max_seq_len));
    std::copy(o.last_hidden.data.begin(), o.last_hidden.data.end(), out.last_hidden.data.begin() + s * d);
    std::copy(o.pooler.data.begin(), o.pooler.data.end(), out.pooler.data.begin() + s * d);
  }
  return out;
}

// The four dropout views of one batch through two encoders.
template <class T>
struct ViewBundle {
  EncoderVars<T> enc_I;
  EncoderVars<T> enc_I_plus;
  EncoderVars<T> enc_II;
  EncoderVars<T> enc_II_plus;
};

template <class T>
ViewBundle<T> dual_view(Tape<T>& tape, Encoder<T>& enc_I, Encoder<T>& enc_II, const TokenBatch& batch,
                        std::uint64_t seed, std::uint64_t step, bool train = true) {
  auto opt = [&](std::size_t pass) { return EncodeOptions{train, pass, seed, step}; };
  ViewBundle<T> v;
  v.enc_I = encode(tape, enc_I, batch, opt(0));
  v.enc_I_plus = encode(tape, enc_I, batch, opt(1));
  v.enc_II = encode(tape, enc_II, batch, opt(0));
  v.enc_II_plus = encode(tape, enc_II, batch, opt(1));
  return v;
}

// Copy of `enc` whose last n LayerNorms act as identity.
template <class T>
Encoder<T> strip_layernorms(const Encoder<T>& enc, std::size_t n) {
  if (n > enc.config.num_layernorms())
    throw InvalidArgument("strip_layernorms: n=" + std::to_string(n) + " outside [0, " +
                          std::to_string(enc.config.num_layernorms()) + "]");
  Encoder<T> out = enc;
  out.config.layernorms_stripped = n;
  return out;
}

}  // namespace tncse
