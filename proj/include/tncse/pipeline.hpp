#pragma once

// Glue shared by the command-line tool and the acceptance suite: dataset
// resolution, model loading and run metadata.

#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "tncse/checkpoint.hpp"
#include "tncse/config.hpp"
#include "tncse/data.hpp"
#include "tncse/ensemble.hpp"
#include "tncse/training.hpp"

namespace tncse {

struct Datasets {
  std::vector<std::string> corpus;
  std::vector<StsPair> dev, test;
  Vocab vocab;
  std::optional<SynonymTable> synonyms;

  TrainData train_data() const { return TrainData{&corpus, &vocab, &dev}; }
  const SynonymTable* synonym_table() const { return synonyms ? &*synonyms : nullptr; }
};

// Synthesizes the corpus when data.corpus is empty; otherwise loads the
// given files. A configured path that does not exist is a config error.
inline Datasets load_datasets(const ExperimentConfig& e) {
  namespace fs = std::filesystem;
  auto require = [](const std::string& key, const std::string& path) {
    if (!fs::exists(path)) throw ConfigError(key + " path does not exist: " + path);
  };
  Datasets d;
  if (!e.synonyms_path.empty() && fs::exists(e.synonyms_path)) d.synonyms = SynonymTable::load(e.synonyms_path);
  if (e.corpus_path.empty()) {
    if (!d.synonyms) throw ConfigError("data.synonyms path does not exist: " + e.synonyms_path);
    auto ds = synth_corpus(*d.synonyms, e.synth);
    d.corpus = std::move(ds.corpus);
    d.dev = std::move(ds.dev);
    d.test = std::move(ds.test);
    if (!e.dev_path.empty()) {
      require("data.dev", e.dev_path);
      d.dev = load_sts(e.dev_path);
    }
    if (!e.test_path.empty()) {
      require("data.test", e.test_path);
      d.test = load_sts(e.test_path);
    }
  } else {
    require("data.corpus", e.corpus_path);
    d.corpus = load_corpus(e.corpus_path);
    if (e.dev_path.empty()) throw ConfigError("data.dev must be set when data.corpus is given");
    require("data.dev", e.dev_path);
    d.dev = load_sts(e.dev_path);
    if (!e.test_path.empty()) {
      require("data.test", e.test_path);
      d.test = load_sts(e.test_path);
    }
  }
  if (d.corpus.empty()) throw DataError("corpus is empty");
  d.vocab = Vocab::build(d.corpus, e.vocab_max);
  return d;
}

// A checkpoint on disk: one encoder or an ensemble of them.
struct LoadedModel {
  std::vector<Encoder<float>> members;
  Vocab vocab;
  bool is_ensemble = false;

  EnsembleModel<float> ensemble() const {
    std::vector<const Encoder<float>*> m;
    for (const auto& e : members) m.push_back(&e);
    return EnsembleModel<float>(m, vocab);
  }
};

inline LoadedModel load_model(const std::filesystem::path& manifest) {
  if (!std::filesystem::exists(manifest)) throw CheckpointError("checkpoint not found: " + manifest.string());
  LoadedModel out;
  if (checkpoint_kind(manifest) == "ensemble") {
    out.is_ensemble = true;
    for (const auto& p : load_ensemble_manifest(manifest)) {
      auto ck = load_checkpoint(p);
      if (out.members.empty()) out.vocab = ck.vocab;
      else if (ck.vocab.hash() != out.vocab.hash())
        throw CheckpointError(p.string() + ": member vocabulary differs from the first member");
      out.members.push_back(std::move(ck.encoder));
    }
  } else {
    auto ck = load_checkpoint(manifest);
    out.vocab = ck.vocab;
    out.members.push_back(std::move(ck.encoder));
  }
  try {
    (void)out.ensemble();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(manifest.string() + ": " + e.what());
  }
  return out;
}

// Fixed sample of distinct corpus sentences for probes.
inline std::vector<std::string> probe_sentences(const std::vector<std::string>& corpus, std::size_t n,
                                                std::uint64_t seed) {
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed({seed, 0x9208EULL}));
  shuffle(order, rng);
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (auto i : order) {
    if (out.size() == n) break;
    if (seen.insert(corpus[i]).second) out.push_back(corpus[i]);
  }
  return out;
}

// Alignment over high-similarity pairs (gold >= 4) and uniformity over all
// first sentences of a dataset.
inline void add_geometry(EvalReport& report, const EmbedFn& embed, const std::vector<StsPair>& pairs) {
  std::vector<std::string> a, b, all;
  for (const auto& p : pairs) {
    all.push_back(p.sentence_a);
    if (p.gold_score >= 4.0) {
      a.push_back(p.sentence_a);
      b.push_back(p.sentence_b);
    }
  }
  if (!a.empty()) report.alignment_value = alignment(embed(a), embed(b));
  if (all.size() >= 2) report.uniformity_value = uniformity(embed(all));
}

// Flat key=value run record.
class RunMeta {
 public:
  void set(const std::string& k, const std::string& v) {
    for (auto& [key, val] : entries_)
      if (key == k) {
        val = v;
        return;
      }
    entries_.emplace_back(k, v);
  }
  void set(const std::string& k, double v) { set(k, format_number(v)); }
  void set(const std::string& k, std::uint64_t v) { set(k, std::to_string(v)); }

  std::string str() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries_) os << k << '=' << v << '\n';
    return os.str();
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

inline std::string platform_string() {
  std::ostringstream os;
#if defined(__clang__)
  os << "clang-" << __clang_major__ << '.' << __clang_minor__;
#elif defined(__GNUC__)
  os << "gcc-" << __GNUC__ << '.' << __GNUC_MINOR__;
#else
  os << "unknown-compiler";
#endif
#if defined(__x86_64__)
  os << "/x86_64";
#elif defined(__aarch64__)
  os << "/aarch64";
#endif
  return os.str();
}

inline RunMeta base_meta(const std::string& command, const ExperimentConfig& e) {
  RunMeta m;
  m.set("command", command);
  m.set("seed", e.seed);
  m.set("platform", platform_string());
  m.set("precision.train", "float32");
  m.set("precision.eval", "float32 encoder, float64 metrics");
  m.set("optimizer", "adam");
  m.set("optim.lr", e.train.optim.lr);
  m.set("optim.betas", format_number(e.train.optim.beta1) + "," + format_number(e.train.optim.beta2));
  m.set("optim.eps", e.train.optim.eps);
  m.set("optim.weight_decay", e.train.optim.weight_decay);
  m.set("loss.sim_clamp_eps", e.train.loss.sim_clamp_eps);
  m.set("loss.tau", e.train.loss.tau);
  return m;
}

}  // namespace tncse
