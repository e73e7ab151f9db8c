#pragma once

// Flat typed configuration: one "section.key = value" per line, '#' starts a
// comment. Every key must be known; later assignments and --set overrides win.

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tncse/distill.hpp"
#include "tncse/encoder.hpp"
#include "tncse/errors.hpp"
#include "tncse/losses.hpp"
#include "tncse/training.hpp"

#ifndef TNCSE_DATA_DIR
#define TNCSE_DATA_DIR "data"
#endif

namespace tncse {

enum class KeyType { integer, real, boolean, text, int_list };

struct KeySpec {
  std::string key;
  KeyType type;
  std::string default_value;
};

inline const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema = {
      {"run.seed", KeyType::integer, "1"},
      {"data.corpus", KeyType::text, ""},
      {"data.dev", KeyType::text, ""},
      {"data.test", KeyType::text, ""},
      {"data.synonyms", KeyType::text, TNCSE_DATA_DIR "/synonyms.tsv"},
      {"data.synth_seed", KeyType::integer, "1"},
      {"data.n_templates", KeyType::integer, "24"},
      {"data.n_sentences", KeyType::integer, "6000"},
      {"data.n_dev", KeyType::integer, "500"},
      {"data.n_test", KeyType::integer, "500"},
      {"data.vocab_max", KeyType::integer, "30000"},
      {"encoder.max_seq_len", KeyType::integer, "32"},
      {"encoder.hidden_dim", KeyType::integer, "64"},
      {"encoder.num_layers", KeyType::integer, "2"},
      {"encoder.num_heads", KeyType::integer, "4"},
      {"encoder.ffn_dim", KeyType::integer, "256"},
      {"encoder.dropout_p", KeyType::real, "0.1"},
      {"encoder.layernorms_stripped", KeyType::integer, "0"},
      {"encoder.pooling", KeyType::text, "cls"},
      {"augment.enabled", KeyType::boolean, "true"},
      {"augment.coverage", KeyType::real, "0.5"},
      {"augment.swap_p", KeyType::real, "0.5"},
      {"pretrain.steps", KeyType::integer, "2000"},
      {"pretrain.batch_size", KeyType::integer, "32"},
      {"pretrain.eval_interval", KeyType::integer, "100"},
      {"pretrain.lr", KeyType::real, "0.0003"},
      {"train.steps", KeyType::integer, "1000"},
      {"train.batch_size", KeyType::integer, "32"},
      {"train.eval_interval", KeyType::integer, "100"},
      {"train.restore_best", KeyType::boolean, "true"},
      {"train.single_tn_weight", KeyType::real, "1"},
      {"optim.lr", KeyType::real, "0.0001"},
      {"optim.beta1", KeyType::real, "0.9"},
      {"optim.beta2", KeyType::real, "0.999"},
      {"optim.eps", KeyType::real, "1e-08"},
      {"optim.weight_decay", KeyType::real, "0"},
      {"loss.tau", KeyType::real, "0.05"},
      {"loss.terms", KeyType::text, "nce+icnce+ictn"},
      {"loss.sim_clamp_eps", KeyType::real, "0.0001"},
      {"loss.norm_eps", KeyType::real, "1e-12"},
      {"loss.modulation", KeyType::text, "view1"},
      {"distill.objective", KeyType::text, "similarity"},
      {"distill.temperature", KeyType::real, "1"},
      {"distill.steps", KeyType::integer, "2000"},
      {"distill.batch_size", KeyType::integer, "32"},
      {"distill.eval_interval", KeyType::integer, "100"},
      {"distill.lr", KeyType::real, "0.001"},
      {"distill.hidden_dim", KeyType::integer, "64"},
      {"distill.num_layers", KeyType::integer, "2"},
      {"distill.num_heads", KeyType::integer, "4"},
      {"distill.ffn_dim", KeyType::integer, "256"},
      {"distill.probe_size", KeyType::integer, "256"},
      {"eval.probe_sentences", KeyType::integer, "100"},
      {"eval.strip_counts", KeyType::int_list, "0,1,2,3,4"},
      {"significance.trainer", KeyType::text, "tncse"},
  };
  return schema;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_schema()) values_[k.key] = k.default_value;
  }

  static Config from_text(const std::string& text, const std::string& source) {
    Config c;
    std::istringstream in(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(n) + ": expected 'section.key = value'");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), source + ":" + std::to_string(n));
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return from_text(os.str(), path);
  }

  void set(const std::string& key, const std::string& value, const std::string& where = "override") {
    const auto* spec = find(key);
    if (!spec) throw ConfigError(where + ": unknown key '" + key + "'");
    check_type(*spec, value, where);
    values_[key] = value;
  }

  // "key=value" as given to --set.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)), "--set " + kv);
  }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
  }
  std::uint64_t integer(const std::string& key) const { return std::stoull(text(key)); }
  double real(const std::string& key) const { return std::stod(text(key)); }
  bool boolean(const std::string& key) const { return text(key) == "true" || text(key) == "1"; }
  std::vector<std::size_t> int_list(const std::string& key) const {
    std::vector<std::size_t> out;
    std::istringstream in(text(key));
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(std::stoull(trim(item)));
    return out;
  }

  // Every key with its effective value, sorted.
  std::string dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

 private:
  std::map<std::string, std::string> values_;

  static const KeySpec* find(const std::string& key) {
    for (const auto& k : config_schema())
      if (k.key == key) return &k;
    return nullptr;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static bool parse_uint(const std::string& s) {
    std::uint64_t v;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    return ec == std::errc() && p == s.data() + s.size() && !s.empty();
  }

  static void check_type(const KeySpec& spec, const std::string& v, const std::string& where) {
    auto fail = [&](const char* what) {
      throw ConfigError(where + ": key '" + spec.key + "' expects " + what + ", got '" + v + "'");
    };
    switch (spec.type) {
      case KeyType::integer:
        if (!parse_uint(v)) fail("a non-negative integer");
        break;
      case KeyType::real: {
        double d;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
        if (ec != std::errc() || p != v.data() + v.size() || v.empty()) fail("a number");
        break;
      }
      case KeyType::boolean:
        if (v != "true" && v != "false" && v != "1" && v != "0") fail("true or false");
        break;
      case KeyType::int_list: {
        std::istringstream in(v);
        std::string item;
        bool any = false;
        while (std::getline(in, item, ',')) {
          if (!parse_uint(trim(item))) fail("a comma-separated list of integers");
          any = true;
        }
        if (!any) fail("a comma-separated list of integers");
        break;
      }
      case KeyType::text:
        break;
    }
  }
};

// Typed view of a resolved Config.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string corpus_path, dev_path, test_path, synonyms_path;
  SynthConfig synth;
  std::size_t vocab_max = 30000;
  EncoderConfig encoder;
  AugmentConfig augment;
  TrainConfig pretrain;
  TrainConfig train;
  DistillConfig distill;
  std::size_t probe_sentences = 100;
  std::vector<std::size_t> strip_counts;
  std::string significance_trainer;

  static ExperimentConfig from(const Config& c) {
    ExperimentConfig e;
    try {
      e.seed = c.integer("run.seed");
      e.corpus_path = c.text("data.corpus");
      e.dev_path = c.text("data.dev");
      e.test_path = c.text("data.test");
      e.synonyms_path = c.text("data.synonyms");
      e.synth.seed = c.integer("data.synth_seed");
      e.synth.n_templates = c.integer("data.n_templates");
      e.synth.n_sentences = c.integer("data.n_sentences");
      e.synth.n_dev = c.integer("data.n_dev");
      e.synth.n_test = c.integer("data.n_test");
      e.vocab_max = c.integer("data.vocab_max");

      e.encoder.max_seq_len = c.integer("encoder.max_seq_len");
      e.encoder.hidden_dim = c.integer("encoder.hidden_dim");
      e.encoder.num_layers = c.integer("encoder.num_layers");
      e.encoder.num_heads = c.integer("encoder.num_heads");
      e.encoder.ffn_dim = c.integer("encoder.ffn_dim");
      e.encoder.dropout_p = c.real("encoder.dropout_p");
      e.encoder.layernorms_stripped = c.integer("encoder.layernorms_stripped");
      e.encoder.pooling = parse_pooling(c.text("encoder.pooling"));

      e.augment.enabled = c.boolean("augment.enabled");
      e.augment.coverage = c.real("augment.coverage");
      e.augment.swap_p = c.real("augment.swap_p");

      OptimConfig optim;
      optim.lr = c.real("optim.lr");
      optim.beta1 = c.real("optim.beta1");
      optim.beta2 = c.real("optim.beta2");
      optim.eps = c.real("optim.eps");
      optim.weight_decay = c.real("optim.weight_decay");

      LossConfig loss;
      loss.tau = c.real("loss.tau");
      loss.enabled = TermSet::parse(c.text("loss.terms"));
      loss.sim_clamp_eps = c.real("loss.sim_clamp_eps");
      loss.norm_eps = c.real("loss.norm_eps");
      loss.modulation = parse_modulation(c.text("loss.modulation"));

      e.train.seed = e.seed;
      e.train.steps = c.integer("train.steps");
      e.train.batch_size = c.integer("train.batch_size");
      e.train.eval_interval = c.integer("train.eval_interval");
      e.train.restore_best = c.boolean("train.restore_best");
      e.train.single_tn_weight = c.real("train.single_tn_weight");
      e.train.optim = optim;
      e.train.loss = loss;

      e.pretrain = e.train;
      e.pretrain.steps = c.integer("pretrain.steps");
      e.pretrain.batch_size = c.integer("pretrain.batch_size");
      e.pretrain.eval_interval = c.integer("pretrain.eval_interval");
      e.pretrain.optim.lr = c.real("pretrain.lr");

      e.distill.objective = parse_distill_objective(c.text("distill.objective"));
      e.distill.temperature = c.real("distill.temperature");
      e.distill.student = e.encoder;
      e.distill.student.hidden_dim = c.integer("distill.hidden_dim");
      e.distill.student.num_layers = c.integer("distill.num_layers");
      e.distill.student.num_heads = c.integer("distill.num_heads");
      e.distill.student.ffn_dim = c.integer("distill.ffn_dim");
      e.distill.student.layernorms_stripped = 0;
      e.distill.probe_size = c.integer("distill.probe_size");
      e.distill.train = e.train;
      e.distill.train.steps = c.integer("distill.steps");
      e.distill.train.batch_size = c.integer("distill.batch_size");
      e.distill.train.eval_interval = c.integer("distill.eval_interval");
      e.distill.train.optim.lr = c.real("distill.lr");

      e.probe_sentences = c.integer("eval.probe_sentences");
      e.strip_counts = c.int_list("eval.strip_counts");
      e.significance_trainer = c.text("significance.trainer");
      if (e.significance_trainer != "tncse" && e.significance_trainer != "single_tn" &&
          e.significance_trainer != "pretrain")
        throw InvalidArgument("significance.trainer must be tncse, single_tn or pretrain");

      e.augment.validate();
      e.train.validate();
      e.pretrain.validate();
      e.distill.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& ex) {
      throw ConfigError(std::string("invalid configuration: ") + ex.what());
    }
    return e;
  }

  // Applies a new root seed to every stage.
  void set_seed(std::uint64_t s) {
    seed = s;
    train.seed = pretrain.seed = distill.train.seed = s;
  }
};

}  // namespace tncse
