#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tncse/errors.hpp"
#include "tncse/rng.hpp"

namespace tncse {

// Lowercased whitespace tokens; common punctuation is split off so that real
// STS files tokenize sensibly.
inline std::vector<std::string> split_tokens(std::string_view sentence) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : sentence) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::string_view(".,!?;:\"()").find(ch) != std::string_view::npos) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

class Vocab {
 public:
  static constexpr std::int32_t pad_id = 0;
  static constexpr std::int32_t cls_id = 1;
  static constexpr std::int32_t sep_id = 2;
  static constexpr std::int32_t unk_id = 3;
  static constexpr std::size_t num_reserved = 4;

  Vocab() : Vocab(std::vector<std::string>{}) {}

  // `tokens` excludes the reserved entries.
  explicit Vocab(std::vector<std::string> tokens) {
    tokens_ = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};
    for (auto& t : tokens) {
      if (index_.count(t) || is_reserved(t)) throw InvalidArgument("vocab: duplicate token '" + t + "'");
      index_.emplace(t, static_cast<std::int32_t>(tokens_.size()));
      tokens_.push_back(std::move(t));
    }
  }

  // Frequency-ranked, ties broken lexicographically; at most `max_size`
  // entries including the reserved ones.
  static Vocab build(const std::vector<std::string>& corpus, std::size_t max_size = 30000) {
    if (corpus.empty()) throw DataError("build_vocab: empty corpus");
    if (max_size < num_reserved) throw InvalidArgument("build_vocab: max_size below reserved count");
    std::map<std::string, std::size_t> freq;
    for (const auto& s : corpus)
      for (auto& t : split_tokens(s)) ++freq[t];
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> toks;
    for (auto& [t, n] : ranked) {
      if (toks.size() + num_reserved >= max_size) break;
      if (is_reserved(t)) continue;
      toks.push_back(t);
    }
    return Vocab(std::move(toks));
  }

  std::int32_t id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? unk_id : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  // Non-reserved tokens in id order.
  std::vector<std::string> user_tokens() const { return {tokens_.begin() + num_reserved, tokens_.end()}; }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("vocab");
    for (const auto& t : tokens_) h = fnv1a(t + "\n", h);
    return h;
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  static bool is_reserved(std::string_view t) {
    return t == "[PAD]" || t == "[CLS]" || t == "[SEP]" || t == "[UNK]";
  }
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// ids and attention mask, batch x seq_len row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;

  std::int32_t id(std::size_t b, std::size_t s) const { return ids[b * seq_len + s]; }
  // Number of leading unmasked positions in the longest row.
  std::size_t effective_len() const {
    std::size_t best = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t n = 0;
      while (n < seq_len && mask[b * seq_len + n]) ++n;
      best = std::max(best, n);
    }
    return best;
  }
};

struct TokenRow {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
};

// [CLS] tokens... [SEP] [PAD]...; tokens truncated to max_seq_len - 2.
inline TokenRow tokenize(const Vocab& vocab, std::string_view sentence, std::size_t max_seq_len) {
  if (max_seq_len < 2) throw InvalidArgument("tokenize: max_seq_len must be >= 2");
  auto toks = split_tokens(sentence);
  if (toks.size() > max_seq_len - 2) toks.resize(max_seq_len - 2);
  TokenRow row;
  row.ids.assign(max_seq_len, Vocab::pad_id);
  row.mask.assign(max_seq_len, 0);
  std::size_t p = 0;
  row.ids[p] = Vocab::cls_id;
  row.mask[p++] = 1;
  for (const auto& t : toks) {
    row.ids[p] = vocab.id(t);
    row.mask[p++] = 1;
  }
  row.ids[p] = Vocab::sep_id;
  row.mask[p] = 1;
  return row;
}

inline TokenBatch make_batch(const Vocab& vocab, const std::vector<std::string>& sentences, std::size_t max_seq_len) {
  TokenBatch b;
  b.batch = sentences.size();
  b.seq_len = max_seq_len;
  b.ids.reserve(b.batch * max_seq_len);
  b.mask.reserve(b.batch * max_seq_len);
  for (const auto& s : sentences) {
    auto row = tokenize(vocab, s, max_seq_len);
    b.ids.insert(b.ids.end(), row.ids.begin(), row.ids.end());
    b.mask.insert(b.mask.end(), row.mask.begin(), row.mask.end());
  }
  return b;
}

struct StsPair {
  std::string sentence_a;
  std::string sentence_b;
  double gold_score = 0.0;  // [0, 5]
};

// --- file formats -----------------------------------------------------------

inline std::vector<std::string> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read corpus file " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(line);
  }
  if (out.empty()) throw DataError("corpus file " + path + " has no sentences");
  return out;
}

inline std::vector<StsPair> parse_sts(std::istream& in, const std::string& source) {
  std::vector<StsPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const std::string where = source + ":" + std::to_string(lineno);
    if (cols.size() < 3) throw DataError(where + ": expected 3 tab-separated columns");
    const auto& sc = cols[2];
    double score = 0;
    auto [ptr, ec] = std::from_chars(sc.data(), sc.data() + sc.size(), score);
    if (ec != std::errc() || ptr != sc.data() + sc.size() || sc.empty())
      throw DataError(where + ": non-numeric score '" + sc + "'");
    if (!(score >= 0.0 && score <= 5.0)) throw DataError(where + ": score " + sc + " outside [0, 5]");
    out.push_back({cols[0], cols[1], score});
  }
  return out;
}

inline std::vector<StsPair> load_sts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read STS file " + path);
  auto pairs = parse_sts(in, path);
  if (pairs.empty()) throw DataError("STS file " + path + " has no pairs");
  return pairs;
}

inline std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline void write_corpus(const std::string& path, const std::vector<std::string>& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& s : corpus) out << s << '\n';
}

inline void write_sts(const std::string& path, const std::vector<StsPair>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& p : pairs) out << p.sentence_a << '\t' << p.sentence_b << '\t' << format_number(p.gold_score) << '\n';
}

// --- synonyms and augmentation ---------------------------------------------

// Groups of interchangeable surface forms, each tagged with a slot category.
class SynonymTable {
 public:
  struct Group {
    std::string category;
    std::vector<std::string> forms;
  };

  SynonymTable() = default;

  // Lines: category<TAB>word<TAB>synonym[<TAB>synonym...]; '#' starts a comment.
  static SynonymTable parse(std::istream& in, const std::string& source) {
    SynonymTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      Group g;
      std::string field;
      std::getline(ls, g.category, '\t');
      while (std::getline(ls, field, '\t'))
        if (!field.empty()) g.forms.push_back(field);
      if (g.category.empty() || g.forms.size() < 2)
        throw DataError(source + ":" + std::to_string(lineno) + ": expected category and at least two forms");
      t.add(std::move(g), source + ":" + std::to_string(lineno));
    }
    if (t.groups_.empty()) throw DataError(source + ": synonym table is empty");
    return t;
  }

  static SynonymTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read synonym table " + path);
    return parse(in, path);
  }

  const std::vector<Group>& groups() const { return groups_; }
  std::vector<std::string> categories() const {
    std::set<std::string> s;
    for (const auto& g : groups_) s.insert(g.category);
    return {s.begin(), s.end()};
  }
  // Group index of a surface form, or -1.
  int group_of(const std::string& form) const {
    auto it = form_index_.find(form);
    return it == form_index_.end() ? -1 : it->second;
  }

 private:
  void add(Group g, const std::string& where) {
    const int gi = static_cast<int>(groups_.size());
    for (const auto& f : g.forms) {
      if (form_index_.count(f)) throw DataError(where + ": form '" + f + "' listed twice");
      form_index_.emplace(f, gi);
    }
    groups_.push_back(std::move(g));
  }
  std::vector<Group> groups_;
  std::unordered_map<std::string, int> form_index_;
};

// Synonym substitution restricted to a seeded subset of groups, so that two
// encoders pretrained with different member indices see different
// paraphrase knowledge.
class Augmenter {
 public:
  Augmenter(const SynonymTable& table, std::uint64_t seed, std::uint64_t member, double coverage, double swap_p)
      : table_(&table), swap_p_(swap_p) {
    if (!(coverage >= 0.0 && coverage <= 1.0)) throw InvalidArgument("augmenter: coverage must lie in [0, 1]");
    if (!(swap_p >= 0.0 && swap_p <= 1.0)) throw InvalidArgument("augmenter: swap probability must lie in [0, 1]");
    enabled_.resize(table.groups().size());
    for (std::size_t g = 0; g < enabled_.size(); ++g) {
      Rng r(derive_seed({seed, member, g, 0xA06ULL}));
      enabled_[g] = r.uniform() < coverage;
    }
  }

  bool covers(std::size_t group) const { return enabled_.at(group); }

  std::string augment(const std::string& sentence, Rng& rng) const {
    auto toks = split_tokens(sentence);
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      std::string tok = toks[i];
      const int g = table_->group_of(tok);
      if (g >= 0 && enabled_[static_cast<std::size_t>(g)] && rng.uniform() < swap_p_) {
        const auto& forms = table_->groups()[static_cast<std::size_t>(g)].forms;
        auto pick = rng.below(forms.size() - 1);
        std::vector<std::string> others;
        for (const auto& f : forms)
          if (f != tok) others.push_back(f);
        tok = others[pick];
      }
      if (i) out.push_back(' ');
      out += tok;
    }
    return out;
  }

 private:
  const SynonymTable* table_;
  double swap_p_;
  std::vector<bool> enabled_;
};

// --- synthetic dataset ------------------------------------------------------

struct SynthDataset {
  std::vector<std::string> corpus;
  std::vector<StsPair> dev;
  std::vector<StsPair> test;
};

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t n_templates = 24;
  std::size_t n_sentences = 6000;
  std::size_t n_dev = 500;
  std::size_t n_test = 500;
};

namespace synth_detail {

struct Template {
  // Either a fixed word or a slot ("@category").
  std::vector<std::string> parts;
  std::vector<std::size_t> slots() const {
    std::vector<std::size_t> s;
    for (std::size_t i = 0; i < parts.size(); ++i)
      if (!parts[i].empty() && parts[i][0] == '@') s.push_back(i);
    return s;
  }
};

struct Sentence {
  std::size_t tmpl = 0;
  std::vector<std::size_t> concepts;  // group index per slot
  std::vector<std::size_t> forms;     // form index per slot
};

inline const std::vector<std::vector<std::string>>& frames() {
  // Sentence skeletons over slot categories. Function-word slots in braces
  // are filled per template from small closed classes.
  static const std::vector<std::vector<std::string>> f = {
      {"{det}", "@adj", "@person", "@verb", "{det}", "@object"},
      {"{det}", "@person", "@verb", "{det}", "@adj", "@object", "{prep}", "{det}", "@place"},
      {"{det}", "@animal", "@adv", "@verb", "{det}", "@object"},
      {"{det}", "@adj", "@animal", "@verb", "{prep}", "{det}", "@place"},
      {"{det}", "@person", "@adv", "@verb", "{det}", "@adj", "@animal"},
      {"{det}", "@object", "{prep}", "{det}", "@place", "is", "@adj"},
      {"{det}", "@person", "@verb", "{det}", "@object", "@adv"},
      {"{det}", "@adj", "@person", "@adv", "@verb", "{det}", "@animal", "{prep}", "{det}", "@place"},
      {"{det}", "@animal", "@verb", "{det}", "@adj", "@object"},
      {"{prep}", "{det}", "@place", "{det}", "@person", "@verb", "{det}", "@object"},
  };
  return f;
}

inline const std::vector<std::string>& dets() {
  static const std::vector<std::string> d = {"the", "a", "this", "that", "my", "our", "their", "one"};
  return d;
}
inline const std::vector<std::string>& preps() {
  static const std::vector<std::string> p = {"in", "near", "at", "behind", "inside", "beside", "outside", "by"};
  return p;
}

}  // namespace synth_detail

// Template-generated sentences over the synonym table's concepts, plus graded
// STS pairs: identical (5), paraphrase by synonym substitution (4), same
// template with one (3) or two (2) concepts changed, and unrelated templates
// (1 when a concept is shared, else 0).
inline SynthDataset synth_corpus(const SynonymTable& table, const SynthConfig& cfg) {
  using namespace synth_detail;
  if (cfg.n_templates < 1 || cfg.n_sentences < 1) throw InvalidArgument("synth_corpus: sizes must be >= 1");
  std::map<std::string, std::vector<std::size_t>> by_cat;
  for (std::size_t g = 0; g < table.groups().size(); ++g) by_cat[table.groups()[g].category].push_back(g);

  Rng trng(derive_seed({cfg.seed, 0x7E3ULL}));
  std::vector<Template> templates;
  std::set<std::vector<std::string>> seen;
  for (std::size_t attempt = 0; templates.size() < cfg.n_templates && attempt < cfg.n_templates * 200; ++attempt) {
    const auto& fr = frames()[trng.below(frames().size())];
    Template t;
    bool ok = true;
    for (const auto& p : fr) {
      if (p == "{det}") {
        t.parts.push_back(dets()[trng.below(dets().size())]);
      } else if (p == "{prep}") {
        t.parts.push_back(preps()[trng.below(preps().size())]);
      } else {
        if (p[0] == '@' && by_cat[p.substr(1)].empty()) ok = false;
        t.parts.push_back(p);
      }
    }
    if (!ok) continue;
    if (seen.insert(t.parts).second) templates.push_back(std::move(t));
  }
  if (templates.empty()) throw DataError("synth_corpus: synonym table lacks the categories the templates need");

  auto render = [&](const Sentence& s) {
    const auto& t = templates[s.tmpl];
    std::string out;
    std::size_t k = 0;
    for (std::size_t i = 0; i < t.parts.size(); ++i) {
      if (i) out.push_back(' ');
      if (t.parts[i][0] == '@') {
        out += table.groups()[s.concepts[k]].forms[s.forms[k]];
        ++k;
      } else {
        out += t.parts[i];
      }
    }
    return out;
  };
  auto category_of_slot = [&](std::size_t tmpl, std::size_t k) {
    return templates[tmpl].parts[templates[tmpl].slots()[k]].substr(1);
  };
  auto draw_concept = [&](Rng& r, const std::string& cat, std::size_t avoid = SIZE_MAX) {
    const auto& pool = by_cat[cat];
    if (pool.size() == 1) return pool[0];
    for (;;) {
      auto c = pool[r.below(pool.size())];
      if (c != avoid) return c;
    }
  };
  auto draw_form = [&](Rng& r, std::size_t concept_id) {
    return static_cast<std::size_t>(r.below(table.groups()[concept_id].forms.size()));
  };
  auto draw_sentence = [&](Rng& r) {
    Sentence s;
    s.tmpl = r.below(templates.size());
    const auto nslots = templates[s.tmpl].slots().size();
    for (std::size_t k = 0; k < nslots; ++k) {
      auto c = draw_concept(r, category_of_slot(s.tmpl, k));
      s.concepts.push_back(c);
      s.forms.push_back(draw_form(r, c));
    }
    return s;
  };

  SynthDataset ds;
  Rng crng(derive_seed({cfg.seed, 0xC0DULL}));
  ds.corpus.reserve(cfg.n_sentences);
  for (std::size_t i = 0; i < cfg.n_sentences; ++i) ds.corpus.push_back(render(draw_sentence(crng)));

  auto make_pairs = [&](std::size_t n, std::uint64_t salt) {
    Rng r(derive_seed({cfg.seed, salt}));
    std::vector<StsPair> out;
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = draw_sentence(r);
      Sentence b = a;
      double gold = 5.0;
      switch (i % 5) {
        case 0:
          break;
        case 1: {  // paraphrase: re-draw surface forms, at least one changes
          gold = 4.0;
          bool changed = false;
          for (std::size_t k = 0; k < b.forms.size(); ++k) {
            const auto nf = table.groups()[b.concepts[k]].forms.size();
            if (r.uniform() < 0.6) {
              b.forms[k] = (a.forms[k] + 1 + r.below(nf - 1)) % nf;
              changed = true;
            }
          }
          if (!changed) {
            const auto k = r.below(b.forms.size());
            const auto nf = table.groups()[b.concepts[k]].forms.size();
            b.forms[k] = (a.forms[k] + 1 + r.below(nf - 1)) % nf;
          }
          break;
        }
        case 2:
        case 3: {  // one or two concepts replaced
          const std::size_t n_change = std::min<std::size_t>(i % 5 == 2 ? 1 : 2, b.concepts.size());
          gold = n_change == 1 ? 3.0 : 2.0;
          std::vector<std::size_t> idx(b.concepts.size());
          for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
          shuffle(idx, r);
          for (std::size_t j = 0; j < n_change; ++j) {
            const auto k = idx[j];
            b.concepts[k] = draw_concept(r, category_of_slot(b.tmpl, k), a.concepts[k]);
            b.forms[k] = draw_form(r, b.concepts[k]);
          }
          break;
        }
        case 4: {  // unrelated template
          if (templates.size() > 1) {
            do {
              b = draw_sentence(r);
            } while (b.tmpl == a.tmpl);
          } else {
            b = draw_sentence(r);
          }
          bool shared = false;
          for (auto c : a.concepts)
            for (auto d : b.concepts) shared = shared || c == d;
          gold = shared ? 1.0 : 0.0;
          break;
        }
      }
      out.push_back({render(a), render(b), gold});
    }
    return out;
  };
  ds.dev = make_pairs(cfg.n_dev, 0xDE7ULL);
  ds.test = make_pairs(cfg.n_test, 0x7E57ULL);
  return ds;
}

// --- batching ---------------------------------------------------------------

// Deterministic shuffled partition of [0, n) for one epoch; the final short
// batch is kept. batch_size > n yields a single batch of everything.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::uint64_t epoch) {
  if (batch_size < 1) throw InvalidArgument("batch_iter: batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed({seed, epoch, 0xBA7ULL}));
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
  return out;
}

inline std::vector<TokenBatch> batch_iter(const std::vector<std::string>& corpus, const Vocab& vocab,
                                          std::size_t max_seq_len, std::size_t batch_size, std::uint64_t seed,
                                          std::uint64_t epoch) {
  std::vector<TokenBatch> out;
  for (const auto& idx : epoch_batches(corpus.size(), batch_size, seed, epoch)) {
    std::vector<std::string> s;
    for (auto i : idx) s.push_back(corpus[i]);
    out.push_back(make_batch(vocab, s, max_seq_len));
  }
  return out;
}

// Maps a global step onto consecutive epochs of epoch_batches.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n, std::size_t batch_size, std::uint64_t seed) : n_(n), bs_(batch_size), seed_(seed) {
    if (n == 0) throw DataError("batch schedule over an empty corpus");
  }

  const std::vector<std::size_t>& at(std::size_t step) {
    const std::size_t per_epoch = (n_ + std::min(bs_, n_) - 1) / std::min(bs_, n_);
    const std::uint64_t epoch = step / per_epoch;
    if (epoch != cached_epoch_ || batches_.empty()) {
      batches_ = epoch_batches(n_, bs_, seed_, epoch);
      cached_epoch_ = epoch;
    }
    return batches_[step % per_epoch];
  }

 private:
  std::size_t n_, bs_;
  std::uint64_t seed_;
  std::uint64_t cached_epoch_ = UINT64_MAX;
  std::vector<std::vector<std::size_t>> batches_;
};

}  // namespace tncse
