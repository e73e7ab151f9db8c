// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Pass criterion numbers as arguments to run a subset.

#include <sys/resource.h>
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "tncse/tncse.hpp"

namespace {

using namespace tncse;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

// CPU seconds of this process plus finished children.
double cpu_seconds() {
  double s = 0;
  for (int who : {RUSAGE_SELF, RUSAGE_CHILDREN}) {
    rusage u{};
    getrusage(who, &u);
    s += u.ru_utime.tv_sec + u.ru_stime.tv_sec + 1e-6 * (u.ru_utime.tv_usec + u.ru_stime.tv_usec);
  }
  return s;
}

std::string num(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// Default configuration at seed 1 on the synthetic corpus.
struct Context {
  ExperimentConfig exp = ExperimentConfig::from(Config());
  Datasets ds = load_datasets(exp);
  TrainData data() const { return ds.train_data(); }
};

Context& ctx() {
  static Context c;
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tncse_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = "\"" TNCSE_CLI_PATH "\" " + args + " >/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 1. l_tn_kt is non-negative on the grid with its zero at (1,1), and l_tn
// agrees with the ratio/cosine form on random pairs.
Outcome c1() {
  std::size_t cells = 0, negative = 0, zero_elsewhere = 0;
  double at_one = -1;
  for (int ki = 1; ki <= 400; ++ki)
    for (int ti = -100; ti <= 100; ++ti) {
      const double k = 0.0125 * ki, t = 0.01 * ti;
      const double v = l_tn_kt(k, t);
      ++cells;
      negative += v < 0;
      if (ki == 80 && ti == 100) at_one = v;
      else zero_elsewhere += v <= 1e-12;
    }
  Rng rng(1);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t d = 2 + rng.below(63);
    std::vector<double> h(d), hp(d);
    const double sh = std::exp(rng.normal()), sp = std::exp(rng.normal());
    for (auto& v : h) v = sh * rng.normal();
    for (auto& v : hp) v = sp * rng.normal();
    const double direct = l_tn<double>(h, hp);
    const double via = l_tn_kt(l2_norm<double>(hp) / l2_norm<double>(h), cosine_sim<double>(h, hp));
    worst = std::max(worst, std::abs(direct - via) / std::max(std::abs(via), 1e-300));
  }
  const bool pass = negative == 0 && zero_elsewhere == 0 && std::abs(at_one) <= 1e-12 && worst <= 1e-12;
  return {pass, "grid " + std::to_string(cells) + " cells, negatives=" + std::to_string(negative) +
                    ", l(1,1)=" + num(at_one) + ", other zeros=" + std::to_string(zero_elsewhere) +
                    ", max rel err over 1e4 pairs=" + num(worst, 3)};
}

double info_nce_of(const Tensor<double>& h, const Tensor<double>& hp) {
  Tape<double> tape;
  return info_nce(tape.constant(h), tape.constant(hp), 0.05).item();
}

// 2. Closed-form loss values.
Outcome c2() {
  const double one = info_nce_of(Tensor<double>::matrix(1, 3, {0.3, -1, 2}), Tensor<double>::matrix(1, 3, {1, 1, 1}));
  const auto same = Tensor<double>::matrix(2, 3, {1, 2, 3, 1, 2, 3});
  const double ident = info_nce_of(same, same);
  const auto ortho = Tensor<double>::matrix(2, 2, {1, 0, 0, 1});
  const double orth = info_nce_of(ortho, ortho);
  const std::vector<double> a{3, 0}, b{0, 4};
  const double tn = l_tn<double>(a, b);
  const double e1 = std::abs(one), e2 = std::abs(ident - std::log(2.0)), e3 = std::abs(orth - std::log1p(std::exp(-20.0))),
               e4 = std::abs(tn - 5.0 / 7.0);
  const bool pass = e1 <= 1e-9 && e2 <= 1e-9 && e3 <= 1e-9 && e4 <= 1e-12;
  return {pass, "batch1=" + num(one, 3) + ", identical=" + num(ident, 12) + " (err " + num(e2, 3) +
                    "), orthogonal err=" + num(e3, 3) + ", l_tn(3,0|0,4) err=" + num(e4, 3)};
}

// 3. Finite-difference gradient checks of every loss and primitive.
Outcome c3() {
  const auto entries = run_grad_suite(20, 1, 1e-6);
  std::size_t failed = 0, min_configs = SIZE_MAX;
  double worst = 0;
  std::string worst_name, failures;
  std::set<std::string> names;
  for (const auto& e : entries) {
    names.insert(e.name);
    min_configs = std::min(min_configs, e.configs);
    if (e.max_error > worst) worst = e.max_error, worst_name = e.name;
    if (!e.passed) ++failed, failures += " " + e.name;
  }
  bool all_losses = true;
  for (const char* n : {"loss.l_tn", "loss.info_nce", "loss.icnce", "loss.l_tn_modulated", "loss.ictn", "loss.total",
                        "encoder", "layer_norm", "attention", "gelu", "softmax_cross_entropy"})
    all_losses = all_losses && names.count(n);
  const bool pass = failed == 0 && min_configs >= 20 && all_losses;
  return {pass, std::to_string(entries.size()) + " entries x >=" + std::to_string(min_configs) +
                    " configs, worst " + worst_name + "=" + num(worst, 3) + (failed ? ", failed:" + failures : "") +
                    (all_losses ? "" : ", missing loss entries")};
}

std::optional<PretrainedPair> shared_pair;

// 4. Loss-choice ablation on the default configuration.
Outcome c4() {
  auto& c = ctx();
  const auto data = c.data();
  shared_pair = pretrain_pair(c.exp.encoder, data, c.exp.pretrain, c.ds.synonym_table(), c.exp.augment);
  const auto rows = run_ablation(*shared_pair, data, c.exp.train, [](const AblationRow& r) {
    std::cout << "  [4] " << r.name << ' ' << format_number(r.val_spearman) << std::endl;
  });
  std::istringstream table(ablation_table(rows));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(table, line)) ++lines;
  double baseline = 0, full = 0, nce = 0, best_ictn = -2;
  std::string best_ictn_name;
  for (const auto& r : rows) {
    if (r.name == "baseline") baseline = r.val_spearman;
    if (r.name == "nce+icnce+ictn") full = r.val_spearman;
    if (r.name == "nce") nce = r.val_spearman;
    if (r.name != "baseline" && r.terms.has(TermSet::ictn) && r.val_spearman > best_ictn)
      best_ictn = r.val_spearman, best_ictn_name = r.name;
  }
  const bool a = full > baseline, b = rows.size() == 8 && lines == 9, cc = best_ictn > nce;
  return {a && b && cc, "(a) full " + num(full) + " vs baseline " + num(baseline) + (a ? " ok" : " FAIL") + "; (b) " +
                            std::to_string(rows.size()) + " rows" + (b ? " ok" : " FAIL") + "; (c) " + best_ictn_name +
                            " " + num(best_ictn) + " vs nce " + num(nce) + (cc ? " ok" : " FAIL")};
}

// 5. Single-encoder norm term against plain pretraining, seeds 1 to 3.
Outcome c5() {
  auto& c = ctx();
  const auto data = c.data();
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto e = c.exp;
    e.set_seed(seed);
    Augmenter aug(*c.ds.synonyms, seed, 0, e.augment.coverage, e.augment.swap_p);
    auto base = make_encoder(e.encoder, c.ds.vocab, seed, 0), tn = base;
    const double p = pretrain_single(base, data, e.pretrain, {&aug}).best_spearman();
    const double s = train_single_tn(tn, data, e.pretrain, {&aug}).best_spearman();
    pass = pass && s >= p - 0.02;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " single_tn " + num(s) +
              " vs pretrain " + num(p) + " (diff " + num(s - p, 3) + ")";
    std::cout << "  [5] seed " << seed << " single_tn " << s << " pretrain " << p << std::endl;
  }
  return {pass, detail};
}

std::vector<std::string> random_sentences(const Vocab& vocab, std::size_t n, std::uint64_t seed) {
  const auto words = vocab.user_tokens();
  Rng rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string s;
    const auto len = 1 + rng.below(12);
    for (std::size_t j = 0; j < len; ++j) s += (j ? " " : "") + words[rng.below(words.size())];
    out.push_back(s);
  }
  return out;
}

// 6. Ensemble output is the exact elementwise sum of member h^L.
Outcome c6() {
  auto& c = ctx();
  const auto I = make_encoder(c.exp.encoder, c.ds.vocab, 1, 0).cast<double>();
  const auto II = make_encoder(c.exp.encoder, c.ds.vocab, 1, 1).cast<double>();
  const auto sentences = random_sentences(c.ds.vocab, 100, 6);
  const auto a = encode_sentences(I, c.ds.vocab, sentences).last_hidden;
  const auto b = encode_sentences(II, c.ds.vocab, sentences).last_hidden;
  const auto ens = ensemble_embed(EnsembleModel<double>({&I, &II}, c.ds.vocab), sentences);
  const auto swapped = ensemble_embed(EnsembleModel<double>({&II, &I}, c.ds.vocab), sentences);
  std::size_t mismatches = 0;
  bool shape_ok = ens.shape == a.shape;
  for (std::size_t i = 0; shape_ok && i < ens.data.size(); ++i)
    mismatches += ens.data[i] != a.data[i] + b.data[i] || swapped.data[i] != ens.data[i];
  return {shape_ok && mismatches == 0, std::to_string(ens.data.size()) + " doubles over 100 sentences, " +
                                           std::to_string(mismatches) + " differ from the member sum"};
}

// 7. LayerNorm stripping raises the spread of ||h^L||; the pooler output has
// the larger spread at n=0.
Outcome c7() {
  auto& c = ctx();
  const auto sentences = probe_sentences(c.ds.corpus, 100, c.exp.seed);
  const auto L = c.exp.encoder.num_layernorms();
  auto check = [&](const Encoder<float>& enc, const std::string& label, bool& pass) {
    const auto rows = norm_probe(enc, c.ds.vocab, sentences, {0, L});
    const bool a = rows[0].last_hidden.cv < rows[1].last_hidden.cv;
    const bool b = rows[0].pooler.cv > rows[0].last_hidden.cv;
    pass = pass && a && b;
    return label + ": cv(hL) n=0 " + num(rows[0].last_hidden.cv, 3) + " < n=" + std::to_string(L) + " " +
           num(rows[1].last_hidden.cv, 3) + (a ? "" : " FAIL") + ", cv(hP) " + num(rows[0].pooler.cv, 3) +
           " > cv(hL)" + (b ? "" : " FAIL");
  };
  bool pass = true;
  std::string detail = check(make_encoder(c.exp.encoder, c.ds.vocab, c.exp.seed, 0), "untrained", pass);
  if (shared_pair) detail += "; " + check(shared_pair->enc_I, "pretrained", pass);
  return {pass, detail};
}

// 8. Distillation from a trained pair leaves the teacher untouched and
// improves the student.
Outcome c8() {
  auto& c = ctx();
  const auto data = c.data();
  auto pair = shared_pair ? *shared_pair
                          : pretrain_pair(c.exp.encoder, data, c.exp.pretrain, c.ds.synonym_table(), c.exp.augment);
  train_tncse(pair.enc_I, pair.enc_II, data, c.exp.train);
  const auto dir = scratch("distill");
  auto teacher_hash = [&] {
    save_checkpoint(dir / "teacher_I", pair.enc_I, c.ds.vocab);
    save_checkpoint(dir / "teacher_II", pair.enc_II, c.ds.vocab);
    return checkpoint_hash(dir / "teacher_I.manifest") + checkpoint_hash(dir / "teacher_II.manifest");
  };
  const auto before = teacher_hash();
  EnsembleModel<float> teacher({&pair.enc_I, &pair.enc_II}, c.ds.vocab);
  const auto r = distill(teacher, data, c.exp.distill);
  const auto after = teacher_hash();
  fs::remove_all(dir);

  const auto& ev = r.log.evals;
  const double loss0 = ev.front().val_distill.value(), loss_best = ev[r.log.best_index()].val_distill.value();
  const auto untrained = make_encoder(c.exp.distill.student, c.ds.vocab, c.exp.distill.train.seed, c.exp.distill.student_stream);
  const double rho0 = sts_eval(encoder_embed_fn(untrained, c.ds.vocab), c.ds.dev);
  const double rho = sts_eval(encoder_embed_fn(r.student, c.ds.vocab), c.ds.dev);
  const bool a = loss_best < loss0, b = before == after, cc = rho > rho0;
  return {a && b && cc, "distill loss step0 " + num(loss0) + " -> best " + num(loss_best) + (a ? "" : " FAIL") +
                            ", teacher hash " + (b ? "unchanged" : "CHANGED") + ", student spearman " + num(rho0) +
                            " -> " + num(rho) + (cc ? "" : " FAIL")};
}

// 9. Identical config and seed give identical bytes; the significance suite
// emits seeds 1 to 5 with mean/std in a truncated 200-step mode.
Outcome c9() {
  auto& c = ctx();
  const auto data = c.data();
  auto e = c.exp;
  e.pretrain.steps = 100;
  e.pretrain.eval_interval = 50;
  e.train.steps = 100;
  e.train.eval_interval = 50;
  const auto dir = scratch("repro");
  auto run = [&](const std::string& tag) {
    auto pair = pretrain_pair(e.encoder, data, e.pretrain, c.ds.synonym_table(), e.augment);
    const auto log = train_tncse(pair.enc_I, pair.enc_II, data, e.train);
    fs::create_directories(dir / tag);
    save_checkpoint(dir / tag / "I", pair.enc_I, c.ds.vocab);
    save_checkpoint(dir / tag / "II", pair.enc_II, c.ds.vocab);
    return pair.log_I.csv() + pair.log_II.csv() + log.csv();
  };
  const auto trace_a = run("a"), trace_b = run("b");
  bool same_bytes = true;
  for (const char* f : {"I.bin", "II.bin", "I.manifest", "II.manifest"})
    same_bytes = same_bytes && ckpt_detail::read_file(dir / "a" / f) == ckpt_detail::read_file(dir / "b" / f);
  const bool same_trace = trace_a == trace_b;

  const auto t0 = std::chrono::steady_clock::now();
  const int rc = run_cli("significance --out \"" + (dir / "sig").string() +
                         "\" --set significance.trainer=tncse --set pretrain.steps=200 --set pretrain.eval_interval=50"
                         " --set train.steps=200 --set train.eval_interval=50");
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::vector<std::uint64_t> seeds;
  std::vector<double> vals;
  std::string footer;
  if (rc == 0) {
    std::istringstream in(ckpt_detail::read_file(dir / "sig" / "significance.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.rfind("#", 0) == 0) {
        footer = line;
        continue;
      }
      const auto comma = line.find(',');
      seeds.push_back(std::stoull(line.substr(0, comma)));
      vals.push_back(std::stod(line.substr(comma + 1)));
    }
  }
  bool stats_ok = false;
  if (vals.size() == 5) {
    const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / 5;
    double ss = 0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    std::ostringstream expect;
    expect << "# mean=" << format_number(mean);
    stats_ok = footer.rfind(expect.str(), 0) == 0 && footer.find(" std=" + format_number(std::sqrt(ss / 4))) !=
                                                          std::string::npos;
  }
  fs::remove_all(dir);
  const bool seeds_ok = seeds == std::vector<std::uint64_t>{1, 2, 3, 4, 5};
  const bool pass = same_bytes && same_trace && rc == 0 && seeds_ok && stats_ok && wall < 600;
  return {pass, std::string("checkpoints ") + (same_bytes ? "identical" : "DIFFER") + ", traces " +
                    (same_trace ? "identical" : "DIFFER") + ", significance rc=" + std::to_string(rc) + " seeds " +
                    (seeds_ok ? "1-5" : "WRONG") + ", footer " + (stats_ok ? "ok" : "WRONG") + " (" + footer +
                    "), truncated run " + num(wall, 4) + " s wall"};
}

// Average ranks computed by counting, independent of the library's sort.
std::vector<double> brute_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double y : x) less += y < x[i], equal += y == x[i];
    r[i] = less + (equal + 1) / 2;
  }
  return r;
}

// 10. Spearman against the rank-difference formula; alignment/uniformity
// closed forms.
Outcome c10() {
  std::size_t perms = 0;
  double worst = 0;
  Rng rng(10);
  for (std::size_t n = 2; n <= 6; ++n) {
    std::vector<int> p(n);
    std::iota(p.begin(), p.end(), 0);
    // Gold values are a random strictly increasing sequence; predictions are
    // random values ordered by the permutation.
    std::vector<double> gold(n), base(n);
    double acc = 0;
    for (auto& g : gold) g = acc += 0.1 + rng.uniform();
    acc = 0;
    for (auto& b : base) b = acc += 0.1 + rng.uniform();
    do {
      std::vector<double> pred(n);
      for (std::size_t i = 0; i < n; ++i) pred[i] = base[static_cast<std::size_t>(p[i])];
      const auto rp = brute_ranks(pred), rg = brute_ranks(gold);
      double d2 = 0;
      for (std::size_t i = 0; i < n; ++i) d2 += (rp[i] - rg[i]) * (rp[i] - rg[i]);
      const double nn = static_cast<double>(n);
      const double expected = 1 - 6 * d2 / (nn * (nn * nn - 1));
      worst = std::max(worst, std::abs(spearman(pred, gold) - expected));
      ++perms;
    } while (std::next_permutation(p.begin(), p.end()));
  }
  const auto x = Tensor<double>::matrix(3, 2, {1, 2, -3, 0.5, 0.2, 0.1});
  auto x10 = x;
  for (auto& v : x10.data) v *= 10;
  const double align_same = alignment(x, x);
  const double align_scaled = std::abs(alignment(x, x10));
  const double uni = uniformity(Tensor<double>::matrix(2, 3, {0, 2, 0, 0, -5, 0}));
  const double align_orth = alignment(Tensor<double>::matrix(1, 2, {3, 0}), Tensor<double>::matrix(1, 2, {0, 7}));
  const double e = std::max({std::abs(align_same), align_scaled, std::abs(uni + 8), std::abs(align_orth - 2)});
  const bool pass = worst <= 1e-12 && e <= 1e-9;
  return {pass, std::to_string(perms) + " permutations (n=2..6) max |err|=" + num(worst, 3) +
                    "; alignment identical/rescaled/orthogonal and antipodal uniformity max err=" + num(e, 3)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> fn;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "loss surface", 5, c1},
      {2, "closed-form losses", 1, c2},
      {3, "gradient oracle", 120, c3},
      {4, "loss-choice ablation", 1200, c4},
      {5, "single-encoder norm term", 900, c5},
      {6, "ensemble linearity", 10, c6},
      {7, "norm probe", 60, c7},
      {8, "distillation", 900, c8},
      {9, "reproducibility", 3000, c9},
      {10, "metric correctness", 10, c10},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  std::vector<std::string> summary;
  bool all_pass = true;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const double cpu0 = cpu_seconds();
    const auto wall0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double cpu = cpu_seconds() - cpu0;
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    const bool in_budget = cpu < c.budget_s;
    const bool pass = o.pass && in_budget;
    all_pass = all_pass && pass;
    std::ostringstream line;
    line << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail << " [cpu "
         << num(cpu, 4) << " s, wall " << num(wall, 4) << " s, budget " << c.budget_s << " s"
         << (in_budget ? "" : " EXCEEDED") << "]";
    std::cout << line.str() << std::endl;
    summary.push_back(line.str());
  }
  std::cout << "\n=== acceptance summary ===\n";
  for (const auto& s : summary) std::cout << s << '\n';
  std::cout << (all_pass ? "ALL PASS" : "SOME CRITERIA FAILED") << std::endl;
  return all_pass ? 0 : 1;
}
