// Command-line entry point. Every command resolves a typed configuration,
// writes it to the output directory and reports failures as one stderr line
// of the form "error: <class>: <message>".

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "tncse/tncse.hpp"

namespace fs = std::filesystem;
using namespace tncse;

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

struct Run {
  Config config;
  ExperimentConfig exp;
  Datasets data;
  fs::path dir;
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + p.string());
}

std::string timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

// An explicit --out must be absent or empty unless --force is given; the
// default is a fresh timestamped directory under $TNCSE_OUT_ROOT (or ./runs).
fs::path prepare_out_dir(const std::string& command, const CommonOptions& o) {
  fs::path dir;
  if (!o.out.empty()) {
    dir = o.out;
    if (fs::exists(dir) && !fs::is_directory(dir)) throw ConfigError("--out is not a directory: " + dir.string());
    if (fs::exists(dir) && !fs::is_empty(dir)) {
      if (!o.force) throw ConfigError("output directory " + dir.string() + " is not empty (use --force to replace it)");
      for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
    }
  } else {
    const char* root = std::getenv("TNCSE_OUT_ROOT");
    const fs::path base = fs::path(root && *root ? root : "runs") / (command + "-" + timestamp());
    dir = base;
    for (int i = 2; fs::exists(dir); ++i) dir = base.string() + "-" + std::to_string(i);
  }
  fs::create_directories(dir);
  return dir;
}

// Resolves the configuration and inputs before touching the output
// directory, so a rejected run leaves nothing behind.
Run start(const std::string& command, const CommonOptions& o, bool needs_data = true) {
  Run r;
  r.config = o.config_path.empty() ? Config() : Config::load(o.config_path);
  for (const auto& kv : o.overrides) r.config.apply_override(kv);
  if (o.seed) r.config.set("run.seed", std::to_string(*o.seed), "--seed");
  r.exp = ExperimentConfig::from(r.config);
  if (needs_data) r.data = load_datasets(r.exp);
  r.dir = prepare_out_dir(command, o);
  write_text(r.dir / "resolved.cfg", r.config.dump());
  return r;
}

void finish(const Run& r, const RunMeta& meta) {
  write_text(r.dir / "run.meta", meta.str());
  std::cout << "output: " << r.dir.string() << "\n";
}

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config_path, "configuration file (section.key = value lines)");
  app->add_option("--set", o.overrides, "override one key, e.g. --set train.steps=200")->take_all();
  app->add_option("--out", o.out, "output directory (default: timestamped under $TNCSE_OUT_ROOT or ./runs)");
  app->add_option("--seed", o.seed, "root seed (overrides run.seed)");
  app->add_flag("--force", o.force, "clear a non-empty --out directory first");
}

void log_best(RunMeta& m, const std::string& prefix, const TrainLog& log) {
  m.set(prefix + "initial_val_spearman", log.initial_spearman());
  m.set(prefix + "best_val_spearman", log.best_spearman());
  m.set(prefix + "best_step", static_cast<std::uint64_t>(log.best_step()));
}

PretrainedPair pretrain_into(const Run& r, const Datasets& d, RunMeta& meta, const std::string& prefix) {
  auto data = d.train_data();
  auto pair = pretrain_pair(r.exp.encoder, data, r.exp.pretrain, d.synonym_table(), r.exp.augment);
  save_checkpoint(r.dir / (prefix + "encoder_I"), pair.enc_I, d.vocab);
  save_checkpoint(r.dir / (prefix + "encoder_II"), pair.enc_II, d.vocab);
  save_ensemble_manifest(r.dir / (prefix + "pair.manifest"),
                         {prefix + "encoder_I.manifest", prefix + "encoder_II.manifest"});
  write_text(r.dir / (prefix + "train_log_I.csv"), pair.log_I.csv());
  write_text(r.dir / (prefix + "train_log_II.csv"), pair.log_II.csv());
  log_best(meta, prefix + "I.", pair.log_I);
  log_best(meta, prefix + "II.", pair.log_II);
  return pair;
}

// A pretrained pair from --pair, or a fresh one pretrained in this run.
PretrainedPair obtain_pair(const Run& r, const Datasets& d, const std::string& pair_path, RunMeta& meta) {
  if (pair_path.empty()) return pretrain_into(r, d, meta, "pretrained_");
  auto m = load_model(pair_path);
  if (!m.is_ensemble || m.members.size() != 2)
    throw CheckpointError(pair_path + ": expected an ensemble manifest with two members");
  if (m.vocab.hash() != d.vocab.hash())
    throw CheckpointError(pair_path + ": checkpoint vocabulary does not match the configured corpus");
  meta.set("pair", pair_path);
  PretrainedPair p;
  p.enc_I = std::move(m.members[0]);
  p.enc_II = std::move(m.members[1]);
  return p;
}

std::optional<Augmenter> single_augmenter(const Run& r, const Datasets& d, std::uint64_t member) {
  if (!r.exp.augment.enabled || !d.synonyms) return std::nullopt;
  return Augmenter(*d.synonyms, r.exp.seed, member, r.exp.augment.coverage, r.exp.augment.swap_p);
}

int cmd_synth(const CommonOptions& o) {
  auto r = start("synth", o);
  const auto& d = r.data;
  write_corpus((r.dir / "corpus.txt").string(), d.corpus);
  write_sts((r.dir / "dev.tsv").string(), d.dev);
  write_sts((r.dir / "test.tsv").string(), d.test);
  auto meta = base_meta("synth", r.exp);
  meta.set("corpus.sentences", static_cast<std::uint64_t>(d.corpus.size()));
  meta.set("vocab.size", static_cast<std::uint64_t>(d.vocab.size()));
  finish(r, meta);
  return 0;
}

int cmd_pretrain(const CommonOptions& o, bool single) {
  auto r = start("pretrain", o);
  const auto& d = r.data;
  auto meta = base_meta("pretrain", r.exp);
  meta.set("optim.lr", r.exp.pretrain.optim.lr);
  if (single) {
    auto data = d.train_data();
    auto enc = make_encoder(r.exp.encoder, d.vocab, r.exp.seed, 0);
    auto aug = single_augmenter(r, d, 0);
    auto log = pretrain_single(enc, data, r.exp.pretrain, AugmentSpec{aug ? &*aug : nullptr});
    save_checkpoint(r.dir / "encoder", enc, d.vocab);
    write_text(r.dir / "train_log.csv", log.csv());
    log_best(meta, "", log);
    std::cout << "best val spearman " << format_number(log.best_spearman()) << " at step " << log.best_step() << "\n";
  } else {
    auto pair = pretrain_into(r, d, meta, "");
    std::cout << "best val spearman I " << format_number(pair.log_I.best_spearman()) << ", II "
              << format_number(pair.log_II.best_spearman()) << "\n";
  }
  finish(r, meta);
  return 0;
}

int cmd_train(const CommonOptions& o, const std::string& pair_path) {
  auto r = start("train", o);
  const auto& d = r.data;
  auto meta = base_meta("train", r.exp);
  auto pair = obtain_pair(r, d, pair_path, meta);
  auto data = d.train_data();
  auto log = train_tncse(pair.enc_I, pair.enc_II, data, r.exp.train);
  save_checkpoint(r.dir / "encoder_I", pair.enc_I, d.vocab);
  save_checkpoint(r.dir / "encoder_II", pair.enc_II, d.vocab);
  save_ensemble_manifest(r.dir / "ensemble.manifest", {"encoder_I.manifest", "encoder_II.manifest"});
  write_text(r.dir / "train_log.csv", log.csv());
  meta.set("loss.terms", r.exp.train.loss.enabled.str());
  log_best(meta, "", log);
  std::cout << "ensemble val spearman " << format_number(log.initial_spearman()) << " -> "
            << format_number(log.best_spearman()) << " (best step " << log.best_step() << ")\n";
  finish(r, meta);
  return 0;
}

int cmd_train_single_tn(const CommonOptions& o, const std::string& init_path) {
  auto r = start("train-single-tn", o);
  const auto& d = r.data;
  auto meta = base_meta("train-single-tn", r.exp);
  meta.set("optim.lr", r.exp.pretrain.optim.lr);
  Encoder<float> enc;
  if (init_path.empty()) {
    enc = make_encoder(r.exp.encoder, d.vocab, r.exp.seed, 0);
  } else {
    auto m = load_model(init_path);
    if (m.is_ensemble) throw CheckpointError(init_path + ": expected a single encoder checkpoint");
    if (m.vocab.hash() != d.vocab.hash())
      throw CheckpointError(init_path + ": checkpoint vocabulary does not match the configured corpus");
    enc = std::move(m.members[0]);
    meta.set("init", init_path);
  }
  auto data = d.train_data();
  auto aug = single_augmenter(r, d, enc.stream_id);
  auto log = train_single_tn(enc, data, r.exp.pretrain, AugmentSpec{aug ? &*aug : nullptr});
  save_checkpoint(r.dir / "encoder", enc, d.vocab);
  write_text(r.dir / "train_log.csv", log.csv());
  meta.set("train.single_tn_weight", r.exp.pretrain.single_tn_weight);
  log_best(meta, "", log);
  std::cout << "best val spearman " << format_number(log.best_spearman()) << " at step " << log.best_step() << "\n";
  finish(r, meta);
  return 0;
}

int cmd_distill(const CommonOptions& o, const std::string& teacher_path) {
  auto r = start("distill", o);
  const auto& d = r.data;
  auto meta = base_meta("distill", r.exp);
  meta.set("optim.lr", r.exp.distill.train.optim.lr);
  auto teacher = load_model(teacher_path);
  const auto hash_before = checkpoint_hash(teacher_path);
  if (teacher.vocab.hash() != d.vocab.hash())
    throw CheckpointError(teacher_path + ": teacher vocabulary does not match the configured corpus");
  auto ens = teacher.ensemble();
  auto data = d.train_data();
  auto result = distill(ens, data, r.exp.distill);
  save_checkpoint(r.dir / "student", result.student, d.vocab);
  write_text(r.dir / "train_log.csv", result.log.csv());
  const auto hash_after = checkpoint_hash(teacher_path);
  if (hash_after != hash_before) throw CheckpointError(teacher_path + ": teacher checkpoint changed during distillation");
  meta.set("teacher", teacher_path);
  meta.set("teacher.hash", ckpt_detail::hex64(hash_before));
  meta.set("distill.objective", to_string(r.exp.distill.objective));
  log_best(meta, "", result.log);
  const auto& ev = result.log.evals;
  if (!ev.empty() && ev.front().val_distill) meta.set("initial_distill_loss", *ev.front().val_distill);
  if (!ev.empty() && ev[result.log.best_index()].val_distill)
    meta.set("best_distill_loss", *ev[result.log.best_index()].val_distill);
  std::cout << "student val spearman " << format_number(result.log.initial_spearman()) << " -> "
            << format_number(result.log.best_spearman()) << "\n";
  finish(r, meta);
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& model_path, const std::vector<std::string>& sts_files) {
  auto r = start("eval", o);
  const auto& d = r.data;
  auto model = load_model(model_path);
  auto ens = model.ensemble();
  auto embed = ensemble_embed_fn(ens);
  EvalReport report;
  report.model = model_path;
  report.spearman["dev"] = sts_eval(embed, d.dev);
  if (d.test.size() >= 2) report.spearman["test"] = sts_eval(embed, d.test);
  for (const auto& f : sts_files) {
    if (!fs::exists(f)) throw ConfigError("--sts path does not exist: " + f);
    report.spearman[fs::path(f).stem().string()] = sts_eval(embed, load_sts(f));
  }
  report.finalize();
  add_geometry(report, embed, d.dev);
  write_text(r.dir / "report.txt", report.text());
  write_text(r.dir / "report.kv", report.key_values());
  std::cout << report.text();
  auto meta = base_meta("eval", r.exp);
  meta.set("model", model_path);
  finish(r, meta);
  return 0;
}

int cmd_norm_probe(const CommonOptions& o, const std::string& model_path, std::size_t member) {
  auto r = start("norm-probe", o);
  const auto& d = r.data;
  auto meta = base_meta("norm-probe", r.exp);
  Encoder<float> enc;
  Vocab vocab = d.vocab;
  if (model_path.empty()) {
    enc = make_encoder(r.exp.encoder, d.vocab, r.exp.seed, 0);
    meta.set("model", "untrained");
  } else {
    auto m = load_model(model_path);
    if (member >= m.members.size())
      throw ConfigError("--member " + std::to_string(member) + " out of range for " + model_path);
    enc = std::move(m.members[member]);
    vocab = m.vocab;
    meta.set("model", model_path);
  }
  const auto sentences = probe_sentences(d.corpus, r.exp.probe_sentences, r.exp.seed);
  std::vector<std::size_t> counts;
  for (auto n : r.exp.strip_counts) {
    if (n > 2 * enc.config.num_layers)
      throw ConfigError("eval.strip_counts: " + std::to_string(n) + " exceeds the encoder's " +
                        std::to_string(2 * enc.config.num_layers) + " LayerNorms");
    counts.push_back(n);
  }
  std::vector<ProbeRow> rows;
  try {
    rows = norm_probe(enc, vocab, sentences, counts);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  write_text(r.dir / "probe.csv", probe_csv(rows));
  std::cout << probe_csv(rows);
  finish(r, meta);
  return 0;
}

int cmd_ablate(const CommonOptions& o, const std::string& pair_path) {
  auto r = start("ablate", o);
  const auto& d = r.data;
  auto meta = base_meta("ablate", r.exp);
  auto pair = obtain_pair(r, d, pair_path, meta);
  auto data = d.train_data();
  std::cout << "terms,val_spearman,best_step\n" << std::flush;
  auto rows = run_ablation(pair, data, r.exp.train, [&](const AblationRow& row) {
    std::cout << row.name << ',' << format_number(row.val_spearman) << ',' << row.best_step << '\n' << std::flush;
    if (row.name != "baseline") write_text(r.dir / ("train_log_" + row.name + ".csv"), row.log.csv());
  });
  write_text(r.dir / "ablation.csv", ablation_table(rows));
  meta.set("rows", static_cast<std::uint64_t>(rows.size()));
  finish(r, meta);
  return 0;
}

int cmd_significance(const CommonOptions& o) {
  auto r = start("significance", o);
  const auto& d = r.data;
  auto data = d.train_data();
  const auto trainer = r.exp.significance_trainer;
  auto table = significance_suite([&](std::uint64_t seed) {
    auto e = r.exp;
    e.set_seed(seed);
    double v = 0;
    std::optional<Augmenter> aug;
    if (e.augment.enabled && d.synonyms) aug.emplace(*d.synonyms, seed, 0, e.augment.coverage, e.augment.swap_p);
    if (trainer == "tncse") {
      auto pair = pretrain_pair(e.encoder, data, e.pretrain, d.synonym_table(), e.augment);
      v = train_tncse(pair.enc_I, pair.enc_II, data, e.train).best_spearman();
    } else {
      auto enc = make_encoder(e.encoder, d.vocab, seed, 0);
      const AugmentSpec spec{aug ? &*aug : nullptr};
      v = trainer == "single_tn" ? train_single_tn(enc, data, e.pretrain, spec).best_spearman()
                                 : pretrain_single(enc, data, e.pretrain, spec).best_spearman();
    }
    std::cout << "seed " << seed << ": " << format_number(v) << '\n' << std::flush;
    return v;
  });
  write_text(r.dir / "significance.csv", table.csv());
  std::cout << table.csv();
  auto meta = base_meta("significance", r.exp);
  meta.set("trainer", trainer);
  meta.set("mean", table.mean);
  meta.set("std", table.std);
  finish(r, meta);
  return 0;
}

int cmd_grad_check(const CommonOptions& o, std::size_t configs, double tolerance) {
  auto r = start("grad-check", o, false);
  const auto entries = run_grad_suite(configs, r.exp.seed, tolerance);
  std::ostringstream os;
  bool ok = true;
  for (const auto& e : entries) {
    os << e.name << ' ' << std::scientific << std::setprecision(3) << e.max_error << ' '
       << (e.passed ? "PASS" : "FAIL") << '\n';
    ok = ok && e.passed;
  }
  write_text(r.dir / "gradcheck.txt", os.str());
  std::cout << os.str();
  auto meta = base_meta("grad-check", r.exp);
  meta.set("configs", static_cast<std::uint64_t>(configs));
  meta.set("tolerance", tolerance);
  meta.set("result", ok ? "pass" : "fail");
  finish(r, meta);
  if (!ok) throw NumericError("gradient check failed for at least one entry (see gradcheck.txt)");
  return 0;
}

int report(ErrorClass c, std::string msg) {
  for (auto& ch : msg)
    if (ch == '\n' || ch == '\r') ch = ' ';
  std::cerr << "error: " << error_class_name(c) << ": " << msg << std::endl;
  return exit_code(c);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tensor-norm-constrained contrastive sentence embeddings"};
  app.require_subcommand(1);
  CommonOptions opt;
  std::string pair_path, model_path, teacher_path, init_path;
  std::vector<std::string> sts_files;
  bool single = false;
  std::size_t member = 0, configs = 20;
  double tolerance = 1e-6;

  auto* synth = app.add_subcommand("synth", "write the synthetic corpus and STS splits");
  auto* pretrain = app.add_subcommand("pretrain", "contrastive pretraining of an encoder pair (or one encoder)");
  pretrain->add_flag("--single", single, "pretrain one encoder instead of a pair");
  auto* train = app.add_subcommand("train", "joint training of the encoder pair with the combined loss");
  train->add_option("--pair", pair_path, "pretrained pair manifest (default: pretrain in this run)");
  auto* single_tn = app.add_subcommand("train-single-tn", "single-encoder training with the norm term");
  single_tn->add_option("--init", init_path, "encoder checkpoint to start from (default: fresh)");
  auto* dist = app.add_subcommand("distill", "distill a frozen teacher into a student encoder");
  dist->add_option("--teacher", teacher_path, "teacher ensemble or encoder manifest")->required();
  auto* eval = app.add_subcommand("eval", "STS Spearman, alignment and uniformity of a checkpoint");
  eval->add_option("--model", model_path, "ensemble or encoder manifest")->required();
  eval->add_option("--sts", sts_files, "extra STS files (sentence_a<TAB>sentence_b<TAB>score)");
  auto* probe = app.add_subcommand("norm-probe", "norm statistics with trailing LayerNorms removed");
  probe->add_option("--model", model_path, "checkpoint (default: untrained encoder)");
  probe->add_option("--member", member, "ensemble member to probe");
  auto* ablate = app.add_subcommand("ablate", "baseline plus the seven loss-term subsets");
  ablate->add_option("--pair", pair_path, "pretrained pair manifest (default: pretrain in this run)");
  auto* signif = app.add_subcommand("significance", "repeat a trainer over seeds 1 to 5");
  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient checks of all losses and primitives");
  grad->add_option("--configs", configs, "random configurations per entry")->check(CLI::PositiveNumber);
  grad->add_option("--tolerance", tolerance, "maximum relative error");
  for (auto* s : {synth, pretrain, train, single_tn, dist, eval, probe, ablate, signif, grad}) add_common(s, opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report(ErrorClass::config, e.what());
  }

  try {
    if (synth->parsed()) return cmd_synth(opt);
    if (pretrain->parsed()) return cmd_pretrain(opt, single);
    if (train->parsed()) return cmd_train(opt, pair_path);
    if (single_tn->parsed()) return cmd_train_single_tn(opt, init_path);
    if (dist->parsed()) return cmd_distill(opt, teacher_path);
    if (eval->parsed()) return cmd_eval(opt, model_path, sts_files);
    if (probe->parsed()) return cmd_norm_probe(opt, model_path, member);
    if (ablate->parsed()) return cmd_ablate(opt, pair_path);
    if (signif->parsed()) return cmd_significance(opt);
    if (grad->parsed()) return cmd_grad_check(opt, configs, tolerance);
  } catch (const Error& e) {
    return report(e.error_class(), e.what());
  } catch (const std::invalid_argument& e) {
    return report(ErrorClass::config, e.what());
  } catch (const fs::filesystem_error& e) {
    return report(ErrorClass::data, e.what());
  } catch (const std::exception& e) {
    return report(ErrorClass::numeric, e.what());
  }
  return report(ErrorClass::config, "no command given");
}
