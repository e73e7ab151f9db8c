#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "test_util.hpp"

namespace tncse {
namespace {

using test::tiny;

std::vector<std::string> sentences(std::size_t n) {
  return {tiny().ds.corpus.begin(), tiny().ds.corpus.begin() + static_cast<std::ptrdiff_t>(n)};
}

TEST(Ensemble, SingleMemberIsIdentity) {
  auto e = tiny().encoder();
  EnsembleModel<float> m({&e}, tiny().vocab);
  EXPECT_EQ(ensemble_embed(m, sentences(10)).data, encode_sentences(e, tiny().vocab, sentences(10)).last_hidden.data);
}

TEST(Ensemble, ExactSumAndOrderInvariance) {
  auto a = tiny().encoder(0), b = tiny().encoder(1), c = tiny().encoder(2);
  EnsembleModel<float> ab({&a, &b}, tiny().vocab), ba({&b, &a}, tiny().vocab);
  EnsembleModel<float> abc({&a, &b, &c}, tiny().vocab), cab({&c, &a, &b}, tiny().vocab);
  const auto s = sentences(20);
  const auto u = encode_sentences(a, tiny().vocab, s).last_hidden, v = encode_sentences(b, tiny().vocab, s).last_hidden;
  const auto sum = ensemble_embed(ab, s);
  for (std::size_t i = 0; i < sum.data.size(); ++i) EXPECT_EQ(sum.data[i], u.data[i] + v.data[i]);
  EXPECT_EQ(ensemble_embed(ba, s).data, sum.data);
  EXPECT_EQ(ensemble_embed(abc, s).data, ensemble_embed(cab, s).data);
}

TEST(Ensemble, RejectsMismatchedMembers) {
  auto a = tiny().encoder(0);
  auto cfg = tiny().enc;
  cfg.hidden_dim = 8;
  auto narrow = make_encoder(cfg, tiny().vocab, 1, 1);
  EXPECT_THROW(EnsembleModel<float>({&a, &narrow}, tiny().vocab), InvalidArgument);
  EXPECT_THROW(EnsembleModel<float>({}, tiny().vocab), InvalidArgument);
  auto other = tiny().encoder(1);
  other.vocab_hash ^= 1;
  EXPECT_THROW(EnsembleModel<float>({&a, &other}, tiny().vocab), InvalidArgument);
}

TEST(Distill, TargetsLieInUnitInterval) {
  auto t = test::random_matrix(12, 5, 3);
  for (double temp : {0.5, 1.0, 2.0})
    for (double v : similarity_targets(t, temp)) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
}

TEST(Distill, SelfDistillationStartsAtZero) {
  auto e = tiny().encoder();
  EnsembleModel<float> teacher({&e}, tiny().vocab);
  DistillConfig cfg;
  cfg.train.batch_size = 16;
  EXPECT_NEAR(distill_loss(e, teacher, sentences(64), cfg), 0.0, 1e-10);
  cfg.objective = DistillObjective::embedding;
  EXPECT_EQ(distill_loss(e, teacher, sentences(64), cfg), 0.0);
}

TEST(Distill, ObjectiveMatchesDirectOffDiagonalMse) {
  auto s = test::random_matrix(6, 4, 1), t = test::random_matrix(6, 3, 2);
  DistillConfig cfg;
  const double v = distill_objective(s, t, cfg);
  double acc = 0;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      if (i == j) continue;
      auto row = [](const Tensor<double>& x, std::size_t r) {
        return std::span<const double>(&x.data[r * x.cols()], x.cols());
      };
      const double d = cosine_sim(row(s, i), row(s, j)) - cosine_sim(row(t, i), row(t, j));
      acc += d * d;
    }
  EXPECT_NEAR(v, acc / 30, 1e-12);
  Tape<double> tape;
  EXPECT_NEAR(distill_objective(tape.constant(s), t, cfg).item(), v, 1e-12);
}

TEST(Distill, EmbeddingVariantRequiresEqualDims) {
  auto e = tiny().encoder();
  EnsembleModel<float> teacher({&e}, tiny().vocab);
  DistillConfig cfg;
  cfg.objective = DistillObjective::embedding;
  cfg.student = tiny().enc;
  cfg.student.hidden_dim = 8;
  cfg.train = tiny().train_config(2, 2);
  EXPECT_THROW(distill(teacher, tiny().data(), cfg), InvalidArgument);
}

TEST(Distill, TeacherIsNeverMutated) {
  auto a = tiny().encoder(0), b = tiny().encoder(1);
  const auto dir = std::filesystem::temp_directory_path() / "tncse_teacher";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "I", a, tiny().vocab);
  save_checkpoint(dir / "II", b, tiny().vocab);
  save_ensemble_manifest(dir / "t.manifest", {"I.manifest", "II.manifest"});
  const auto before = checkpoint_hash(dir / "t.manifest");
  auto loaded = load_model(dir / "t.manifest");
  auto ens = loaded.ensemble();
  DistillConfig cfg;
  cfg.student = tiny().enc;
  cfg.train = tiny().train_config(4, 2);
  cfg.probe_size = 32;
  auto result = distill(ens, tiny().data(), cfg);
  EXPECT_TRUE(test::same_params(loaded.members[0], a));
  EXPECT_TRUE(test::same_params(loaded.members[1], b));
  save_checkpoint(dir / "I", loaded.members[0], tiny().vocab);
  save_checkpoint(dir / "II", loaded.members[1], tiny().vocab);
  EXPECT_EQ(checkpoint_hash(dir / "t.manifest"), before);
  std::filesystem::remove_all(dir);
  for (const auto& ev : result.log.evals) EXPECT_TRUE(ev.val_distill.has_value());
  for (const auto& s : result.log.steps) EXPECT_TRUE(s.l_distill.has_value());
}

// --- evaluation --------------------------------------------------------------

TEST(Spearman, Examples) {
  EXPECT_DOUBLE_EQ(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{4, 3, 2, 1}), -1.0);
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{1, 3, 2}), 0.5, 1e-12);
}

TEST(Spearman, RejectsUndefinedInputs) {
  EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), InvalidArgument);
  EXPECT_THROW(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), InvalidArgument);
  EXPECT_THROW(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), InvalidArgument);
}

TEST(Spearman, AverageRanksForTies) {
  EXPECT_EQ(average_ranks(std::vector<double>{10, 20, 10, 30}), (std::vector<double>{1.5, 3, 1.5, 4}));
}

TEST(Spearman, InvariantUnderMonotoneTransforms) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(12), b(12), ta(12), tb(12);
    for (std::size_t i = 0; i < 12; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
      ta[i] = std::exp(3 * a[i]) + 7;
      tb[i] = std::atan(b[i]) * 100;
    }
    EXPECT_NEAR(spearman(a, b), spearman(ta, tb), 1e-12);
  }
}

TEST(StsEval, OracleEmbedderIsPerfect) {
  std::vector<StsPair> ds;
  for (int i = 0; i <= 10; ++i) ds.push_back({"a" + std::to_string(i), "b" + std::to_string(i), i * 0.5});
  // Sentence b_i sits at angle proportional to (5 - gold) from a fixed a.
  EmbedFn embed = [&](const std::vector<std::string>& s) {
    Tensor<double> out({s.size(), 2});
    for (std::size_t r = 0; r < s.size(); ++r) {
      if (s[r][0] == 'a') {
        out.at(r, 0) = 1;
      } else {
        const double gold = std::stod(s[r].substr(1)) * 0.5;
        out.at(r, 0) = std::cos((5 - gold) * 0.3);
        out.at(r, 1) = std::sin((5 - gold) * 0.3);
      }
    }
    return out;
  };
  EXPECT_DOUBLE_EQ(sts_eval(embed, ds), 1.0);
  EXPECT_THROW(sts_eval(embed, {ds[0]}), InvalidArgument);
}

TEST(StsEval, ScaleInvariant) {
  auto e = tiny().encoder();
  auto base = encoder_embed_fn(e, tiny().vocab);
  EmbedFn scaled = [&](const std::vector<std::string>& s) {
    auto t = base(s);
    for (auto& v : t.data) v *= 37.5;
    return t;
  };
  EXPECT_NEAR(sts_eval(base, tiny().ds.dev), sts_eval(scaled, tiny().ds.dev), 1e-12);
}

TEST(StsEval, EnsembleAndSingleInOneReport) {
  auto a = tiny().encoder(0), b = tiny().encoder(1);
  EnsembleModel<float> ens({&a, &b}, tiny().vocab);
  EvalReport r;
  r.model = "pair";
  r.spearman["ensemble"] = sts_eval(ensemble_embed_fn(ens), tiny().ds.dev);
  r.spearman["encoder_I"] = sts_eval(encoder_embed_fn(a, tiny().vocab), tiny().ds.dev);
  r.finalize();
  EXPECT_NEAR(r.average, (r.spearman["ensemble"] + r.spearman["encoder_I"]) / 2, 1e-15);
  for (auto& [k, v] : r.spearman) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_NE(r.text().find("alpha = 2"), std::string::npos);
  EXPECT_NE(r.key_values().find("spearman.ensemble="), std::string::npos);
}

TEST(AlignmentUniformity, ClosedForms) {
  auto x = test::random_matrix(5, 3, 1);
  EXPECT_EQ(alignment(x, x), 0.0);
  auto anti = Tensor<double>::matrix(2, 2, {1, 0, -1, 0});
  EXPECT_NEAR(uniformity(anti), -8.0, 1e-9);
  auto y = test::random_matrix(5, 3, 2), x10 = x, y10 = y;
  for (auto& v : x10.data) v *= 10;
  for (auto& v : y10.data) v *= 10;
  EXPECT_NEAR(alignment(x, y), alignment(x10, y10), 1e-12);
  EXPECT_THROW(uniformity(Tensor<double>::matrix(1, 2, {1, 0})), InvalidArgument);
  EXPECT_THROW(alignment(Tensor<double>({0, 2}), Tensor<double>({0, 2})), InvalidArgument);
}

TEST(AlignmentUniformity, SpreadingImprovesUniformity) {
  // 20 points in one tight cluster vs split into two antipodal clusters.
  Rng rng(3);
  Tensor<double> one({20, 3}), two({20, 3});
  for (std::size_t i = 0; i < 20; ++i) {
    const double sign = i % 2 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < 3; ++j) {
      const double noise = 0.01 * rng.normal();
      one.at(i, j) = (j == 0 ? 1.0 : 0.0) + noise;
      two.at(i, j) = (j == 0 ? sign : 0.0) + noise;
    }
  }
  EXPECT_LT(uniformity(two), uniformity(one));
}

TEST(NormStats, PopulationStatistics) {
  auto x = Tensor<double>::matrix(2, 2, {3, 4, 0, 1});
  auto s = norm_stats(x);
  EXPECT_DOUBLE_EQ(s.mean, 3.0);
  EXPECT_DOUBLE_EQ(s.std, 2.0);
  EXPECT_DOUBLE_EQ(s.cv, 2.0 / 3.0);
}

TEST(NormProbe, OneRowPerStripCount) {
  auto e = tiny().encoder();
  const auto s = probe_sentences(tiny().ds.corpus, 100, 1);
  ASSERT_EQ(s.size(), 100u);
  auto rows = norm_probe(e, tiny().vocab, s, {0, 2, 1});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2].stripped, 1u);
  for (const auto& r : rows) {
    EXPECT_GE(r.last_hidden.mean, 0.0);
    EXPECT_GE(r.pooler.std, 0.0);
  }
  const auto csv = probe_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_THROW(norm_probe(e, tiny().vocab, sentences(50), {0}), InvalidArgument);
}

}  // namespace
}  // namespace tncse
