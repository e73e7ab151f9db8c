#include <cmath>

#include "test_util.hpp"

namespace tncse {
namespace {

using test::random_matrix;

double info_nce_value(const Tensor<double>& h, const Tensor<double>& hp, double tau = 0.05) {
  Tape<double> tape;
  return info_nce(tape.constant(h), tape.constant(hp), tau).item();
}

// Independent scalar evaluation of the modulated term for one row pair.
double modulated_oracle(const std::vector<double>& p, const std::vector<double>& q, double sim, double eps) {
  const double s = std::clamp(sim, eps, 1.0);
  return -std::log(s) * l_tn<double>(p, q);
}

std::vector<double> row(const Tensor<double>& t, std::size_t r) {
  return {t.data.begin() + static_cast<std::ptrdiff_t>(r * t.cols()),
          t.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * t.cols())};
}

TEST(LTn, Examples) {
  std::vector<double> h{0.3, -1.2, 2.0}, neg{-0.3, 1.2, -2.0};
  EXPECT_EQ(l_tn<double>(h, h), 0.0);
  EXPECT_NEAR(l_tn<double>(h, neg), 1.0, 1e-15);
  std::vector<double> a{3, 0}, b{0, 4};
  EXPECT_NEAR(l_tn<double>(a, b), 5.0 / 7.0, 1e-12);
}

TEST(LTn, RejectsZeroNorm) {
  std::vector<double> h{1, 2}, z{0, 0};
  EXPECT_THROW(l_tn<double>(h, z), InvalidArgument);
}

TEST(LTnKt, Examples) {
  EXPECT_EQ(l_tn_kt(1, 1), 0.0);
  EXPECT_NEAR(l_tn_kt(1, -1), 1.0, 1e-15);
  EXPECT_NEAR(l_tn_kt(2, 0), std::sqrt(5.0) / 3.0, 1e-12);
  EXPECT_THROW(l_tn_kt(0, 0.5), InvalidArgument);
  EXPECT_THROW(l_tn_kt(1, 1.5), InvalidArgument);
}

TEST(LTnKt, MinimumOnlyAtOneOne) {
  for (int ki = 1; ki <= 16; ++ki)
    for (int ti = -10; ti <= 10; ++ti) {
      const double k = 0.25 * ki, t = 0.1 * ti;
      const double v = l_tn_kt(k, std::clamp(t, -1.0, 1.0));
      EXPECT_GE(v, 0.0);
      if (ki == 4 && ti == 10) EXPECT_LE(v, 1e-12);
      else EXPECT_GT(v, 0.0) << k << "," << t;
    }
}

TEST(LTnKt, StrictlyDecreasingInCosineAtUnitRatio) {
  double prev = l_tn_kt(1, -1);
  for (int i = -99; i <= 100; ++i) {
    const double v = l_tn_kt(1, i / 100.0);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(LTnKt, PenalizesMagnitudeMismatchAtFixedDirection) {
  for (double k : {0.1, 0.5, 0.9, 0.999, 1.001, 1.5, 3.0, 10.0}) EXPECT_GT(l_tn_kt(k, 1.0), 0.0) << k;
}

TEST(LTn, MatchesNormRatioCosineForm) {
  Rng rng(21);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t d = 2 + rng.below(10);
    std::vector<double> h(d), hp(d);
    for (auto& v : h) v = rng.normal();
    for (auto& v : hp) v = rng.normal() * (0.1 + 3 * rng.uniform());
    const double k = l2_norm<double>(hp) / l2_norm<double>(h);
    const double direct = l_tn<double>(h, hp), via = l_tn_kt(k, cosine_sim<double>(h, hp));
    EXPECT_NEAR(direct, via, 1e-12 * std::max(1.0, direct));
    EXPECT_GE(direct, 0.0);
    EXPECT_LE(direct, 1.0);
  }
}

TEST(InfoNce, ClosedForms) {
  EXPECT_EQ(info_nce_value(Tensor<double>::matrix(1, 3, {1, 2, 3}), Tensor<double>::matrix(1, 3, {-2, 0, 1})), 0.0);
  auto same = Tensor<double>::matrix(2, 2, {1, 1, 1, 1});
  EXPECT_NEAR(info_nce_value(same, same), std::log(2.0), 1e-9);
  auto ortho = Tensor<double>::matrix(2, 2, {1, 0, 0, 1});
  EXPECT_NEAR(info_nce_value(ortho, ortho), std::log1p(std::exp(-20.0)), 1e-9);
}

TEST(InfoNce, RejectsZeroRow) {
  EXPECT_THROW(info_nce_value(Tensor<double>::matrix(2, 2, {0, 0, 1, 0}), Tensor<double>::matrix(2, 2, {1, 0, 1, 0})),
               InvalidArgument);
}

TEST(InfoNce, DecreasesAsPositiveCosineRises) {
  // Anchor (1,0); negative positive-row fixed; the positive rotates toward
  // the anchor.
  double prev = std::numeric_limits<double>::infinity();
  for (double angle = 1.5; angle >= 0.0; angle -= 0.1) {
    auto h = Tensor<double>::matrix(2, 2, {1, 0, 0.3, 1});
    auto hp = Tensor<double>::matrix(2, 2, {std::cos(angle), std::sin(angle), 0.3, 1});
    const double v = info_nce_value(h, hp);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Icnce, Examples) {
  auto one = Tensor<double>::matrix(1, 3, {0.2, 0.5, -1});
  EXPECT_EQ(info_nce_value(one, one), 0.0);
  auto ortho = Tensor<double>::matrix(2, 2, {1, 0, 0, 1});
  Tape<double> tape;
  EXPECT_NEAR(icnce(tape.constant(ortho), tape.constant(ortho), 0.05).item(), std::log1p(std::exp(-20.0)), 1e-9);
  auto a = random_matrix(5, 4, 1), b = random_matrix(5, 4, 2);
  Tape<double> t2;
  EXPECT_EQ(icnce(t2.constant(a), t2.constant(b), 0.05).item(), info_nce(t2.constant(a), t2.constant(b), 0.05).item());
}

TEST(LTnModulated, Examples) {
  LossConfig cfg;
  Tape<double> tape;
  auto p = tape.constant(1, 2, {3, 0}), q = tape.constant(1, 2, {0, 4});
  EXPECT_EQ(l_tn_modulated(p, q, tape.constant(1, 1, {1.0}), cfg).item(), 0.0);
  EXPECT_NEAR(l_tn_modulated(p, q, tape.constant(1, 1, {std::exp(-1.0)}), cfg).item(), 5.0 / 7.0, 1e-12);
  for (double sim : {0.0, -0.5, -1.0}) {
    const double v = l_tn_modulated(p, q, tape.constant(1, 1, {sim}), cfg).item();
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, -std::log(cfg.sim_clamp_eps) * 5.0 / 7.0, 1e-12);
  }
  EXPECT_THROW(l_tn_modulated(tape.constant(1, 2, {0, 0}), q, tape.constant(1, 1, {0.5}), cfg), InvalidArgument);
}

TEST(LTnModulated, IsPerSampleThenAveraged) {
  LossConfig cfg;
  auto p = random_matrix(6, 5, 3), q = random_matrix(6, 5, 4), hl1 = random_matrix(6, 5, 5), hl2 = random_matrix(6, 5, 6);
  Tape<double> tape;
  const double v =
      l_tn_modulated(tape.constant(p), tape.constant(q), tape.constant(hl1), tape.constant(hl2), cfg).item();
  double oracle = 0;
  for (std::size_t r = 0; r < 6; ++r)
    oracle += modulated_oracle(row(p, r), row(q, r), cosine_sim<double>(row(hl1, r), row(hl2, r)), cfg.sim_clamp_eps);
  EXPECT_NEAR(v, oracle / 6, 1e-12 * std::abs(oracle));
}

struct Bundle {
  Tensor<double> hl[4], hp[4];  // I, I+, II, II+

  ViewBundle<double> bind(Tape<double>& t) const {
    ViewBundle<double> v;
    EncoderVars<double>* slots[4] = {&v.enc_I, &v.enc_I_plus, &v.enc_II, &v.enc_II_plus};
    for (int i = 0; i < 4; ++i) *slots[i] = {t.constant(hl[i]), t.constant(hp[i])};
    return v;
  }

  Bundle swapped() const {
    Bundle b;
    const int order[4] = {2, 3, 0, 1};
    for (int i = 0; i < 4; ++i) {
      b.hl[i] = hl[order[i]];
      b.hp[i] = hp[order[i]];
    }
    return b;
  }
};

Bundle random_bundle(std::uint64_t seed, std::size_t n = 5, std::size_t d = 6) {
  Bundle b;
  for (int i = 0; i < 4; ++i) {
    b.hl[i] = random_matrix(n, d, derive_seed({seed, std::uint64_t(i)}));
    b.hp[i] = random_matrix(n, d, derive_seed({seed, std::uint64_t(i), 9}));
  }
  // Correlate the cross-encoder views so most cosines are positive.
  for (std::size_t k = 0; k < b.hl[0].data.size(); ++k) b.hl[2].data[k] = b.hl[0].data[k] + 0.5 * b.hl[2].data[k];
  return b;
}

TEST(Ictn, VanishesForEqualPoolersAndAlignedViews) {
  Bundle b = random_bundle(1);
  b.hl[2] = b.hl[0];
  for (int i = 1; i < 4; ++i) b.hp[i] = b.hp[0];
  Tape<double> t;
  EXPECT_EQ(ictn(b.bind(t), LossConfig{}).item(), 0.0);
}

TEST(Ictn, SymmetricUnderEncoderSwap) {
  const Bundle b = random_bundle(2);
  Tape<double> t;
  const double v = ictn(b.bind(t), LossConfig{}).item();
  const double w = ictn(b.swapped().bind(t), LossConfig{}).item();
  EXPECT_NEAR(v, w, 1e-14 * std::abs(v));
}

TEST(Ictn, EqualsSumOfIndependentModulatedTerms) {
  LossConfig cfg;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Bundle b = random_bundle(100 + s);
    Tape<double> t;
    const double v = ictn(b.bind(t), cfg).item();
    double oracle = 0;
    for (std::size_t r = 0; r < b.hl[0].rows(); ++r) {
      const double sim = cosine_sim<double>(row(b.hl[0], r), row(b.hl[2], r));
      oracle += modulated_oracle(row(b.hp[0], r), row(b.hp[3], r), sim, cfg.sim_clamp_eps);
      oracle += modulated_oracle(row(b.hp[2], r), row(b.hp[1], r), sim, cfg.sim_clamp_eps);
    }
    oracle /= static_cast<double>(b.hl[0].rows());
    EXPECT_NEAR(v, oracle, 1e-12 * std::abs(oracle));
  }
}

TEST(Ictn, AverageModulationUsesBothViews) {
  LossConfig a, b;
  b.modulation = ModulationViews::view_average;
  const Bundle x = random_bundle(3);
  Tape<double> t;
  EXPECT_NE(ictn(x.bind(t), a).item(), ictn(x.bind(t), b).item());
}

TEST(TotalLoss, NceOnlyBatchOneIsZero) {
  Bundle b = random_bundle(4, 1);
  LossConfig cfg;
  cfg.enabled = TermSet(TermSet::nce);
  Tape<double> t;
  auto l = total_loss(b.bind(t), cfg);
  EXPECT_EQ(l.total, 0.0);
  EXPECT_FALSE(l.l_icnce.has_value());
  EXPECT_FALSE(l.l_ictn.has_value());
}

TEST(TotalLoss, EqualsSumOfSubCalls) {
  LossConfig cfg;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Bundle b = random_bundle(200 + s);
    Tape<double> t;
    auto v = b.bind(t);
    const double total = total_loss(v, cfg).total;
    Tape<double> u;
    auto w = b.bind(u);
    const double a = info_nce(w.enc_I.last_hidden, w.enc_I_plus.last_hidden, 0.05).item();
    const double c = info_nce(w.enc_II.last_hidden, w.enc_II_plus.last_hidden, 0.05).item();
    const double d = icnce(w.enc_I.last_hidden, w.enc_II.last_hidden, 0.05).item();
    const double e = ictn(w, cfg).item();
    EXPECT_NEAR(total, a + c + d + e, 1e-12 * std::abs(total));
  }
}

TEST(TotalLoss, ReportsOnlyEnabledTerms) {
  const Bundle b = random_bundle(5);
  for (auto terms : TermSet::non_empty_subsets()) {
    LossConfig cfg;
    cfg.enabled = terms;
    Tape<double> t;
    auto l = total_loss(b.bind(t), cfg);
    EXPECT_EQ(l.l_nce_I.has_value(), terms.has(TermSet::nce));
    EXPECT_EQ(l.l_nce_II.has_value(), terms.has(TermSet::nce));
    EXPECT_EQ(l.l_icnce.has_value(), terms.has(TermSet::icnce));
    EXPECT_EQ(l.l_ictn.has_value(), terms.has(TermSet::ictn));
    const double sum = l.l_nce_I.value_or(0) + l.l_nce_II.value_or(0) + l.l_icnce.value_or(0) + l.l_ictn.value_or(0);
    EXPECT_NEAR(l.total, sum, 1e-12 * std::max(1.0, std::abs(sum)));
    EXPECT_TRUE(l.finite());
  }
}

TEST(TotalLoss, RejectsEmptyTermSet) {
  const Bundle b = random_bundle(6);
  LossConfig cfg;
  cfg.enabled = TermSet();
  Tape<double> t;
  EXPECT_THROW(total_loss(b.bind(t), cfg), InvalidArgument);
}

TEST(TermSet, SevenNonEmptySubsets) {
  auto subsets = TermSet::non_empty_subsets();
  ASSERT_EQ(subsets.size(), 7u);
  std::set<unsigned> bits;
  for (auto s : subsets) bits.insert(s.bits());
  EXPECT_EQ(bits.size(), 7u);
  EXPECT_EQ(TermSet::parse("ictn+nce"), TermSet(TermSet::nce | TermSet::ictn));
  EXPECT_THROW(TermSet::parse("nce+foo"), InvalidArgument);
}

TEST(LossConfig, Validation) {
  LossConfig c;
  c.tau = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.sim_clamp_eps = 1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(LossGradients, AwayFromSingularities) {
  for (const auto& e : run_grad_suite(3, 99)) {
    if (e.name.rfind("loss.", 0) != 0) continue;
    EXPECT_TRUE(e.passed) << e.name << " " << e.max_error;
  }
}

}  // namespace
}  // namespace tncse
