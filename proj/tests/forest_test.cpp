#include "cast/forest.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "test_util.hpp"

namespace cast {
namespace {

using testing::EffectDesign;

EstimationConfig fast_config(std::uint64_t seed) {
  EstimationConfig cfg;
  cfg.seed = seed;
  cfg.forest.trees = 100;
  cfg.tune = false;
  cfg.nuisance.trees = 60;
  return cfg;
}

SurvivalCohort four_subjects(std::vector<double> times, std::vector<int> events, std::vector<int> arms) {
  SurvivalCohort c;
  c.schema.push("x", ColumnKind::Continuous, "x", "");
  for (std::size_t i = 0; i < times.size(); ++i) {
    SubjectRecord s;
    s.id = std::to_string(i);
    s.covariates = {static_cast<double>(i)};
    s.time_months = times[i];
    s.event = events[i];
    s.treatment = arms[i];
    c.subjects.push_back(s);
  }
  return c;
}

TEST(PseudoOutcomes, HandAipwArithmetic) {
  // Y = (1, 0, 1, 0) at h = 12 with W = (1, 1, 0, 0); no censoring.
  const auto c = four_subjects({20, 5, 20, 5}, {1, 1, 1, 1}, {1, 1, 0, 0});
  const auto curves = censoring_survival(c, CensoringConditioning::ByTreatment);
  const std::vector<double> e(4, 0.5), zero(4, 0.0);
  const auto pso = pseudo_outcomes(c, e, 12.0, Estimand::SP, curves, zero, zero);
  EXPECT_EQ(pso.gamma, (std::vector<double>{2, 0, -2, 0}));
  EXPECT_EQ(aipw_mean_se(pso).first, 0.0);
}

TEST(PseudoOutcomes, ZeroResidualGivesRegressionContrast) {
  const auto c = four_subjects({20, 20, 5, 5}, {1, 1, 1, 1}, {1, 1, 0, 0});
  const auto curves = censoring_survival(c, CensoringConditioning::ByTreatment);
  const std::vector<double> e(4, 0.3), m0(4, 0.0), m1(4, 1.0);
  const auto pso = pseudo_outcomes(c, e, 12.0, Estimand::SP, curves, m0, m1);
  for (double g : pso.gamma) EXPECT_EQ(g, 1.0);
}

TEST(PseudoOutcomes, CensoredBeforeHorizonFallsBackToRegression) {
  const auto c = four_subjects({10, 20, 30, 5}, {0, 1, 1, 1}, {1, 1, 0, 0});
  const auto curves = censoring_survival(c, CensoringConditioning::ByTreatment);
  const std::vector<double> e(4, 0.5), m0{0.1, 0.2, 0.3, 0.4}, m1{0.5, 0.6, 0.7, 0.8};
  const auto pso = pseudo_outcomes(c, e, 12.0, Estimand::SP, curves, m0, m1);
  EXPECT_FALSE(pso.observable[0]);
  EXPECT_TRUE(pso.valid[0]);
  EXPECT_EQ(pso.gamma[0], 0.5 - 0.1);
}

TEST(PseudoOutcomes, RmstOutcomeAndFloorExclusion) {
  const auto c = four_subjects({2, 3, 4, 8}, {0, 1, 1, 1}, {1, 0, 1, 0});
  StepFunction k;
  k.times = {5.0};
  k.values = {0.04};
  const std::vector<double> e(4, 0.5), z(4, 0.0);
  const auto pso = pseudo_outcomes(c, e, 6.0, Estimand::RMST, {k}, z, z);
  EXPECT_EQ(pso.outcome[0], 2.0);
  EXPECT_EQ(pso.outcome[3], 6.0);
  EXPECT_EQ(pso.n_below_floor, 1u);
  EXPECT_FALSE(pso.valid[3]);
  EXPECT_EQ(pso.n_valid, 3u);
  EXPECT_EQ(pso.gamma[1], -2.0 * 3.0);
}

TEST(PseudoOutcomes, Errors) {
  const auto c = four_subjects({20, 5, 20, 5}, {1, 1, 1, 1}, {1, 1, 1, 1});
  const auto curves = censoring_survival(c, CensoringConditioning::None);
  const std::vector<double> e(4, 0.5), z(4, 0.0);
  try {
    pseudo_outcomes(c, e, 12.0, Estimand::SP, curves, z, z);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::DegenerateArm);
  }
  // Every subject observable (T >= h) but the censoring curve is zero.
  const auto d = four_subjects({2, 3, 4, 5}, {0, 0, 0, 1}, {1, 0, 1, 0});
  StepFunction dead;
  dead.times = {1.0};
  dead.values = {0.0};
  try {
    pseudo_outcomes(d, e, 1.5, Estimand::SP, {dead}, z, z);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::NoValidSubjects);
  }
}

// With scores in [e_min, e_max], K_c >= floor and nuisances in [0, 1],
// |Gamma| <= 1 + max(1/e_min, 1/(1 - e_max)) / floor on the SP scale.
TEST(PseudoOutcomes, BoundedAfterTrimmingAndFloor) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = testing::effect_cohort(800, seed, {0.03, 0.75, 0.8, 0.02});
    std::vector<double> e(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) e[i] = std::clamp(testing::true_propensity(c.subjects[i], {0.03, 0.75, 0.8, 0.02}), 0.1, 0.9);
    const auto curves = censoring_survival(c, CensoringConditioning::ByTreatment);
    auto rng = detail::make_engine(seed, detail::Stream::Synth);
    std::vector<double> m0(c.size()), m1(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      m0[i] = detail::uniform01(rng);
      m1[i] = detail::uniform01(rng);
    }
    for (double h : {12.0, 60.0, 120.0}) {
      const auto pso = pseudo_outcomes(c, e, h, Estimand::SP, curves, m0, m1);
      const double bound = 1.0 + std::max(1.0 / 0.1, 1.0 / (1.0 - 0.9)) / 0.05;
      for (double g : pso.valid_gamma()) EXPECT_LE(std::abs(g), bound);
      EXPECT_TRUE(std::isfinite(aipw_mean_se(pso).first));
    }
  }
}

Eigen::MatrixXd normal_matrix(std::size_t n, std::size_t p, std::uint64_t seed) {
  auto rng = detail::make_engine(seed, detail::Stream::Synth, 11);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = detail::standard_normal(rng);
  return x;
}

TEST(RegressionForest, ConstantTargetPredictsConstantExactly) {
  const auto x = normal_matrix(300, 4, 1);
  const std::vector<double> y(300, 0.1);
  ForestParams p;
  p.trees = 200;
  p.seed = 3;
  const auto f = RegressionForest::fit(x, y, p);
  const auto pred = f.predict(normal_matrix(50, 4, 2));
  for (std::size_t i = 0; i < pred.mean.size(); ++i) {
    EXPECT_EQ(pred.mean[i], 0.1);
    EXPECT_LE(pred.variance[i], 1e-10);
  }
}

TEST(RegressionForest, UnsplittableTreesConvergeToOverallMean) {
  const auto x = normal_matrix(200, 2, 4);
  std::vector<double> y(200);
  auto rng = detail::make_engine(4, detail::Stream::Synth);
  for (auto& v : y) v = detail::standard_normal(rng);
  ForestParams p;
  p.trees = 3000;
  p.min_node = 50;  // structure half of 50 rows cannot split
  p.seed = 1;
  const auto f = RegressionForest::fit(x, y, p);
  for (const auto& t : f.trees()) EXPECT_EQ(t.nodes.size(), 1u);
  double mean = 0;
  for (double v : y) mean += v;
  mean /= 200.0;
  for (double v : f.predict_mean(normal_matrix(10, 2, 5))) EXPECT_NEAR(v, mean, 0.02);
}

TEST(RegressionForest, RecoversStepFunction) {
  const auto x = normal_matrix(2000, 5, 6);
  std::vector<double> y(2000);
  for (Eigen::Index i = 0; i < x.rows(); ++i) y[static_cast<std::size_t>(i)] = x(i, 0) > 0 ? 1.0 : -1.0;
  ForestParams p;
  p.trees = 500;
  p.seed = 2;
  const auto f = RegressionForest::fit(x, y, p);
  const auto xt = normal_matrix(1000, 5, 7);
  const auto pred = f.predict_mean(xt);
  double mae = 0;
  for (Eigen::Index i = 0; i < xt.rows(); ++i)
    mae += std::abs(pred[static_cast<std::size_t>(i)] - (xt(i, 0) > 0 ? 1.0 : -1.0));
  EXPECT_LT(mae / 1000.0, 0.15);
  const auto imp = f.importance();
  EXPECT_NEAR(std::accumulate(imp.begin(), imp.end(), 0.0), 1.0, 1e-12);
  EXPECT_EQ(std::max_element(imp.begin(), imp.end()) - imp.begin(), 0);
}

TEST(RegressionForest, LeavesHoldAtLeastMinNodeEstimationSamples) {
  const auto x = normal_matrix(600, 3, 8);
  std::vector<double> y(600);
  for (Eigen::Index i = 0; i < x.rows(); ++i) y[static_cast<std::size_t>(i)] = x(i, 0) * x(i, 1);
  for (std::size_t mn : {1u, 5u, 15u}) {
    ForestParams p;
    p.trees = 40;
    p.min_node = mn;
    p.seed = 9;
    const auto f = RegressionForest::fit(x, y, p);
    for (const auto& t : f.trees())
      for (const auto& n : t.nodes)
        if (n.feature < 0) EXPECT_GE(n.count, mn);
  }
}

TEST(RegressionForest, DuplicatingTreesLeavesPredictionUnchanged) {
  const auto x = normal_matrix(400, 3, 10);
  std::vector<double> y(400);
  for (Eigen::Index i = 0; i < x.rows(); ++i) y[static_cast<std::size_t>(i)] = std::sin(x(i, 0)) + x(i, 2);
  ForestParams p;
  p.trees = 100;
  p.seed = 5;
  auto f = RegressionForest::fit(x, y, p);
  const auto xt = normal_matrix(30, 3, 11);
  const auto before = f.predict_mean(xt);
  auto& trees = f.mutable_trees();
  const auto copy = trees;
  trees.insert(trees.end(), copy.begin(), copy.end());
  const auto after = f.predict_mean(xt);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before[i], after[i], 1e-12);
}

TEST(RegressionForest, DeterministicAcrossThreadCounts) {
  const auto x = normal_matrix(500, 4, 12);
  std::vector<double> y(500);
  for (Eigen::Index i = 0; i < x.rows(); ++i) y[static_cast<std::size_t>(i)] = x(i, 1) + 0.3 * x(i, 3);
  ForestParams p;
  p.trees = 60;
  p.seed = 77;
  const auto a = RegressionForest::fit(x, y, p).predict(x);
  p.threads = 4;
  const auto b = RegressionForest::fit(x, y, p).predict(x, 3);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.variance, b.variance);
  p.seed = 78;
  EXPECT_NE(RegressionForest::fit(x, y, p).predict_mean(x), a.mean);
}

TEST(RegressionForest, VarianceEstimateSettlesWithMoreTrees) {
  const auto x = normal_matrix(500, 3, 13);
  std::vector<double> y(500);
  auto rng = detail::make_engine(13, detail::Stream::Synth);
  for (auto& v : y) v = detail::standard_normal(rng);
  const auto xt = normal_matrix(40, 3, 14);
  auto mean_var = [&](std::size_t trees) {
    ForestParams p;
    p.trees = trees;
    p.seed = 21;
    const auto v = RegressionForest::fit(x, y, p).predict(xt).variance;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  const double v500 = mean_var(500), v5000 = mean_var(5000);
  EXPECT_LT(v5000, v500);
  EXPECT_GE(v5000, 0.0);
}

TEST(RegressionForest, Errors) {
  const auto x = normal_matrix(30, 2, 1);
  const std::vector<double> y(30, 0.0);
  ForestParams p;
  p.min_node = 10;
  try {
    RegressionForest::fit(x, y, p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooSmall);
  }
  p.min_node = 5;
  p.trees = 20;
  const auto f = RegressionForest::fit(x, y, p);
  try {
    f.predict(normal_matrix(3, 3, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
  }
}

TEST(RegressionForest, TuningPicksFromGrid) {
  const auto x = normal_matrix(600, 3, 15);
  std::vector<double> y(600);
  auto rng = detail::make_engine(15, detail::Stream::Synth);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    y[static_cast<std::size_t>(i)] = x(i, 0) + detail::standard_normal(rng);
  ForestParams p;
  p.seed = 4;
  TuningGrid grid;
  grid.trees = 60;
  const auto t = tune_forest(x, y, p, grid);
  EXPECT_EQ(t.candidate_mse.size(), 6u);
  EXPECT_EQ(t.oob_mse, *std::min_element(t.candidate_mse.begin(), t.candidate_mse.end()));
  EXPECT_TRUE(t.min_node == 5 || t.min_node == 15 || t.min_node == 30);
}

TEST(EstimateHorizon, AipwMeanAndSeIdentities) {
  const auto c = testing::effect_cohort(600, 1);
  const std::vector<double> e(c.size(), 0.5);
  const auto est = estimate_horizon(c, e, 36.0, Estimand::SP, fast_config(1));
  const auto g = est.pseudo.valid_gamma();
  double s = 0;
  for (double v : g) s += v;
  const double mean = s / static_cast<double>(g.size());
  double ss = 0;
  for (double v : g) ss += (v - mean) * (v - mean);
  EXPECT_NEAR(est.ate, mean, 1e-12);
  EXPECT_NEAR(est.ate_se, std::sqrt(ss / static_cast<double>(g.size() - 1)) / std::sqrt(static_cast<double>(g.size())),
              1e-12);
  EXPECT_EQ(est.cate.size(), c.size());
  for (double v : est.cate_var) EXPECT_GE(v, 0.0);
}

TEST(EstimateHorizon, RandomizedCohortRecoversTruth) {
  const auto c = testing::effect_cohort(4000, 2);
  const std::vector<double> e(c.size(), 0.5);
  const double truth = testing::true_sp_effect(36.0);
  EXPECT_NEAR(truth, 0.10, 5e-4);
  const auto est = estimate_horizon(c, e, 36.0, Estimand::SP, fast_config(2));
  EXPECT_LT(std::abs(est.ate - truth), 2 * est.ate_se) << est.ate << " +- " << est.ate_se;
}

TEST(EstimateHorizon, NullCohortIsCalibrated) {
  EffectDesign null;
  null.hazard_ratio = 1.0;
  int covered = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto c = testing::effect_cohort(800, 100 + seed, null);
    const std::vector<double> e(c.size(), 0.5);
    const auto est = estimate_horizon(c, e, 36.0, Estimand::SP, fast_config(seed));
    covered += std::abs(est.ate) < 2 * est.ate_se;
  }
  EXPECT_GE(covered, 18);
}

TEST(EstimateHorizon, DoublyRobustToOneCorruptedNuisance) {
  EffectDesign d;
  d.confounding = 0.8;
  const auto c = testing::effect_cohort(4000, 3, d);
  std::vector<double> e(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) e[i] = std::clamp(testing::true_propensity(c.subjects[i], d), 0.1, 0.9);
  const auto cfg = fast_config(3);
  const auto curves = censoring_survival(c, cfg.conditioning);
  const auto nuis = cross_fit_outcomes(c, 36.0, Estimand::SP, curves, cfg, 3);
  const auto good = pseudo_outcomes(c, e, 36.0, Estimand::SP, curves, nuis.m0, nuis.m1);
  const auto [ate, se] = aipw_mean_se(good);

  std::vector<double> bad_m0(c.size(), 0.9), bad_m1(c.size(), 0.2);
  const auto bad_m = aipw_mean_se(pseudo_outcomes(c, e, 36.0, Estimand::SP, curves, bad_m0, bad_m1));
  EXPECT_LT(std::abs(bad_m.first - ate), 2 * se);

  const std::vector<double> bad_e(c.size(), 0.5);
  const auto bad_p = aipw_mean_se(pseudo_outcomes(c, bad_e, 36.0, Estimand::SP, curves, nuis.m0, nuis.m1));
  EXPECT_LT(std::abs(bad_p.first - ate), 2 * se);
}

TEST(EstimateHorizon, StandardErrorGrowsWithHorizon) {
  const auto c = testing::effect_cohort(2000, 4);
  const std::vector<double> e(c.size(), 0.5);
  HorizonSpec spec;
  spec.horizons = {12, 120};
  const auto est = estimate_horizons(c, e, spec, fast_config(4));
  EXPECT_GE(est[1].ate_se, est[0].ate_se);
}

TEST(EstimateHorizon, ErrorShrinksWithSampleSize) {
  const double truth = testing::true_sp_effect(36.0);
  std::vector<double> small, large;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (std::size_t n : {500u, 8000u}) {
      const auto c = testing::effect_cohort(n, 1000 * seed + n);
      const std::vector<double> e(c.size(), 0.5);
      auto cfg = fast_config(seed);
      cfg.forest.trees = 20;
      const auto est = estimate_horizon(c, e, 36.0, Estimand::SP, cfg);
      (n == 500 ? small : large).push_back(std::abs(est.ate - truth));
    }
  }
  std::sort(small.begin(), small.end());
  std::sort(large.begin(), large.end());
  EXPECT_LT(large[5], small[5]);
}

TEST(EstimateHorizon, SweepIsDeterministicAcrossThreads) {
  const auto c = testing::effect_cohort(500, 5);
  const std::vector<double> e(c.size(), 0.5);
  HorizonSpec spec;
  spec.horizons = {24, 48};
  auto cfg = fast_config(9);
  cfg.tune = true;
  cfg.tuning.trees = 20;
  const auto a = estimate_horizons(c, e, spec, cfg);
  cfg.threads = 3;
  const auto b = estimate_horizons(c, e, spec, cfg);
  EXPECT_EQ(horizon_sweep_csv(a), horizon_sweep_csv(b));
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].cate, b[k].cate);
    EXPECT_EQ(cate_csv(a[k], c), cate_csv(b[k], c));
  }
}

TEST(HorizonOutput, TableRowShape) {
  HorizonEstimate sp, rmst;
  sp.horizon = rmst.horizon = 12;
  sp.ate = 0.063;
  sp.ate_se = 0.021;
  rmst.estimand = Estimand::RMST;
  rmst.ate = 0.41;
  rmst.ate_se = 0.12;
  EXPECT_EQ(effect_table_csv({sp}, {rmst}), "horizon,ate_sp,se_sp,ate_rmst,se_rmst\n12,0.063,0.021,0.41,0.12\n");
  EXPECT_EQ(horizon_sweep_csv({sp}), "horizon,estimand,ate,se,n_valid,n_trimmed\n12,sp,0.063,0.021,0,0\n");
}

TEST(HorizonSpec, Parsing) {
  EXPECT_EQ(HorizonSpec::parse_list("12:120:12"), HorizonSpec{}.horizons);
  EXPECT_EQ(HorizonSpec::parse_list("6,18"), (std::vector<double>{6, 18}));
  EXPECT_THROW(HorizonSpec::parse_list("18,6"), Error);
  EXPECT_THROW(HorizonSpec::parse_list("1:x:2"), Error);
  EXPECT_EQ(parse_estimand("rmst"), Estimand::RMST);
  EXPECT_THROW(parse_estimand("hr"), Error);
}

}  // namespace
}  // namespace cast
