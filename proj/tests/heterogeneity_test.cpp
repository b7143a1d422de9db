#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cast/heterogeneity.hpp"

namespace cast {
namespace {

Eigen::MatrixXd gaussian_matrix(Eigen::Index n, Eigen::Index p, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0, 1);
  Eigen::MatrixXd x(n, p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) x(i, j) = z(rng);
  return x;
}

BatchPredictor rowwise(std::function<double(const Eigen::RowVectorXd&)> f) {
  return [f](const Eigen::MatrixXd& x) {
    std::vector<double> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) out[static_cast<std::size_t>(i)] = f(x.row(i));
    return out;
  };
}

std::vector<std::string> names(Eigen::Index p) {
  std::vector<std::string> out;
  for (Eigen::Index j = 0; j < p; ++j) out.push_back("x" + std::to_string(j + 1));
  return out;
}

Eigen::MatrixXd centered_background(Eigen::Index n, Eigen::Index p, unsigned seed) {
  Eigen::MatrixXd b = gaussian_matrix(n, p, seed);
  b.rowwise() -= b.colwise().mean();
  return b;
}

TEST(Shap, AdditiveModelIsExact) {
  const auto bg = centered_background(100, 4, 1);
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(1, 4);
  x(0, 0) = 1;
  x(0, 2) = 0.7;
  const auto shap = shap_monte_carlo(rowwise([](const auto& r) { return r[0]; }), x, bg, names(4));
  EXPECT_NEAR(shap.baseline, 0.0, 1e-12);
  EXPECT_NEAR(shap.values(0, 0), 1.0, 0.01);
  for (int j = 1; j < 4; ++j) EXPECT_NEAR(shap.values(0, j), 0.0, 0.01);
}

TEST(Shap, LinearModelMatchesClosedForm) {
  const auto bg = gaussian_matrix(100, 3, 2);
  const Eigen::Vector3d beta(0.5, -2.0, 1.0);
  const auto x = gaussian_matrix(20, 3, 3);
  const auto shap = shap_monte_carlo(rowwise([&](const auto& r) { return r.dot(beta.transpose()); }), x, bg, names(3));
  const Eigen::RowVectorXd mu = bg.colwise().mean();
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < 3; ++j) EXPECT_NEAR(shap.values(i, j), beta[j] * (x(i, j) - mu[j]), 0.01);
}

TEST(Shap, ConstantModel) {
  const auto bg = gaussian_matrix(50, 3, 4);
  const auto x = gaussian_matrix(5, 3, 5);
  const auto shap = shap_monte_carlo(rowwise([](const auto&) { return 2.5; }), x, bg, names(3));
  EXPECT_EQ(shap.baseline, 2.5);
  EXPECT_EQ(shap.values.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_TRUE(shap.all_converged());
}

TEST(Shap, ProductModelIsSymmetric) {
  const Eigen::MatrixXd bg = Eigen::MatrixXd::Zero(10, 2);
  const Eigen::MatrixXd x = Eigen::MatrixXd::Ones(1, 2);
  const auto shap = shap_monte_carlo(rowwise([](const auto& r) { return r[0] * r[1]; }), x, bg, names(2));
  EXPECT_NEAR(shap.values(0, 0), 0.5, 0.01);
  EXPECT_NEAR(shap.values(0, 1), 0.5, 0.01);
  EXPECT_NEAR(shap.values(0, 0), shap.values(0, 1), 0.02);
}

TEST(Shap, IdenticalFeaturesAgree) {
  Eigen::MatrixXd bg = gaussian_matrix(100, 3, 6);
  bg.col(1) = bg.col(0);
  Eigen::MatrixXd x = gaussian_matrix(10, 3, 7);
  x.col(1) = x.col(0);
  const auto f = rowwise([](const auto& r) { return std::tanh(r[0] + r[1]) + 0.3 * r[2]; });
  const auto shap = shap_monte_carlo(f, x, bg, names(3));
  for (Eigen::Index i = 0; i < x.rows(); ++i) EXPECT_NEAR(shap.values(i, 0), shap.values(i, 1), 0.02);
}

TEST(Shap, IgnoredFeatureGetsNothing) {
  const auto bg = gaussian_matrix(100, 4, 8);
  const auto x = gaussian_matrix(15, 4, 9);
  const auto f = rowwise([](const auto& r) { return r[0] * r[1] + std::sin(r[2]); });
  const auto shap = shap_monte_carlo(f, x, bg, names(4));
  EXPECT_LT(shap.values.col(3).cwiseAbs().maxCoeff(), 0.01);
}

TEST(Shap, SumIdentityAfterNormalization) {
  const auto bg = gaussian_matrix(100, 5, 10);
  const auto x = gaussian_matrix(30, 5, 11);
  const auto f = rowwise([](const auto& r) { return std::exp(0.3 * r[0]) * r[1] + r[2] * r[3] - r[4]; });
  const auto shap = shap_monte_carlo(f, x, bg, names(5));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    EXPECT_NEAR(shap.values.row(i).sum(), shap.predictions[static_cast<std::size_t>(i)] - shap.baseline, 1e-12);
  EXPECT_LT(shap.max_raw_residual(), 0.05);
}

TEST(Shap, NormalizationPreservesSignsAndShares) {
  Eigen::RowVectorXd row(3);
  row << 0.2, -0.6, 0.0;
  normalize_shap_row(row, 0.0);
  EXPECT_NEAR(row.sum(), 0.0, 1e-15);
  EXPECT_EQ(row[2], 0.0);
  Eigen::RowVectorXd zeros = Eigen::RowVectorXd::Zero(4);
  normalize_shap_row(zeros, 1.0);
  for (int j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(zeros[j], 0.25);
}

TEST(Shap, ConvergenceStopsEarlyAndCapsIterations) {
  const auto bg = gaussian_matrix(100, 2, 12);
  const auto x = gaussian_matrix(3, 2, 13);
  const auto f = rowwise([](const auto& r) { return r[0] + r[1]; });
  const auto shap = shap_monte_carlo(f, x, bg, names(2));
  for (auto it : shap.iterations) {
    EXPECT_GE(it, 200u);
    EXPECT_LE(it, 1000u);
    EXPECT_EQ(it % 100, 0u);
  }
  ShapConfig tight;
  tight.epsilon = 0.0;
  const auto capped = shap_monte_carlo(f, x, bg, names(2), tight);
  for (auto it : capped.iterations) EXPECT_EQ(it, 1000u);
  EXPECT_FALSE(capped.all_converged());
}

TEST(Shap, DeterministicAcrossThreads) {
  const auto bg = gaussian_matrix(60, 4, 14);
  const auto x = gaussian_matrix(12, 4, 15);
  const auto f = rowwise([](const auto& r) { return r[0] * r[1] - r[2] * r[2] + r[3]; });
  ShapConfig one, four;
  one.seed = four.seed = 99;
  four.threads = 4;
  const auto a = shap_monte_carlo(f, x, bg, names(4), one);
  const auto b = shap_monte_carlo(f, x, bg, names(4), four);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.iterations, b.iterations);
}

TEST(Shap, Errors) {
  const auto bg = gaussian_matrix(10, 2, 16);
  const auto x = gaussian_matrix(2, 2, 17);
  const auto bad = rowwise([](const auto& r) { return r[0] > 0 ? std::nan("") : 0.0; });
  try {
    shap_monte_carlo(bad, x.cwiseAbs(), bg, names(2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteModelOutput);
  }
  EXPECT_THROW(shap_monte_carlo(rowwise([](const auto&) { return 0.0; }), x, Eigen::MatrixXd(0, 2), names(2)),
               Error);
  EXPECT_THROW(shap_monte_carlo(rowwise([](const auto&) { return 0.0; }), x, bg, names(3)), Error);
}

TEST(Shap, BackgroundSelection) {
  const auto a = select_background(1000, 100, 5);
  EXPECT_EQ(a.size(), 100u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(a, select_background(1000, 100, 5));
  EXPECT_NE(a, select_background(1000, 100, 6));
  EXPECT_EQ(select_background(30, 100, 5).size(), 30u);
}

TEST(EffectCorrelations, SelfAndDuplicates) {
  const auto bg = gaussian_matrix(50, 2, 18);
  Eigen::MatrixXd x = gaussian_matrix(40, 3, 19);
  x.col(2) = x.col(0);
  const auto f = rowwise([](const auto& r) { return r[0] - 0.5 * r[1]; });
  const auto shap = shap_monte_carlo(f, x.leftCols(2), bg, names(2));
  const auto cate = f(x.leftCols(2));
  const auto rep = effect_correlations(x, {"a", "b", "a_copy"}, shap, cate);
  const auto k = rep.pearson.names.size();
  ASSERT_EQ(k, 6u);
  EXPECT_EQ(rep.pearson.names.back(), "cate");
  EXPECT_NEAR(rep.pearson.r(5, 5), 1.0, 1e-12);
  EXPECT_NEAR(rep.pearson.r(0, 2), 1.0, 1e-12);
  EXPECT_NEAR(rep.spearman.r(0, 2), 1.0, 1e-12);
  EXPECT_GT(rep.pearson.r(0, 5), 0.5);
  EXPECT_LT(rep.pearson.r(1, 5), 0.0);
  EXPECT_THROW(effect_correlations(x, {"a", "b"}, shap, cate), Error);
}

}  // namespace
}  // namespace cast
