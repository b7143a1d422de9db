#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include "cast/cohort.hpp"
#include "cast/detail/parallel.hpp"
#include "cast/detail/rng.hpp"
#include "cast/detail/text.hpp"
#include "cast/error.hpp"

namespace cast {

// ---------------------------------------------------------------------------
// Design matrix

// Covariate columns fed to the propensity model. One-hot groups drop one
// reference level so the design stays full rank with an intercept.
struct PropensityDesign {
  std::vector<std::size_t> columns;  // indices into the cohort's covariates
  std::vector<std::string> names;
  std::size_t input_dim = 0;

  // `reference` maps a categorical source column to the level to drop; groups
  // not listed drop their first (lexicographically smallest) level.
  static PropensityDesign from_schema(const ColumnSchema& schema,
                                      const std::map<std::string, std::string>& reference = {}) {
    PropensityDesign d;
    d.input_dim = schema.size();
    std::map<std::string, bool> dropped;
    for (std::size_t j = 0; j < schema.size(); ++j) {
      if (schema.kinds[j] == ColumnKind::OneHot) {
        const auto& src = schema.sources[j];
        auto it = reference.find(src);
        const bool is_ref = it != reference.end() ? schema.levels[j] == it->second : !dropped[src];
        if (is_ref && !dropped[src]) {
          dropped[src] = true;
          continue;
        }
      }
      d.columns.push_back(j);
      d.names.push_back(schema.names[j]);
    }
    return d;
  }

  Eigen::MatrixXd matrix(const SurvivalCohort& cohort) const {
    if (cohort.dim() != input_dim)
      throw Error(ErrorCode::DimensionMismatch, "cohort has " + std::to_string(cohort.dim()) +
                                                    " covariates, model expects " +
                                                    std::to_string(input_dim));
    Eigen::MatrixXd x(cohort.size(), columns.size());
    for (std::size_t i = 0; i < cohort.size(); ++i)
      for (std::size_t k = 0; k < columns.size(); ++k)
        x(i, k) = cohort.subjects[i].covariates[columns[k]];
    return x;
  }
};

// ---------------------------------------------------------------------------
// Penalized logistic regression

namespace detail {

inline double logistic(double eta) {
  if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

// log(1 + exp(eta)) without overflow.
inline double softplus(double eta) {
  return eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
}

inline double soft_threshold(double z, double gamma) {
  if (z > gamma) return z - gamma;
  if (z < -gamma) return z + gamma;
  return 0.0;
}

}  // namespace detail

struct ElasticNetFit {
  double intercept = 0.0;
  Eigen::VectorXd beta;
  double objective = 0.0;
  long sweeps = 0;
  bool converged = false;
  double final_change = 0.0;
};

struct ElasticNetOptions {
  double tolerance = 1e-7;
  long max_sweeps = 100000;
  // When set, receives the penalized objective after every outer sweep.
  std::vector<double>* objective_trace = nullptr;
};

// -(1/n) sum [y log e + (1-y) log(1-e)] + lambda (alpha |b|_1 + (1-alpha) |b|^2 / 2)
inline double penalized_logistic_loss(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                      double intercept, const Eigen::VectorXd& beta, double alpha,
                                      double lambda) {
  const Eigen::VectorXd eta = (x * beta).array() + intercept;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) loss += detail::softplus(eta[i]) - y[i] * eta[i];
  loss /= static_cast<double>(eta.size());
  return loss + lambda * (alpha * beta.lpNorm<1>() + 0.5 * (1.0 - alpha) * beta.squaredNorm());
}

// Cyclic coordinate descent on the IRLS quadratic approximation, with a
// backtracking step between successive outer iterates so the penalized loss
// never increases. Converges when no coefficient moves more than tolerance.
inline ElasticNetFit fit_logistic_elastic_net(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                              double alpha, double lambda,
                                              const ElasticNetFit* warm = nullptr,
                                              const ElasticNetOptions& options = {}) {
  const Eigen::Index n = x.rows(), p = x.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  ElasticNetFit fit;
  if (warm && warm->beta.size() == p) {
    fit.intercept = warm->intercept;
    fit.beta = warm->beta;
  } else {
    const double ybar = std::clamp(y.mean(), 1e-6, 1.0 - 1e-6);
    fit.intercept = std::log(ybar / (1.0 - ybar));
    fit.beta = Eigen::VectorXd::Zero(p);
  }
  fit.objective = penalized_logistic_loss(x, y, fit.intercept, fit.beta, alpha, lambda);
  if (options.objective_trace) options.objective_trace->push_back(fit.objective);

  const double l1 = lambda * alpha;
  const double l2 = lambda * (1.0 - alpha);
  Eigen::VectorXd v(n), r(n), xv2(p);
  while (fit.sweeps < options.max_sweeps) {
    const Eigen::VectorXd eta = (x * fit.beta).array() + fit.intercept;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double pr = detail::logistic(eta[i]);
      v[i] = std::max(pr * (1.0 - pr), 1e-5);
      // r = z - eta with working response z = eta + (y - p) / v
      r[i] = (y[i] - pr) / v[i];
    }
    for (Eigen::Index j = 0; j < p; ++j) xv2[j] = inv_n * (v.array() * x.col(j).array().square()).sum();
    const double vsum = v.sum();

    // Inner cycles on the weighted least-squares surrogate.
    double b0 = fit.intercept;
    Eigen::VectorXd b = fit.beta;
    for (;;) {
      double max_change = 0.0;
      for (Eigen::Index j = 0; j < p; ++j) {
        if (xv2[j] <= 0.0) continue;
        const double g = inv_n * (v.array() * x.col(j).array() * r.array()).sum() + xv2[j] * b[j];
        const double nb = detail::soft_threshold(g, l1) / (xv2[j] + l2);
        const double delta = nb - b[j];
        if (delta != 0.0) {
          r.noalias() -= delta * x.col(j);
          b[j] = nb;
          max_change = std::max(max_change, std::abs(delta));
        }
      }
      const double d0 = (v.array() * r.array()).sum() / vsum;
      r.array() -= d0;
      b0 += d0;
      max_change = std::max(max_change, std::abs(d0));
      ++fit.sweeps;
      if (max_change < options.tolerance || fit.sweeps >= options.max_sweeps) break;
    }

    // Backtrack along the segment to the surrogate minimizer.
    const double d_int = b0 - fit.intercept;
    const Eigen::VectorXd d_beta = b - fit.beta;
    double step = 1.0;
    double cand = penalized_logistic_loss(x, y, fit.intercept + d_int, fit.beta + d_beta, alpha, lambda);
    for (int halvings = 0; cand > fit.objective && halvings < 40; ++halvings) {
      step *= 0.5;
      cand = penalized_logistic_loss(x, y, fit.intercept + step * d_int,
                                     fit.beta + step * d_beta, alpha, lambda);
    }
    double change = 0.0;
    if (cand <= fit.objective) {
      change = std::abs(step * d_int);
      if (p > 0) change = std::max(change, (step * d_beta).cwiseAbs().maxCoeff());
      fit.intercept += step * d_int;
      fit.beta += step * d_beta;
      fit.objective = cand;
    }
    if (options.objective_trace) options.objective_trace->push_back(fit.objective);
    fit.final_change = change;
    if (change < options.tolerance) {
      fit.converged = true;
      break;
    }
  }
  return fit;
}

// Newton-Raphson MLE for unpenalized logistic regression; used as a check
// on the coordinate-descent solver at lambda = 0.
inline Eigen::VectorXd logistic_mle_newton(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                           int max_iter = 100, double tol = 1e-12) {
  const Eigen::Index n = x.rows(), p = x.cols();
  Eigen::MatrixXd xa(n, p + 1);
  xa.col(0).setOnes();
  xa.rightCols(p) = x;
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p + 1);
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd eta = xa * theta;
    Eigen::VectorXd pr(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      pr[i] = detail::logistic(eta[i]);
      w[i] = pr[i] * (1.0 - pr[i]);
    }
    const Eigen::VectorXd grad = xa.transpose() * (y - pr);
    const Eigen::MatrixXd hess = xa.transpose() * w.asDiagonal() * xa;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    theta += step;
    if (step.cwiseAbs().maxCoeff() < tol) break;
  }
  return theta;  // (intercept, beta...)
}

// ---------------------------------------------------------------------------
// Cross-validated propensity model

struct PropensityConfig {
  std::vector<double> alpha_grid{0.01, 0.25, 0.5, 0.75, 0.99};
  std::vector<double> lambda_grid;  // empty: 100 log-spaced values per alpha
  std::size_t n_lambda = 100;
  double lambda_min_ratio = 1e-4;
  std::size_t folds = 10;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  double tolerance = 1e-7;
  long max_sweeps = 100000;
  std::map<std::string, std::string> reference_levels;
};

struct PropensityModel {
  double intercept = 0.0;
  Eigen::VectorXd coefficients;
  double alpha = 0.0;
  double lambda = 0.0;
  std::size_t cv_folds = 0;
  double cv_loss = 0.0;
  bool converged = true;
  double final_change = 0.0;
  PropensityDesign design;
};

inline double binomial_deviance(double y, double p) {
  p = std::clamp(p, 1e-15, 1.0 - 1e-15);
  return -2.0 * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

inline std::vector<double> lambda_path(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                       double alpha, std::size_t n_lambda, double min_ratio) {
  const double ybar = y.mean();
  double lmax = 0.0;
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    lmax = std::max(lmax, std::abs(x.col(j).dot((y.array() - ybar).matrix())) /
                              static_cast<double>(x.rows()));
  lmax /= std::max(alpha, 1e-3);
  if (!(lmax > 0.0)) lmax = 1.0;
  std::vector<double> path(n_lambda);
  for (std::size_t k = 0; k < n_lambda; ++k) {
    const double frac = n_lambda == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(n_lambda - 1);
    path[k] = lmax * std::pow(min_ratio, frac);
  }
  return path;
}

// Stratified-on-treatment fold labels.
inline std::vector<std::size_t> stratified_folds(const Eigen::VectorXd& y, std::size_t folds,
                                                 std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (Eigen::Index i = 0; i < y.size(); ++i) (y[i] > 0.5 ? pos : neg).push_back(static_cast<std::size_t>(i));
  auto rng = detail::make_engine(seed, detail::Stream::Folds);
  detail::shuffle(pos, rng);
  detail::shuffle(neg, rng);
  std::vector<std::size_t> fold(static_cast<std::size_t>(y.size()));
  std::size_t k = 0;
  for (auto i : pos) fold[i] = k++ % folds;
  for (auto i : neg) fold[i] = k++ % folds;
  return fold;
}

// Fits the elastic-net path on the rows in `train` and returns the deviance
// of every lambda on the rows in `test`.
inline std::vector<double> path_holdout_deviance(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                                 const std::vector<std::size_t>& train,
                                                 const std::vector<std::size_t>& test, double alpha,
                                                 const std::vector<double>& lambdas,
                                                 const ElasticNetOptions& options) {
  Eigen::MatrixXd xt(train.size(), x.cols());
  Eigen::VectorXd yt(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    xt.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(train[i]));
    yt[static_cast<Eigen::Index>(i)] = y[static_cast<Eigen::Index>(train[i])];
  }
  const double null_loss = [&] {
    const double pbar = std::clamp(yt.mean(), 1e-12, 1 - 1e-12);
    return -(pbar * std::log(pbar) + (1 - pbar) * std::log(1 - pbar));
  }();
  std::vector<double> dev(lambdas.size(), 0.0);
  ElasticNetFit fit;
  bool have = false, saturated = false;
  for (std::size_t k = 0; k < lambdas.size(); ++k) {
    if (!saturated) {
      fit = fit_logistic_elastic_net(xt, yt, alpha, lambdas[k], have ? &fit : nullptr, options);
      have = true;
      // Near-separable training folds: stop descending the path.
      const double data_loss = fit.objective - lambdas[k] * (alpha * fit.beta.lpNorm<1>() +
                                                             0.5 * (1 - alpha) * fit.beta.squaredNorm());
      if (data_loss < 1e-3 * null_loss) saturated = true;
    }
    double d = 0.0;
    for (auto i : test) {
      const double eta = fit.intercept + x.row(static_cast<Eigen::Index>(i)).dot(fit.beta);
      d += binomial_deviance(y[static_cast<Eigen::Index>(i)], detail::logistic(eta));
    }
    dev[k] = d;
  }
  return dev;
}

inline PropensityModel fit_elastic_net(const SurvivalCohort& cohort, const PropensityConfig& config = {}) {
  if (!cohort.standardized)
    throw Error(ErrorCode::ConfigError, "propensity model expects a standardized cohort");
  const auto design = PropensityDesign::from_schema(cohort.schema, config.reference_levels);
  const Eigen::MatrixXd x = design.matrix(cohort);
  Eigen::VectorXd y(static_cast<Eigen::Index>(cohort.size()));
  for (std::size_t i = 0; i < cohort.size(); ++i) y[static_cast<Eigen::Index>(i)] = cohort.subjects[i].treatment;
  const double treated = y.sum();
  if (treated == 0.0 || treated == static_cast<double>(y.size()))
    throw Error(ErrorCode::SingleClass, "treatment has a single class");
  if (config.folds < 2) throw Error(ErrorCode::ConfigError, "need at least 2 CV folds");
  if (config.alpha_grid.empty()) throw Error(ErrorCode::ConfigError, "empty alpha grid");

  const auto fold = stratified_folds(y, config.folds, config.seed);
  std::vector<std::vector<std::size_t>> train(config.folds), test(config.folds);
  for (std::size_t i = 0; i < fold.size(); ++i)
    for (std::size_t k = 0; k < config.folds; ++k) (fold[i] == k ? test : train)[k].push_back(i);

  ElasticNetOptions cv_options;
  cv_options.tolerance = config.tolerance;
  cv_options.max_sweeps = std::min<long>(config.max_sweeps, 5000);

  struct Task {
    std::size_t alpha_index, fold;
  };
  std::vector<Task> tasks;
  std::vector<std::vector<double>> lambdas(config.alpha_grid.size());
  for (std::size_t a = 0; a < config.alpha_grid.size(); ++a) {
    const double alpha = config.alpha_grid[a];
    if (!(alpha > 0.0 && alpha <= 1.0)) throw Error(ErrorCode::ConfigError, "alpha must lie in (0, 1]");
    lambdas[a] = config.lambda_grid.empty()
                     ? lambda_path(x, y, alpha, config.n_lambda, config.lambda_min_ratio)
                     : config.lambda_grid;
    for (std::size_t k = 0; k < config.folds; ++k) tasks.push_back({a, k});
  }
  std::vector<std::vector<double>> fold_dev(tasks.size());
  detail::parallel_for(tasks.size(), config.threads, [&](std::size_t t) {
    const auto [a, k] = tasks[t];
    fold_dev[t] = path_holdout_deviance(x, y, train[k], test[k], config.alpha_grid[a], lambdas[a], cv_options);
  });

  // Mean deviance per (alpha, lambda); first minimum wins.
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_a = 0, best_l = 0;
  for (std::size_t a = 0; a < config.alpha_grid.size(); ++a) {
    for (std::size_t l = 0; l < lambdas[a].size(); ++l) {
      double total = 0.0;
      for (std::size_t k = 0; k < config.folds; ++k) total += fold_dev[a * config.folds + k][l];
      const double mean = total / static_cast<double>(y.size());
      if (mean < best) {
        best = mean;
        best_a = a;
        best_l = l;
      }
    }
  }

  ElasticNetOptions final_options;
  final_options.tolerance = config.tolerance;
  final_options.max_sweeps = config.max_sweeps;
  ElasticNetFit fit;
  for (std::size_t l = 0; l <= best_l; ++l)
    fit = fit_logistic_elastic_net(x, y, config.alpha_grid[best_a], lambdas[best_a][l],
                                   l == 0 ? nullptr : &fit, final_options);
  if (!fit.converged)
    throw Error(ErrorCode::NonConvergence,
                "elastic net hit the sweep limit; final coefficient change " +
                    detail::format_double(fit.final_change));

  PropensityModel model;
  model.intercept = fit.intercept;
  model.coefficients = fit.beta;
  model.alpha = config.alpha_grid[best_a];
  model.lambda = lambdas[best_a][best_l];
  model.cv_folds = config.folds;
  model.cv_loss = best;
  model.converged = fit.converged;
  model.final_change = fit.final_change;
  model.design = design;
  return model;
}

// Single fit at fixed hyperparameters (no cross-validation).
inline PropensityModel fit_elastic_net_fixed(const SurvivalCohort& cohort, double alpha, double lambda,
                                             const std::map<std::string, std::string>& reference = {},
                                             const ElasticNetOptions& options = {}) {
  const auto design = PropensityDesign::from_schema(cohort.schema, reference);
  const Eigen::MatrixXd x = design.matrix(cohort);
  Eigen::VectorXd y(static_cast<Eigen::Index>(cohort.size()));
  for (std::size_t i = 0; i < cohort.size(); ++i) y[static_cast<Eigen::Index>(i)] = cohort.subjects[i].treatment;
  if (y.sum() == 0.0 || y.sum() == static_cast<double>(y.size()))
    throw Error(ErrorCode::SingleClass, "treatment has a single class");
  const auto fit = fit_logistic_elastic_net(x, y, alpha, lambda, nullptr, options);
  if (!fit.converged)
    throw Error(ErrorCode::NonConvergence, "elastic net hit the sweep limit; final coefficient change " +
                                               detail::format_double(fit.final_change));
  PropensityModel model;
  model.intercept = fit.intercept;
  model.coefficients = fit.beta;
  model.alpha = alpha;
  model.lambda = lambda;
  model.design = design;
  model.final_change = fit.final_change;
  return model;
}

// e_i = 1 / (1 + exp(-(intercept + beta . x_i))), kept strictly inside (0, 1).
inline std::vector<double> predict_scores(const PropensityModel& model, const SurvivalCohort& cohort) {
  const Eigen::MatrixXd x = model.design.matrix(cohort);
  if (x.cols() != model.coefficients.size())
    throw Error(ErrorCode::DimensionMismatch, "coefficient count does not match design");
  std::vector<double> scores(cohort.size());
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const double eta = model.intercept + x.row(static_cast<Eigen::Index>(i)).dot(model.coefficients);
    scores[i] = std::clamp(detail::logistic(eta), 1e-12, 1.0 - 1e-12);
  }
  return scores;
}

// ---------------------------------------------------------------------------
// Trimming

struct TrimResult {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> trimmed;
  double lower = 0.10;
  double upper = 0.90;
};

inline TrimResult trim(const std::vector<double>& scores, double lower = 0.10, double upper = 0.90) {
  if (!(lower <= upper)) throw Error(ErrorCode::ConfigError, "trim lower bound exceeds upper bound");
  TrimResult out;
  out.lower = lower;
  out.upper = upper;
  for (std::size_t i = 0; i < scores.size(); ++i)
    (scores[i] >= lower && scores[i] <= upper ? out.kept : out.trimmed).push_back(i);
  if (out.kept.empty()) throw Error(ErrorCode::EmptyAfterTrim, "no subject survives trimming");
  return out;
}

inline TrimResult trim(const SurvivalCohort& cohort, const std::vector<double>& scores, double lower = 0.10,
                       double upper = 0.90) {
  if (scores.size() != cohort.size())
    throw Error(ErrorCode::DimensionMismatch, "scores are not aligned with the cohort");
  return trim(scores, lower, upper);
}

// Symmetric bounds [tau, 1 - tau] for every threshold.
inline std::vector<TrimResult> trim_sensitivity(const std::vector<double>& scores,
                                                const std::vector<double>& thresholds = {0.01, 0.03, 0.05,
                                                                                         0.07, 0.10}) {
  std::vector<TrimResult> out;
  for (double tau : thresholds) out.push_back(trim(scores, tau, 1.0 - tau));
  return out;
}

// ---------------------------------------------------------------------------
// Correlation diagnostics

enum class CorrelationMethod { Pearson, Spearman };

struct CorrelationReport {
  CorrelationMethod method = CorrelationMethod::Pearson;
  std::vector<std::string> names;
  Eigen::MatrixXd r;        // NaN where undefined
  Eigen::MatrixXd p_value;  // NaN where undefined
  std::vector<std::vector<bool>> significant;
  std::vector<bool> constant;  // columns flagged ConstantColumn
  double alpha = 0.05;
  double corrected_level = 0.05;

  std::string matrix_csv() const {
    std::ostringstream out;
    out << "variable";
    for (const auto& n : names) out << ',' << detail::csv_escape(n);
    out << '\n';
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
      out << detail::csv_escape(names[static_cast<std::size_t>(i)]);
      for (Eigen::Index j = 0; j < r.cols(); ++j) out << ',' << detail::format_double(r(i, j));
      out << '\n';
    }
    return out.str();
  }

  std::string mask_csv() const {
    std::ostringstream out;
    out << "variable";
    for (const auto& n : names) out << ',' << detail::csv_escape(n);
    out << '\n';
    for (std::size_t i = 0; i < names.size(); ++i) {
      out << detail::csv_escape(names[i]);
      for (std::size_t j = 0; j < names.size(); ++j) {
        out << ',';
        if (std::isnan(r(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)))) out << "NA";
        else out << (significant[i][j] ? 1 : 0);
      }
      out << '\n';
    }
    return out.str();
  }
};

// Average ranks (1-based), ties share their mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t k = 0; k < order.size();) {
    std::size_t m = k;
    while (m + 1 < order.size() && v[order[m + 1]] == v[order[k]]) ++m;
    const double rank = 0.5 * static_cast<double>(k + m) + 1.0;
    for (std::size_t q = k; q <= m; ++q) ranks[order[q]] = rank;
    k = m + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

// Two-sided p-value of H0: rho = 0 using t = r sqrt((n-2)/(1-r^2)).
inline double correlation_p_value(double r, std::size_t n) {
  if (std::isnan(r)) return r;
  if (std::abs(r) >= 1.0) return 0.0;
  const double df = static_cast<double>(n) - 2.0;
  const double t = r * std::sqrt(df / (1.0 - r * r));
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

inline CorrelationReport correlation_diagnostics(const std::vector<std::vector<double>>& columns,
                                                 const std::vector<std::string>& names,
                                                 CorrelationMethod method, double alpha = 0.05) {
  const std::size_t k = columns.size();
  if (k < 2) throw Error(ErrorCode::DimensionMismatch, "correlation needs at least 2 columns");
  if (names.size() != k) throw Error(ErrorCode::DimensionMismatch, "one name per column required");
  const std::size_t n = columns.front().size();
  if (n < 3) throw Error(ErrorCode::DimensionMismatch, "correlation needs at least 3 rows");
  for (const auto& c : columns)
    if (c.size() != n) throw Error(ErrorCode::DimensionMismatch, "columns differ in length");

  std::vector<std::vector<double>> data = columns;
  if (method == CorrelationMethod::Spearman)
    for (auto& c : data) c = average_ranks(c);

  CorrelationReport rep;
  rep.method = method;
  rep.names = names;
  rep.alpha = alpha;
  const std::size_t pairs = k * (k - 1) / 2;
  rep.corrected_level = alpha / static_cast<double>(pairs);
  rep.r = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k),
                                    std::numeric_limits<double>::quiet_NaN());
  rep.p_value = rep.r;
  rep.significant.assign(k, std::vector<bool>(k, false));
  rep.constant.assign(k, false);
  for (std::size_t j = 0; j < k; ++j) {
    const auto [lo, hi] = std::minmax_element(data[j].begin(), data[j].end());
    rep.constant[j] = *lo == *hi;
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i; j < k; ++j) {
      if (rep.constant[i] || rep.constant[j]) continue;
      const double r = i == j ? 1.0 : pearson(data[i], data[j]);
      const double p = correlation_p_value(r, n);
      const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
      rep.r(ii, jj) = rep.r(jj, ii) = r;
      rep.p_value(ii, jj) = rep.p_value(jj, ii) = p;
      if (i != j && p < rep.corrected_level) rep.significant[i][j] = rep.significant[j][i] = true;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Overlap density

struct DensityCurve {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;

  std::string to_csv() const {
    std::ostringstream out;
    out << "score,density\n";
    for (std::size_t i = 0; i < x.size(); ++i)
      out << detail::format_double(x[i]) << ',' << detail::format_double(density[i]) << '\n';
    return out.str();
  }
};

// Gaussian KDE with Silverman's rule on a grid reaching five bandwidths past
// the data.
inline DensityCurve kde_density(const std::vector<double>& values, std::size_t grid_points = 512) {
  if (values.empty()) throw Error(ErrorCode::EmptyInput, "density of an empty sample");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = values.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) {
    const double pos = q * (n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double spread = sd;
  if (iqr > 0) spread = std::min(spread, iqr / 1.34);
  double h = 0.9 * spread * std::pow(n, -0.2);
  if (!(h > 0)) h = 1e-3;

  DensityCurve curve;
  curve.bandwidth = h;
  const double lo = sorted.front() - 5 * h, hi = sorted.back() + 5 * h;
  const double norm = 1.0 / (n * h * std::sqrt(2 * M_PI));
  for (std::size_t g = 0; g < grid_points; ++g) {
    const double x = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid_points - 1);
    double d = 0;
    for (double v : sorted) {
      const double z = (x - v) / h;
      d += std::exp(-0.5 * z * z);
    }
    curve.x.push_back(x);
    curve.density.push_back(d * norm);
  }
  return curve;
}

}  // namespace cast
