#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cast/cohort.hpp"
#include "cast/detail/parallel.hpp"
#include "cast/detail/rng.hpp"
#include "cast/detail/text.hpp"
#include "cast/error.hpp"
#include "cast/propensity.hpp"

namespace cast {

// Batch black-box model: one prediction per row of x.
using BatchPredictor = std::function<std::vector<double>(const Eigen::MatrixXd& x)>;

struct ShapConfig {
  std::size_t iterations = 1000;
  double epsilon = 0.01;
  std::size_t check_every = 100;
  std::size_t min_iterations = 200;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct ShapMatrix {
  std::vector<std::string> names;
  Eigen::MatrixXd values;  // subjects x features, normalized
  Eigen::MatrixXd raw;     // before normalization
  std::vector<double> predictions;
  double baseline = 0.0;
  std::vector<std::size_t> iterations;
  std::vector<bool> converged;

  bool all_converged() const {
    return std::all_of(converged.begin(), converged.end(), [](bool c) { return c; });
  }

  // Largest |sum raw - (pred - baseline)| over subjects.
  double max_raw_residual() const {
    double m = 0;
    for (Eigen::Index i = 0; i < raw.rows(); ++i)
      m = std::max(m, std::abs(raw.row(i).sum() - (predictions[static_cast<std::size_t>(i)] - baseline)));
    return m;
  }

  // Mean |SHAP| per feature.
  std::vector<double> mean_abs() const {
    std::vector<double> out(static_cast<std::size_t>(values.cols()));
    for (Eigen::Index j = 0; j < values.cols(); ++j)
      out[static_cast<std::size_t>(j)] = values.col(j).cwiseAbs().mean();
    return out;
  }
};

// Residual spread proportionally to |raw| (uniformly when all raw are 0).
inline void normalize_shap_row(Eigen::Ref<Eigen::RowVectorXd> row, double target) {
  const double residual = target - row.sum();
  const double mass = row.cwiseAbs().sum();
  if (mass > 0) {
    const Eigen::RowVectorXd share = row.cwiseAbs() / mass;
    row += residual * share;
  } else if (row.size() > 0) {
    row.array() += residual / static_cast<double>(row.size());
  }
}

// Seeded subsample of up to `count` row indices, ascending.
inline std::vector<std::size_t> select_background(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n <= count) return idx;
  auto rng = detail::make_engine(seed, detail::Stream::Background);
  detail::shuffle(idx, rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace detail {

inline void check_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteModelOutput, "model returned a non-finite prediction");
}

}  // namespace detail

// Permutation-sampling SHAP. Iterations come in antithetic pairs (a
// permutation and its reverse share one background row); background rows
// are visited in a per-subject shuffled cycle. Every `check_every`
// iterations from `min_iterations` on, the run stops once no running mean
// moved by `epsilon` or more over the last block and the background cycle is
// complete.
inline ShapMatrix shap_monte_carlo(const BatchPredictor& predict, const Eigen::MatrixXd& x,
                                   const Eigen::MatrixXd& background, const std::vector<std::string>& names,
                                   const ShapConfig& config = {}) {
  if (background.rows() == 0) throw Error(ErrorCode::EmptyInput, "background set is empty");
  if (background.cols() != x.cols() || names.size() != static_cast<std::size_t>(x.cols()))
    throw Error(ErrorCode::DimensionMismatch, "SHAP inputs disagree on feature count");
  if (config.iterations < 2 || config.check_every < 2 || config.check_every % 2 != 0)
    throw Error(ErrorCode::ConfigError, "SHAP iterations must come in antithetic pairs");

  const auto n = static_cast<std::size_t>(x.rows());
  const auto p = x.cols();
  ShapMatrix out;
  out.names = names;
  out.values = Eigen::MatrixXd::Zero(x.rows(), p);
  out.raw = Eigen::MatrixXd::Zero(x.rows(), p);
  out.iterations.assign(n, 0);
  out.converged.assign(n, false);

  const auto bg_pred = predict(background);
  detail::check_finite(bg_pred);
  out.baseline = std::accumulate(bg_pred.begin(), bg_pred.end(), 0.0) / static_cast<double>(bg_pred.size());
  out.predictions = predict(x);
  detail::check_finite(out.predictions);

  const auto nb = static_cast<std::size_t>(background.rows());
  const std::size_t block = config.check_every;

  detail::parallel_for(n, config.threads, [&](std::size_t i) {
    auto rng = detail::make_engine(config.seed, detail::Stream::Shap, i);
    std::vector<std::size_t> bg_order(nb);
    std::iota(bg_order.begin(), bg_order.end(), std::size_t{0});
    detail::shuffle(bg_order, rng);
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(p));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});

    const Eigen::RowVectorXd xi = x.row(static_cast<Eigen::Index>(i));
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(p);
    Eigen::RowVectorXd previous_mean = Eigen::RowVectorXd::Zero(p);
    std::size_t done = 0;
    bool converged = false;

    while (done < config.iterations) {
      const std::size_t count = std::min(block, config.iterations - done);
      // Coalitions for the whole block, evaluated in one batch.
      Eigen::MatrixXd rows(static_cast<Eigen::Index>(count) * (p + 1), p);
      std::vector<std::vector<Eigen::Index>> orders(count);
      for (std::size_t it = 0; it < count; ++it) {
        const std::size_t global = done + it;
        if (global % 2 == 0) {
          detail::shuffle(perm, rng);
          orders[it] = perm;
        } else {
          orders[it].assign(perm.rbegin(), perm.rend());
        }
        const auto z = background.row(static_cast<Eigen::Index>(bg_order[(global / 2) % nb]));
        const auto base = static_cast<Eigen::Index>(it) * (p + 1);
        rows.row(base) = z;
        for (Eigen::Index k = 0; k < p; ++k) {
          rows.row(base + k + 1) = rows.row(base + k);
          const auto j = orders[it][static_cast<std::size_t>(k)];
          rows(base + k + 1, j) = xi[j];
        }
      }
      const auto f = predict(rows);
      detail::check_finite(f);
      for (std::size_t it = 0; it < count; ++it) {
        const auto base = static_cast<std::size_t>(it) * static_cast<std::size_t>(p + 1);
        for (Eigen::Index k = 0; k < p; ++k)
          sum[orders[it][static_cast<std::size_t>(k)]] += f[base + static_cast<std::size_t>(k) + 1] - f[base + static_cast<std::size_t>(k)];
      }
      done += count;
      const Eigen::RowVectorXd mean = sum / static_cast<double>(done);
      // Stopping waits for a completed pass over the background rows, so an
      // additive model gets its exact centred contributions.
      const bool full_cycle = done % 2 == 0 && (done / 2) % nb == 0;
      if (done >= config.min_iterations && count == block && full_cycle &&
          (mean - previous_mean).cwiseAbs().maxCoeff() < config.epsilon) {
        previous_mean = mean;
        converged = true;
        break;
      }
      previous_mean = mean;
    }
    out.raw.row(static_cast<Eigen::Index>(i)) = previous_mean;
    Eigen::RowVectorXd row = previous_mean;
    normalize_shap_row(row, out.predictions[i] - out.baseline);
    out.values.row(static_cast<Eigen::Index>(i)) = row;
    out.iterations[i] = done;
    out.converged[i] = converged;
  });
  return out;
}

inline std::string shap_csv(const ShapMatrix& shap, const std::vector<std::string>& ids) {
  std::ostringstream out;
  out << "id";
  for (const auto& name : shap.names) out << ',' << detail::csv_escape(name);
  out << '\n';
  for (Eigen::Index i = 0; i < shap.values.rows(); ++i) {
    out << detail::csv_escape(ids[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < shap.values.cols(); ++j) out << ',' << detail::format_double(shap.values(i, j));
    out << '\n';
  }
  return out.str();
}

// Long-format (feature, value, shap) pairs for per-feature scatter plots.
inline std::string shap_scatter_csv(const ShapMatrix& shap, const Eigen::MatrixXd& x) {
  std::ostringstream out;
  out << "feature,value,shap\n";
  for (Eigen::Index j = 0; j < shap.values.cols(); ++j)
    for (Eigen::Index i = 0; i < shap.values.rows(); ++i)
      out << detail::csv_escape(shap.names[static_cast<std::size_t>(j)]) << ',' << detail::format_double(x(i, j))
          << ',' << detail::format_double(shap.values(i, j)) << '\n';
  return out.str();
}

inline std::string shap_summary_csv(const ShapMatrix& shap) {
  std::ostringstream out;
  out << "feature,mean_abs_shap\n";
  const auto m = shap.mean_abs();
  for (std::size_t j = 0; j < m.size(); ++j)
    out << detail::csv_escape(shap.names[j]) << ',' << detail::format_double(m[j]) << '\n';
  return out.str();
}

struct EffectCorrelations {
  CorrelationReport pearson;
  CorrelationReport spearman;
};

// Correlations over the block (covariates | SHAP per feature | CATE).
inline EffectCorrelations effect_correlations(const Eigen::MatrixXd& covariates,
                                              const std::vector<std::string>& covariate_names,
                                              const ShapMatrix& shap, const std::vector<double>& cate,
                                              double alpha = 0.05) {
  const auto n = covariates.rows();
  if (shap.values.rows() != n || static_cast<Eigen::Index>(cate.size()) != n ||
      covariate_names.size() != static_cast<std::size_t>(covariates.cols()))
    throw Error(ErrorCode::DimensionMismatch, "correlation inputs are not aligned");
  std::vector<std::vector<double>> columns;
  std::vector<std::string> names;
  for (Eigen::Index j = 0; j < covariates.cols(); ++j) {
    columns.emplace_back(covariates.col(j).data(), covariates.col(j).data() + n);
    names.push_back(covariate_names[static_cast<std::size_t>(j)]);
  }
  for (Eigen::Index j = 0; j < shap.values.cols(); ++j) {
    const Eigen::VectorXd c = shap.values.col(j);
    columns.emplace_back(c.data(), c.data() + n);
    names.push_back("shap_" + shap.names[static_cast<std::size_t>(j)]);
  }
  columns.push_back(cate);
  names.push_back("cate");
  return {correlation_diagnostics(columns, names, CorrelationMethod::Pearson, alpha),
          correlation_diagnostics(columns, names, CorrelationMethod::Spearman, alpha)};
}

}  // namespace cast
