#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "cast/cohort.hpp"
#include "cast/detail/rng.hpp"
#include "cast/detail/text.hpp"
#include "cast/error.hpp"
#include "cast/regression_forest.hpp"
#include "cast/survival.hpp"

namespace cast {

enum class Estimand { SP, RMST };

inline std::string to_string(Estimand e) { return e == Estimand::SP ? "sp" : "rmst"; }

inline Estimand parse_estimand(const std::string& s) {
  if (s == "sp" || s == "SP") return Estimand::SP;
  if (s == "rmst" || s == "RMST") return Estimand::RMST;
  throw Error(ErrorCode::ConfigError, "unknown estimand '" + s + "'");
}

struct HorizonSpec {
  std::vector<double> horizons{12, 24, 36, 48, 60, 72, 84, 96, 108, 120};
  Estimand estimand = Estimand::SP;

  void validate() const {
    if (horizons.empty()) throw Error(ErrorCode::ConfigError, "no horizons given");
    for (std::size_t k = 0; k < horizons.size(); ++k) {
      if (!(horizons[k] > 0)) throw Error(ErrorCode::ConfigError, "horizons must be positive");
      if (k > 0 && !(horizons[k] > horizons[k - 1]))
        throw Error(ErrorCode::ConfigError, "horizons must be strictly increasing");
    }
  }

  // "start:stop:step" or a comma-separated list.
  static std::vector<double> parse_list(const std::string& text) {
    std::vector<double> out;
    if (text.find(':') != std::string::npos) {
      std::vector<double> parts;
      std::stringstream ss(text);
      std::string tok;
      while (std::getline(ss, tok, ':')) {
        double v;
        if (!detail::parse_double(tok, v)) throw Error(ErrorCode::ConfigError, "bad horizon range '" + text + "'");
        parts.push_back(v);
      }
      if (parts.size() != 3 || !(parts[2] > 0) || parts[1] < parts[0])
        throw Error(ErrorCode::ConfigError, "horizon range must be start:stop:step");
      const auto count = static_cast<long>(std::floor((parts[1] - parts[0]) / parts[2] + 1e-9));
      for (long k = 0; k <= count; ++k) out.push_back(parts[0] + static_cast<double>(k) * parts[2]);
    } else {
      std::stringstream ss(text);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        double v;
        if (!detail::parse_double(tok, v)) throw Error(ErrorCode::ConfigError, "bad horizon '" + tok + "'");
        out.push_back(v);
      }
    }
    HorizonSpec{out, Estimand::SP}.validate();
    return out;
  }
};

// Outcome at a horizon: 1{T > h} or min(T, h).
inline double horizon_outcome(double t, double h, Estimand e) {
  return e == Estimand::SP ? (t > h ? 1.0 : 0.0) : std::min(t, h);
}

inline bool observable_at(const SubjectRecord& s, double h) { return s.event == 1 || s.time_months >= h; }

struct PseudoOutcomeSet {
  double horizon = 0.0;
  Estimand estimand = Estimand::SP;
  std::vector<double> gamma;
  std::vector<char> valid;
  std::vector<char> observable;
  std::vector<double> outcome;
  std::vector<double> e, m0, m1, kc;  // nuisance snapshots; kc NaN if unused
  std::size_t n_valid = 0;
  std::size_t n_below_floor = 0;

  std::vector<double> valid_gamma() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < gamma.size(); ++i)
      if (valid[i]) out.push_back(gamma[i]);
    return out;
  }
};

// Censoring survival just before min(T, h), from the curve of the subject's
// arm (or the single pooled curve).
inline double censoring_weight_base(const std::vector<StepFunction>& curves, const SubjectRecord& s, double h) {
  const auto& k = curves.size() == 1 ? curves[0] : curves.at(static_cast<std::size_t>(s.treatment));
  return k.left_limit(std::min(s.time_months, h));
}

// IPCW-AIPW scores
//   m1 - m0 + (W - e) / (e (1 - e)) * (Y - m_W) * O / K_c(min(T, h)- | W).
// Observable subjects whose K_c falls below `floor` are marked invalid.
inline PseudoOutcomeSet pseudo_outcomes(const SurvivalCohort& cohort, const std::vector<double>& scores,
                                        double horizon, Estimand estimand,
                                        const std::vector<StepFunction>& censor_curves,
                                        const std::vector<double>& m0, const std::vector<double>& m1,
                                        double floor = 0.05) {
  const std::size_t n = cohort.size();
  if (scores.size() != n || m0.size() != n || m1.size() != n)
    throw Error(ErrorCode::DimensionMismatch, "nuisance vectors are not aligned with the cohort");
  if (!(horizon > 0)) throw Error(ErrorCode::ConfigError, "horizon must be positive");
  if (censor_curves.empty()) throw Error(ErrorCode::ConfigError, "no censoring curves");
  PseudoOutcomeSet out;
  out.horizon = horizon;
  out.estimand = estimand;
  out.gamma.assign(n, 0.0);
  out.valid.assign(n, 0);
  out.observable.assign(n, 0);
  out.outcome.assign(n, 0.0);
  out.e = scores;
  out.m0 = m0;
  out.m1 = m1;
  out.kc.assign(n, std::numeric_limits<double>::quiet_NaN());
  bool arm_seen[2] = {false, false};
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = cohort.subjects[i];
    const double e = scores[i];
    if (!(e > 0 && e < 1)) throw Error(ErrorCode::ConfigError, "propensity scores must lie in (0, 1)");
    arm_seen[s.treatment] = true;
    const double y = horizon_outcome(s.time_months, horizon, estimand);
    out.outcome[i] = y;
    double g = m1[i] - m0[i];
    if (observable_at(s, horizon)) {
      out.observable[i] = 1;
      const double k = censoring_weight_base(censor_curves, s, horizon);
      out.kc[i] = k;
      if (k < floor) {
        ++out.n_below_floor;
        continue;
      }
      const double mw = s.treatment ? m1[i] : m0[i];
      g += (s.treatment - e) / (e * (1 - e)) * (y - mw) / k;
    }
    out.gamma[i] = g;
    out.valid[i] = 1;
    ++out.n_valid;
  }
  if (!arm_seen[0] || !arm_seen[1]) throw Error(ErrorCode::DegenerateArm, "a treatment arm is empty");
  if (out.n_valid == 0) throw Error(ErrorCode::NoValidSubjects, "no subject has a usable pseudo-outcome");
  return out;
}

struct EstimationConfig {
  ForestParams forest;  // CATE forest
  bool tune = true;
  TuningGrid tuning;
  ForestParams nuisance = [] {
    ForestParams p;
    p.trees = 500;
    p.group_size = 1;
    return p;
  }();
  std::size_t nuisance_folds = 2;
  double censor_floor = 0.05;
  CensoringConditioning conditioning = CensoringConditioning::ByTreatment;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool keep_forest = false;
};

inline std::uint64_t horizon_seed(std::uint64_t seed, double horizon, Estimand estimand) {
  const auto index = static_cast<std::uint64_t>(std::llround(horizon * 1000.0)) * 2 +
                     (estimand == Estimand::RMST ? 1 : 0);
  return detail::derive_seed(seed, detail::Stream::Tree, index);
}

inline Eigen::MatrixXd rows_matrix(const SurvivalCohort& c, const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(c.dim()));
  for (std::size_t k = 0; k < rows.size(); ++k)
    for (std::size_t j = 0; j < c.dim(); ++j)
      x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = c.subjects[rows[k]].covariates[j];
  return x;
}

struct OutcomeNuisance {
  std::vector<double> m0, m1;
  std::vector<std::size_t> fold;
};

// Cross-fitted per-arm outcome regressions of Y(h) on observable subjects,
// IPCW-weighted. Each subject's predictions come from forests that never saw
// it. Arms too small for a forest fall back to the weighted mean.
inline OutcomeNuisance cross_fit_outcomes(const SurvivalCohort& cohort, double horizon, Estimand estimand,
                                          const std::vector<StepFunction>& censor_curves,
                                          const EstimationConfig& config, std::uint64_t seed) {
  const std::size_t n = cohort.size();
  const std::size_t folds = std::max<std::size_t>(config.nuisance_folds, 2);
  OutcomeNuisance out;
  out.m0.assign(n, 0.0);
  out.m1.assign(n, 0.0);
  out.fold.assign(n, 0);
  {
    auto rng = detail::make_engine(seed, detail::Stream::NuisanceFolds);
    const auto perm = detail::permutation(n, rng);
    for (std::size_t k = 0; k < n; ++k) out.fold[perm[k]] = k % folds;
  }
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> predict_rows;
    for (std::size_t i = 0; i < n; ++i)
      if (out.fold[i] == f) predict_rows.push_back(i);
    if (predict_rows.empty()) continue;
    const Eigen::MatrixXd xp = rows_matrix(cohort, predict_rows);
    for (int arm = 0; arm < 2; ++arm) {
      std::vector<std::size_t> rows;
      std::vector<double> y, w;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& s = cohort.subjects[i];
        if (out.fold[i] == f || s.treatment != arm || !observable_at(s, horizon)) continue;
        const double k = censoring_weight_base(censor_curves, s, horizon);
        if (k < config.censor_floor) continue;
        rows.push_back(i);
        y.push_back(horizon_outcome(s.time_months, horizon, estimand));
        w.push_back(1.0 / k);
      }
      if (rows.empty())
        throw Error(ErrorCode::DegenerateArm, "arm " + std::to_string(arm) +
                                                  " has no observable subjects in a nuisance fold at horizon " +
                                                  detail::format_double(horizon));
      auto& target = arm ? out.m1 : out.m0;
      ForestParams p = config.nuisance;
      p.seed = detail::derive_seed(seed, detail::Stream::Nuisance, f * 2 + static_cast<std::size_t>(arm));
      p.threads = config.threads;
      if (rows.size() < 4 * p.min_node) {
        double sw = 0, sy = 0;
        for (std::size_t k = 0; k < rows.size(); ++k) {
          sw += w[k];
          sy += w[k] * y[k];
        }
        for (auto i : predict_rows) target[i] = sy / sw;
        continue;
      }
      const auto forest = RegressionForest::fit(rows_matrix(cohort, rows), y, p, w);
      const auto pred = forest.predict_mean(xp, config.threads);
      for (std::size_t k = 0; k < predict_rows.size(); ++k) target[predict_rows[k]] = pred[k];
    }
  }
  return out;
}

struct HorizonEstimate {
  double horizon = 0.0;
  Estimand estimand = Estimand::SP;
  double ate = 0.0;
  double ate_se = 0.0;
  double ate_se_forest = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_valid = 0;
  std::size_t n_below_floor = 0;
  std::size_t n_trimmed = 0;
  std::vector<double> cate;
  std::vector<double> cate_var;
  std::vector<double> importance;
  TuningResult tuning;
  PseudoOutcomeSet pseudo;
  std::shared_ptr<RegressionForest> forest;  // set when keep_forest
};

// Mean and SD/sqrt(n) of the valid pseudo-outcomes.
inline std::pair<double, double> aipw_mean_se(const PseudoOutcomeSet& pso) {
  const auto g = pso.valid_gamma();
  const double n = static_cast<double>(g.size());
  double s = 0;
  for (double v : g) s += v;
  const double mean = s / n;
  double ss = 0;
  for (double v : g) ss += (v - mean) * (v - mean);
  const double sd = g.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  return {mean, sd / std::sqrt(n)};
}

// CATE forest on the valid pseudo-outcomes of `train_rows` (all rows when
// empty), predicted for every subject in the cohort.
inline void fit_cate(HorizonEstimate& est, const SurvivalCohort& cohort, const std::vector<std::size_t>& train_rows,
                     const EstimationConfig& config, std::uint64_t seed) {
  std::vector<std::size_t> rows;
  if (train_rows.empty()) {
    for (std::size_t i = 0; i < cohort.size(); ++i)
      if (est.pseudo.valid[i]) rows.push_back(i);
  } else {
    for (auto i : train_rows)
      if (est.pseudo.valid.at(i)) rows.push_back(i);
  }
  std::vector<double> y;
  for (auto i : rows) y.push_back(est.pseudo.gamma[i]);
  const Eigen::MatrixXd x = rows_matrix(cohort, rows);
  ForestParams p = config.forest;
  p.seed = seed;
  p.threads = config.threads;
  if (config.tune) {
    est.tuning = tune_forest(x, y, p, config.tuning);
    p.min_node = est.tuning.min_node;
    p.subsample = est.tuning.subsample;
  } else {
    est.tuning.min_node = p.min_node;
    est.tuning.subsample = p.subsample;
  }
  auto forest = std::make_shared<RegressionForest>(RegressionForest::fit(x, y, p));
  std::vector<std::size_t> all(cohort.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const Eigen::MatrixXd xall = rows_matrix(cohort, all);
  auto pred = forest->predict(xall, config.threads);
  est.cate = std::move(pred.mean);
  est.cate_var = std::move(pred.variance);
  const double v = forest->average_prediction_variance(xall);
  est.ate_se_forest = std::isnan(v) ? v : std::sqrt(v);
  est.importance = forest->importance();
  if (config.keep_forest) est.forest = std::move(forest);
}

inline HorizonEstimate estimate_horizon(const SurvivalCohort& cohort, const std::vector<double>& scores,
                                        double horizon, Estimand estimand, const EstimationConfig& config,
                                        const std::vector<std::size_t>& train_rows = {},
                                        const std::vector<StepFunction>* censor_curves = nullptr) {
  std::vector<StepFunction> own_curves;
  if (!censor_curves) {
    own_curves = censoring_survival(cohort, config.conditioning);
    censor_curves = &own_curves;
  }
  const auto seed = horizon_seed(config.seed, horizon, estimand);
  const auto nuis = cross_fit_outcomes(cohort, horizon, estimand, *censor_curves, config, seed);
  HorizonEstimate est;
  est.horizon = horizon;
  est.estimand = estimand;
  est.pseudo = pseudo_outcomes(cohort, scores, horizon, estimand, *censor_curves, nuis.m0, nuis.m1,
                               config.censor_floor);
  std::tie(est.ate, est.ate_se) = aipw_mean_se(est.pseudo);
  est.n_valid = est.pseudo.n_valid;
  est.n_below_floor = est.pseudo.n_below_floor;
  fit_cate(est, cohort, train_rows, config, detail::derive_seed(seed, detail::Stream::Tree, 0));
  return est;
}

inline std::vector<HorizonEstimate> estimate_horizons(const SurvivalCohort& cohort, const std::vector<double>& scores,
                                                      const HorizonSpec& spec, const EstimationConfig& config,
                                                      const std::vector<std::size_t>& train_rows = {}) {
  spec.validate();
  const auto curves = censoring_survival(cohort, config.conditioning);
  std::vector<HorizonEstimate> out;
  for (double h : spec.horizons)
    out.push_back(estimate_horizon(cohort, scores, h, spec.estimand, config, train_rows, &curves));
  return out;
}

// One row per horizon: horizon, estimand, ate, se, n_valid, n_trimmed.
inline std::string horizon_sweep_csv(const std::vector<HorizonEstimate>& estimates) {
  std::ostringstream out;
  out << "horizon,estimand,ate,se,n_valid,n_trimmed\n";
  for (const auto& e : estimates)
    out << detail::format_double(e.horizon) << ',' << to_string(e.estimand) << ',' << detail::format_double(e.ate)
        << ',' << detail::format_double(e.ate_se) << ',' << e.n_valid << ',' << e.n_trimmed << '\n';
  return out.str();
}

inline std::string cate_csv(const HorizonEstimate& est, const SurvivalCohort& cohort) {
  std::ostringstream out;
  out << "id,cate,cate_var,pseudo_outcome,valid\n";
  for (std::size_t i = 0; i < cohort.size(); ++i)
    out << detail::csv_escape(cohort.subjects[i].id) << ',' << detail::format_double(est.cate[i]) << ','
        << detail::format_double(est.cate_var[i]) << ','
        << (est.pseudo.valid[i] ? detail::format_double(est.pseudo.gamma[i]) : std::string("NA")) << ','
        << static_cast<int>(est.pseudo.valid[i]) << '\n';
  return out.str();
}

// Side-by-side table with one row per horizon: horizon, ate_sp, se_sp,
// ate_rmst, se_rmst. Either series may be empty.
inline std::string effect_table_csv(const std::vector<HorizonEstimate>& sp, const std::vector<HorizonEstimate>& rmst) {
  std::ostringstream out;
  out << "horizon,ate_sp,se_sp,ate_rmst,se_rmst\n";
  const std::size_t n = std::max(sp.size(), rmst.size());
  for (std::size_t k = 0; k < n; ++k) {
    const double h = k < sp.size() ? sp[k].horizon : rmst[k].horizon;
    out << detail::format_double(h) << ',';
    if (k < sp.size()) out << detail::format_double(sp[k].ate) << ',' << detail::format_double(sp[k].ate_se);
    else out << "NA,NA";
    out << ',';
    if (k < rmst.size()) out << detail::format_double(rmst[k].ate) << ',' << detail::format_double(rmst[k].ate_se);
    else out << "NA,NA";
    out << '\n';
  }
  return out.str();
}

}  // namespace cast
