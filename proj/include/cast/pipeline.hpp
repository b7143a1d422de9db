#pragma once

#include <string>
#include <vector>

#include "cast/cohort.hpp"
#include "cast/forest.hpp"
#include "cast/propensity.hpp"
#include "cast/survival.hpp"

namespace cast {

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  double train_fraction = 0.75;
  double trim_low = 0.10;
  double trim_high = 0.90;
  PropensityConfig propensity;
  EstimationConfig estimation;
  HorizonSpec horizons;
  std::vector<Estimand> estimands{Estimand::SP, Estimand::RMST};

  // Seeds and thread counts pushed down into the stage configs.
  PropensityConfig resolved_propensity() const {
    auto p = propensity;
    p.seed = detail::derive_seed(seed, detail::Stream::Folds, 0);
    p.threads = threads;
    return p;
  }

  EstimationConfig resolved_estimation() const {
    auto e = estimation;
    e.seed = seed;
    e.threads = threads;
    return e;
  }
};

struct PipelineResult {
  SplitAssignment split;
  ColumnSchema stats;
  PropensityModel propensity;
  std::vector<double> scores;  // every input subject
  TrimResult trim;
  SurvivalCohort analysis;     // standardized, trimmed
  std::vector<double> analysis_scores;
  std::vector<std::size_t> analysis_train;  // rows of `analysis` in the training part
  std::vector<HorizonEstimate> sp;
  std::vector<HorizonEstimate> rmst;

  const std::vector<HorizonEstimate>& estimates(Estimand e) const { return e == Estimand::SP ? sp : rmst; }
};

// Split, standardize with training statistics, fit propensities on the
// training part and trim every subject on its score. Leaves the horizon
// sweeps empty.
inline PipelineResult prepare_pipeline(const SurvivalCohort& raw, const PipelineConfig& config) {
  if (raw.standardized) throw Error(ErrorCode::ConfigError, "pipeline expects an unstandardized cohort");
  config.horizons.validate();
  PipelineResult r;
  r.split = stratified_split(raw, config.train_fraction, config.seed);
  r.stats = standardization_stats(raw.subset(r.split.train));
  const auto cohort = apply_standardization(raw, r.stats);
  r.propensity = fit_elastic_net(cohort.subset(r.split.train), config.resolved_propensity());
  r.scores = predict_scores(r.propensity, cohort);
  r.trim = trim(r.scores, config.trim_low, config.trim_high);
  r.analysis = cohort.subset(r.trim.kept);
  std::vector<bool> is_train(raw.size(), false);
  for (auto i : r.split.train) is_train[i] = true;
  for (std::size_t k = 0; k < r.trim.kept.size(); ++k) {
    r.analysis_scores.push_back(r.scores[r.trim.kept[k]]);
    if (is_train[r.trim.kept[k]]) r.analysis_train.push_back(k);
  }
  return r;
}

// Full pipeline. ATEs average over all retained subjects; CATE forests
// train on retained training subjects.
inline PipelineResult run_pipeline(const SurvivalCohort& raw, const PipelineConfig& config) {
  auto r = prepare_pipeline(raw, config);
  const auto est = config.resolved_estimation();
  for (auto e : config.estimands) {
    HorizonSpec spec = config.horizons;
    spec.estimand = e;
    auto sweep = estimate_horizons(r.analysis, r.analysis_scores, spec, est, r.analysis_train);
    for (auto& h : sweep) h.n_trimmed = r.trim.trimmed.size();
    (e == Estimand::SP ? r.sp : r.rmst) = std::move(sweep);
  }
  return r;
}

inline std::string propensity_scores_csv(const SurvivalCohort& cohort, const PipelineResult& r) {
  std::vector<bool> kept(cohort.size(), false), train(cohort.size(), false);
  for (auto i : r.trim.kept) kept[i] = true;
  for (auto i : r.split.train) train[i] = true;
  std::string s = "id,treatment,score,partition,kept\n";
  for (std::size_t i = 0; i < cohort.size(); ++i)
    s += detail::csv_escape(cohort.subjects[i].id) + ',' + std::to_string(cohort.subjects[i].treatment) + ',' +
         detail::format_double(r.scores[i]) + ',' + (train[i] ? "train" : "test") + ',' + (kept[i] ? "1" : "0") +
         '\n';
  return s;
}

inline std::string propensity_coefficients_csv(const PropensityModel& m) {
  std::string s = "term,coefficient\n(intercept)," + detail::format_double(m.intercept) + '\n';
  for (std::size_t j = 0; j < m.design.names.size(); ++j)
    s += detail::csv_escape(m.design.names[j]) + ',' +
         detail::format_double(m.coefficients[static_cast<Eigen::Index>(j)]) + '\n';
  return s;
}

}  // namespace cast
