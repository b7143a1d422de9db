#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cast/detail/rng.hpp"
#include "cast/pipeline.hpp"

namespace cast {

struct RefutationConfig {
  std::size_t repetitions = 20;
  double null_max_horizon = 60;  // dummy-outcome verdict covers h <= this
  double null_se_multiplier = 2.0;
  double negative_control_se_multiplier = 2.0;
  std::vector<double> strengths{0.1, 0.3, 0.5};
  double correlation_tolerance = 0.02;
  std::size_t noise_features = 5;
  double noise_se_fraction = 0.5;
  std::size_t noise_top_k = 5;
};

struct RefutationRow {
  double horizon = 0;
  std::string variant;
  std::size_t repetition = 0;
  double estimate = 0;
  double se = 0;
  double baseline = 0;
  double baseline_se = 0;
};

struct HorizonSummary {
  double horizon = 0;
  std::string variant;
  double mean = 0;
  double sd = 0;
  double max_abs_deviation = 0;
  bool pass = true;
};

struct RefutationReport {
  std::string kind;
  Estimand estimand = Estimand::SP;
  std::vector<RefutationRow> rows;
  std::vector<HorizonSummary> summary;
  std::vector<std::uint64_t> seeds;
  nlohmann::ordered_json thresholds = nlohmann::ordered_json::object();
  nlohmann::ordered_json details = nlohmann::ordered_json::object();
  bool pass = true;

  std::vector<double> estimates(double horizon, const std::string& variant = "") const {
    std::vector<double> out;
    for (const auto& r : rows)
      if (r.horizon == horizon && (variant.empty() || r.variant == variant)) out.push_back(r.estimate);
    return out;
  }

  const HorizonSummary* find(double horizon, const std::string& variant = "") const {
    for (const auto& s : summary)
      if (s.horizon == horizon && (variant.empty() || s.variant == variant)) return &s;
    return nullptr;
  }

  // Boxplot-ready rows.
  std::string to_csv() const {
    std::ostringstream out;
    out << "horizon,variant,repetition,estimate,se,baseline,baseline_se\n";
    for (const auto& r : rows)
      out << detail::format_double(r.horizon) << ',' << detail::csv_escape(r.variant) << ',' << r.repetition << ','
          << detail::format_double(r.estimate) << ',' << detail::format_double(r.se) << ','
          << detail::format_double(r.baseline) << ',' << detail::format_double(r.baseline_se) << '\n';
    return out.str();
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["test"] = kind;
    j["estimand"] = to_string(estimand);
    j["pass"] = pass;
    j["thresholds"] = thresholds;
    j["seeds"] = seeds;
    nlohmann::ordered_json s = nlohmann::ordered_json::array();
    for (const auto& h : summary)
      s.push_back({{"horizon", h.horizon},
                   {"variant", h.variant},
                   {"mean", h.mean},
                   {"sd", h.sd},
                   {"max_abs_deviation", h.max_abs_deviation},
                   {"pass", h.pass}});
    j["summary"] = s;
    j["details"] = details;
    return j;
  }
};

namespace detail {

inline PipelineConfig single_estimand(PipelineConfig c, Estimand e) {
  c.estimands = {e};
  return c;
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline HorizonSummary summarize(double horizon, const std::string& variant, const std::vector<double>& values,
                                double center) {
  HorizonSummary s;
  s.horizon = horizon;
  s.variant = variant;
  s.mean = values.empty() ? 0.0 : std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  s.sd = sample_sd(values);
  for (double v : values) s.max_abs_deviation = std::max(s.max_abs_deviation, std::abs(v - center));
  return s;
}

}  // namespace detail

// Treatment and (T, delta) pairs are permuted independently in every
// repetition and the whole pipeline is rerun with a repetition seed. The
// verdict asks each horizon up to `null_max_horizon` for a mean within
// multiplier * SD / sqrt(reps) of zero.
inline RefutationReport dummy_outcome_test(const SurvivalCohort& cohort, const PipelineConfig& config,
                                           const RefutationConfig& rc = {}, Estimand estimand = Estimand::SP) {
  RefutationReport rep;
  rep.kind = "dummy_outcome";
  rep.estimand = estimand;
  rep.thresholds = {{"repetitions", rc.repetitions}, {"max_horizon", rc.null_max_horizon},
                    {"se_multiplier", rc.null_se_multiplier}};
  const auto n = cohort.size();
  for (std::size_t r = 0; r < rc.repetitions; ++r) {
    auto rng = detail::make_engine(config.seed, detail::Stream::Refutation, r);
    const auto w_perm = detail::permutation(n, rng);
    const auto y_perm = detail::permutation(n, rng);
    SurvivalCohort shuffled = cohort;
    for (std::size_t i = 0; i < n; ++i) {
      shuffled.subjects[i].treatment = cohort.subjects[w_perm[i]].treatment;
      shuffled.subjects[i].time_months = cohort.subjects[y_perm[i]].time_months;
      shuffled.subjects[i].event = cohort.subjects[y_perm[i]].event;
    }
    auto pc = detail::single_estimand(config, estimand);
    pc.seed = detail::derive_seed(config.seed, detail::Stream::Refutation, r);
    rep.seeds.push_back(pc.seed);
    const auto result = run_pipeline(shuffled, pc);
    for (const auto& e : result.estimates(estimand))
      rep.rows.push_back({e.horizon, "shuffled", r, e.ate, e.ate_se, 0.0, 0.0});
  }
  for (double h : config.horizons.horizons) {
    auto s = detail::summarize(h, "shuffled", rep.estimates(h), 0.0);
    if (h <= rc.null_max_horizon)
      s.pass = std::abs(s.mean) <= rc.null_se_multiplier * s.sd / std::sqrt(static_cast<double>(rc.repetitions));
    rep.pass = rep.pass && s.pass;
    rep.summary.push_back(s);
  }
  if (!rep.summary.empty())
    rep.details["sd_first_le_last"] = rep.summary.front().sd <= rep.summary.back().sd;
  return rep;
}

// Reruns the pipeline with `treatment` substituted; passes when every
// horizon has |ate| < multiplier * se.
inline RefutationReport substituted_treatment_test(const SurvivalCohort& cohort, const std::vector<int>& treatment,
                                                   const PipelineConfig& config, const RefutationConfig& rc,
                                                   Estimand estimand) {
  if (treatment.size() != cohort.size()) throw Error(ErrorCode::DimensionMismatch, "treatment length mismatch");
  RefutationReport rep;
  rep.kind = "negative_control";
  rep.estimand = estimand;
  rep.thresholds = {{"se_multiplier", rc.negative_control_se_multiplier}};
  SurvivalCohort modified = cohort;
  for (std::size_t i = 0; i < cohort.size(); ++i) modified.subjects[i].treatment = treatment[i];
  rep.details["treated_rate"] = modified.treated_rate();
  rep.seeds.push_back(config.seed);
  const auto result = run_pipeline(modified, detail::single_estimand(config, estimand));
  for (const auto& e : result.estimates(estimand)) {
    rep.rows.push_back({e.horizon, "placebo", 0, e.ate, e.ate_se, 0.0, 0.0});
    auto s = detail::summarize(e.horizon, "placebo", {e.ate}, 0.0);
    s.pass = std::abs(e.ate) < rc.negative_control_se_multiplier * e.ate_se;
    rep.pass = rep.pass && s.pass;
    rep.summary.push_back(s);
  }
  return rep;
}

// Placebo treatment drawn Bernoulli(observed treated rate).
inline RefutationReport negative_control_test(const SurvivalCohort& cohort, const PipelineConfig& config,
                                              const RefutationConfig& rc = {}, Estimand estimand = Estimand::SP) {
  auto rng = detail::make_engine(config.seed, detail::Stream::Refutation, 1000);
  const double rate = cohort.treated_rate();
  std::vector<int> w(cohort.size());
  for (auto& v : w) v = detail::bernoulli(rng, rate) ? 1 : 0;
  return substituted_treatment_test(cohort, w, config, rc, estimand);
}

// Covariate with sample correlation exactly r to the treatment indicator:
// r * std(W) + sqrt(1 - r^2) * (noise residualized on W, standardized).
inline std::vector<double> correlated_covariate(const std::vector<int>& treatment, double r, std::uint64_t seed) {
  const auto n = treatment.size();
  if (!(std::abs(r) < 1)) throw Error(ErrorCode::CorrelationUnachievable, "target correlation must lie in (-1, 1)");
  std::vector<double> w(treatment.begin(), treatment.end());
  const double wm = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(n);
  double wss = 0;
  for (double& v : w) {
    v -= wm;
    wss += v * v;
  }
  if (n < 3 || !(wss > 0)) throw Error(ErrorCode::CorrelationUnachievable, "treatment indicator is constant");
  auto rng = detail::make_engine(seed, detail::Stream::Refutation, 2000);
  std::vector<double> e(n);
  for (auto& v : e) v = detail::standard_normal(rng);
  const double em = std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(n);
  double ew = 0;
  for (std::size_t i = 0; i < n; ++i) {
    e[i] -= em;
    ew += e[i] * w[i];
  }
  double ess = 0;
  for (std::size_t i = 0; i < n; ++i) {
    e[i] -= ew / wss * w[i];
    ess += e[i] * e[i];
  }
  if (!(ess > 0)) throw Error(ErrorCode::CorrelationUnachievable, "noise collapsed onto the treatment indicator");
  const double ws = std::sqrt(wss), es = std::sqrt(ess);
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = r * w[i] / ws + std::sqrt(1 - r * r) * e[i] / es;
  return z;
}

inline RefutationReport synthetic_confounder_test(const SurvivalCohort& cohort, const PipelineConfig& config,
                                                  const RefutationConfig& rc = {}, Estimand estimand = Estimand::SP) {
  RefutationReport rep;
  rep.kind = "synthetic_confounder";
  rep.estimand = estimand;
  rep.thresholds = {{"strengths", rc.strengths}, {"correlation_tolerance", rc.correlation_tolerance}};
  const auto pc = detail::single_estimand(config, estimand);
  rep.seeds.push_back(pc.seed);
  const auto base = run_pipeline(cohort, pc);
  const auto& base_est = base.estimates(estimand);
  const auto w = cohort.treatments();
  std::vector<double> wd(w.begin(), w.end());
  nlohmann::ordered_json realized = nlohmann::ordered_json::array();
  std::vector<double> max_delta;
  for (std::size_t k = 0; k < rc.strengths.size(); ++k) {
    const double r = rc.strengths[k];
    const auto z = correlated_covariate(w, r, detail::derive_seed(config.seed, detail::Stream::Refutation, 3000 + k));
    const double rz = pearson(z, wd);
    realized.push_back({{"strength", r}, {"correlation", rz}});
    if (std::abs(rz - r) > rc.correlation_tolerance)
      throw Error(ErrorCode::CorrelationUnachievable, "realized correlation misses its target");
    const auto result = run_pipeline(cohort.with_extra_column("synthetic_confounder", z), pc);
    const auto& est = result.estimates(estimand);
    const std::string variant = "r=" + detail::format_double(r);
    double worst = 0;
    for (std::size_t h = 0; h < est.size(); ++h) {
      rep.rows.push_back({est[h].horizon, variant, 0, est[h].ate, est[h].ate_se, base_est[h].ate, base_est[h].ate_se});
      auto s = detail::summarize(est[h].horizon, variant, {est[h].ate}, base_est[h].ate);
      worst = std::max(worst, s.max_abs_deviation);
      rep.summary.push_back(s);
    }
    max_delta.push_back(worst);
  }
  rep.details["realized"] = realized;
  rep.details["max_abs_delta"] = max_delta;
  // Verdict: the perturbation does not shrink as the strength grows from
  // the weakest to the strongest setting.
  rep.pass = max_delta.size() < 2 || max_delta.back() >= max_delta.front();
  return rep;
}

inline RefutationReport noise_feature_test(const SurvivalCohort& cohort, const PipelineConfig& config,
                                           const RefutationConfig& rc = {}, Estimand estimand = Estimand::SP) {
  RefutationReport rep;
  rep.kind = "noise_features";
  rep.estimand = estimand;
  rep.thresholds = {{"features", rc.noise_features}, {"se_fraction", rc.noise_se_fraction},
                    {"top_k", rc.noise_top_k}};
  const auto pc = detail::single_estimand(config, estimand);
  rep.seeds.push_back(pc.seed);
  const auto base = run_pipeline(cohort, pc);
  SurvivalCohort noisy = cohort;
  auto rng = detail::make_engine(config.seed, detail::Stream::Refutation, 4000);
  for (std::size_t k = 0; k < rc.noise_features; ++k) {
    std::vector<double> col(cohort.size());
    for (auto& v : col) v = detail::standard_normal(rng);
    noisy = noisy.with_extra_column("noise_" + std::to_string(k + 1), col);
  }
  const auto result = run_pipeline(noisy, pc);
  const auto& est = result.estimates(estimand);
  const auto& base_est = base.estimates(estimand);
  const auto& names = result.analysis.schema.names;
  nlohmann::ordered_json ranks = nlohmann::ordered_json::array();
  for (std::size_t h = 0; h < est.size(); ++h) {
    rep.rows.push_back({est[h].horizon, "noise", 0, est[h].ate, est[h].ate_se, base_est[h].ate, base_est[h].ate_se});
    auto s = detail::summarize(est[h].horizon, "noise", {est[h].ate}, base_est[h].ate);
    std::vector<std::size_t> order(est[h].importance.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](auto a, auto b) { return est[h].importance[a] > est[h].importance[b]; });
    std::vector<std::string> top;
    bool noise_in_top = false;
    for (std::size_t k = 0; k < std::min(rc.noise_top_k, order.size()); ++k) {
      top.push_back(names[order[k]]);
      if (names[order[k]].rfind("noise_", 0) == 0) noise_in_top = true;
    }
    ranks.push_back({{"horizon", est[h].horizon}, {"top", top}});
    s.pass = s.max_abs_deviation < rc.noise_se_fraction * base_est[h].ate_se && !noise_in_top;
    rep.pass = rep.pass && s.pass;
    rep.summary.push_back(s);
  }
  rep.details["top_features"] = ranks;
  return rep;
}

}  // namespace cast
