#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cast/cohort.hpp"
#include "cast/detail/text.hpp"
#include "cast/error.hpp"

namespace cast {

// Right-continuous step function on (0, inf). values[k] holds on
// [times[k], times[k+1]); before times[0] the function equals `initial`.
// Beyond the last observed time the last value is carried forward.
struct StepFunction {
  enum class Kind { Survival, CumulativeHazard };

  Kind kind = Kind::Survival;
  std::vector<double> times;
  std::vector<double> values;
  double initial = 1.0;
  double last_observed_time = 0.0;

  double operator()(double t) const {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return initial;
    return values[static_cast<std::size_t>(it - times.begin()) - 1];
  }

  // Value just before t, i.e. lim_{s -> t-} f(s).
  double left_limit(double t) const {
    auto it = std::lower_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return initial;
    return values[static_cast<std::size_t>(it - times.begin()) - 1];
  }

  bool extrapolated(double t) const { return t > last_observed_time; }

  bool is_valid() const {
    if (times.size() != values.size()) return false;
    for (std::size_t k = 1; k < times.size(); ++k)
      if (!(times[k] > times[k - 1])) return false;
    if (!times.empty() && !(times.front() > 0.0)) return false;
    double prev = initial;
    if (kind == Kind::Survival) {
      if (initial != 1.0) return false;
      for (double v : values) {
        if (v < 0.0 || v > 1.0 || v > prev) return false;
        prev = v;
      }
    } else {
      if (initial != 0.0) return false;
      for (double v : values) {
        if (v < prev) return false;
        prev = v;
      }
    }
    return true;
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "t,value\n0," << detail::format_double(initial) << '\n';
    for (std::size_t k = 0; k < times.size(); ++k)
      out << detail::format_double(times[k]) << ',' << detail::format_double(values[k]) << '\n';
    return out.str();
  }
};

namespace detail {

struct RiskTable {
  std::vector<double> times;       // distinct observed times, ascending
  std::vector<double> deaths;      // events at each time
  std::vector<double> at_risk;     // number with T >= time
  double last_time = 0.0;
};

inline RiskTable risk_table(std::span<const double> times, std::span<const int> events) {
  if (times.size() != events.size())
    throw Error(ErrorCode::DimensionMismatch, "times and events differ in length");
  if (times.empty()) throw Error(ErrorCode::EmptyInput, "survival estimator on empty input");
  std::vector<std::size_t> order(times.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return times[a] < times[b]; });
  RiskTable table;
  double remaining = static_cast<double>(times.size());
  for (std::size_t k = 0; k < order.size();) {
    const double t = times[order[k]];
    double d = 0, c = 0;
    while (k < order.size() && times[order[k]] == t) {
      (events[order[k]] ? d : c) += 1.0;
      ++k;
    }
    table.times.push_back(t);
    table.deaths.push_back(d);
    table.at_risk.push_back(remaining);
    remaining -= d + c;
  }
  table.last_time = table.times.back();
  return table;
}

}  // namespace detail

// Product-limit estimator. Deaths at a tied time are processed before
// censorings at that time, so censored subjects count as at risk.
inline StepFunction kaplan_meier(std::span<const double> times, std::span<const int> events) {
  const auto table = detail::risk_table(times, events);
  StepFunction s;
  s.kind = StepFunction::Kind::Survival;
  s.initial = 1.0;
  s.last_observed_time = table.last_time;
  double surv = 1.0;
  for (std::size_t k = 0; k < table.times.size(); ++k) {
    if (table.deaths[k] == 0) continue;
    surv *= 1.0 - table.deaths[k] / table.at_risk[k];
    s.times.push_back(table.times[k]);
    s.values.push_back(surv);
  }
  return s;
}

// H(t) = sum_{t_j <= t} d_j / n_j.
inline StepFunction nelson_aalen(std::span<const double> times, std::span<const int> events) {
  const auto table = detail::risk_table(times, events);
  StepFunction h;
  h.kind = StepFunction::Kind::CumulativeHazard;
  h.initial = 0.0;
  h.last_observed_time = table.last_time;
  double cum = 0.0;
  for (std::size_t k = 0; k < table.times.size(); ++k) {
    if (table.deaths[k] == 0) continue;
    cum += table.deaths[k] / table.at_risk[k];
    h.times.push_back(table.times[k]);
    h.values.push_back(cum);
  }
  return h;
}

// Exact area under a survival step function on [0, horizon].
inline double rmst(const StepFunction& curve, double horizon) {
  if (curve.kind != StepFunction::Kind::Survival || curve.initial != 1.0)
    throw Error(ErrorCode::NonSurvivalCurve, "rmst requires a survival curve");
  if (!(horizon > 0.0)) throw Error(ErrorCode::ConfigError, "rmst horizon must be positive");
  double area = 0.0;
  double prev_t = 0.0;
  double prev_v = curve.initial;
  for (std::size_t k = 0; k < curve.times.size() && curve.times[k] < horizon; ++k) {
    area += (curve.times[k] - prev_t) * prev_v;
    prev_t = curve.times[k];
    prev_v = curve.values[k];
  }
  area += (horizon - prev_t) * prev_v;
  return area;
}

enum class CensoringConditioning { None, ByTreatment };

// Kaplan-Meier of the censoring distribution (event := 1 - delta). With
// ByTreatment the result holds one curve per arm, indexed by treatment value;
// with None a single pooled curve.
inline std::vector<StepFunction> censoring_survival(const SurvivalCohort& cohort,
                                                    CensoringConditioning conditioning) {
  if (cohort.size() == 0) throw Error(ErrorCode::EmptyInput, "censoring_survival on empty cohort");
  auto fit = [](const std::vector<const SubjectRecord*>& group) {
    std::vector<double> t;
    std::vector<int> c;
    for (const auto* s : group) {
      t.push_back(s->time_months);
      c.push_back(1 - s->event);
    }
    return kaplan_meier(t, c);
  };
  if (conditioning == CensoringConditioning::None) {
    std::vector<const SubjectRecord*> all;
    for (const auto& s : cohort.subjects) all.push_back(&s);
    return {fit(all)};
  }
  std::vector<const SubjectRecord*> arms[2];
  for (const auto& s : cohort.subjects) arms[s.treatment].push_back(&s);
  for (int w = 0; w < 2; ++w)
    if (arms[w].empty())
      throw Error(ErrorCode::EmptyGroup, "treatment arm " + std::to_string(w) + " has no subjects");
  return {fit(arms[0]), fit(arms[1])};
}

}  // namespace cast
