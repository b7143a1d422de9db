#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "cast/cohort.hpp"
#include "cast/config.hpp"
#include "cast/detail/rng.hpp"
#include "cast/detail/text.hpp"
#include "cast/error.hpp"

namespace cast {

// ---------------------------------------------------------------------------
// Biologically effective dose

enum class BedModel { DoseIndependent, DoseDependent };

struct BedParams {
  double alpha = 0.2;        // per Gy
  double alpha_beta = 10.0;  // Gy
  double onset_days = 21.0;  // repopulation kick-off
  // Dose-equivalent loss per day beyond onset: ln 2 / (alpha * Tpot), Tpot = 3.5 d.
  double repopulation = std::log(2.0) / (0.2 * 3.5);
  // Dose-dependent variant scales the loss by dose_per_fraction / reference.
  double reference_dose = 2.0;
  BedModel model = BedModel::DoseIndependent;
};

inline double bed(double dose_per_fraction, double n_fractions, double duration_days, const BedParams& p = {}) {
  if (!(dose_per_fraction > 0) || !(n_fractions > 0) || !(duration_days > 0))
    throw Error(ErrorCode::NonPositiveDose, "dose, fractions and duration must be positive");
  if (!(p.alpha > 0) || !(p.alpha_beta > 0) || !(p.onset_days > 0) || p.repopulation < 0 || !(p.reference_dose > 0))
    throw Error(ErrorCode::ConfigError, "BED parameters must be positive");
  const double lq = n_fractions * dose_per_fraction * (1 + dose_per_fraction / p.alpha_beta);
  double rate = p.repopulation;
  if (p.model == BedModel::DoseDependent) rate *= dose_per_fraction / p.reference_dose;
  return lq - std::max(0.0, duration_days - p.onset_days) * rate;
}

// ---------------------------------------------------------------------------
// Scenario

enum class EffectShape { Quadratic, Piecewise, Null };

inline EffectShape parse_effect_shape(const std::string& s) {
  if (s == "quadratic") return EffectShape::Quadratic;
  if (s == "piecewise") return EffectShape::Piecewise;
  if (s == "null") return EffectShape::Null;
  throw Error(ErrorCode::ConfigError, "unknown effect shape '" + s + "'");
}

inline std::string to_string(EffectShape s) {
  switch (s) {
    case EffectShape::Quadratic: return "quadratic";
    case EffectShape::Piecewise: return "piecewise";
    case EffectShape::Null: return "null";
  }
  return "?";
}

// Linear predictor terms shared by the treatment and hazard models. Each
// coefficient multiplies a centered, scaled covariate.
struct RiskCoefficients {
  double age = 0;       // per 10 years from 60
  double male = 0;
  double stage = 0;     // per stage from 2.5
  double hpv = 0;       // HPV positive
  double pack = 0;      // per 15 pack-years from 20
};

struct ScenarioConfig {
  std::size_t n = 4000;
  std::uint64_t seed = 1;

  // Covariate distributions.
  double age_mean = 60, age_sd = 10;
  double male_rate = 0.485;
  std::vector<double> stage_probs{0.15, 0.2, 0.25, 0.4};
  std::vector<double> hpv_probs{0.55, 0.33, 0.12};  // positive, negative, unknown
  double never_smoker = 0.2, pack_median = 25, pack_sigma = 0.6;
  std::vector<double> site_probs{0.6, 0.22, 0.09, 0.09};
  BedParams bed_params;

  // Treatment model: logit e(x) = intercept + terms.
  double treat_intercept = -0.23;
  RiskCoefficients treat{-0.1, 0.0, 0.5, -0.4, 0.0};

  // Control hazard per month: clamp(base * exp(terms), min, max).
  double base_hazard = 0.03;
  RiskCoefficients hazard{0.2, 0.1, 0.15, -0.4, 0.1};
  double hazard_min = 0.012, hazard_max = 0.07;

  // Survival-probability effect tau(x, t) = a(x) q(t); q peaks at 1 at `peak`
  // and returns to 0 at twice the peak.
  EffectShape shape = EffectShape::Quadratic;
  double peak = 50;
  double amplitude = 0.15;
  RiskCoefficients modifier{-0.02, 0.0, 0.0, 0.06, -0.05};
  double amplitude_min = 0.0, amplitude_max = 0.3;

  // Censoring: administrative follow-up uniform on [min, max] plus
  // exponential dropout.
  double admin_min = 36, admin_max = 180;
  double dropout = 0.0027;

  std::vector<double> horizons{12, 24, 36, 48, 60, 72, 84, 96, 108, 120};

  static ScenarioConfig from_config(const KeyValueConfig& c) {
    ScenarioConfig s;
    s.n = static_cast<std::size_t>(c.get_int("n", static_cast<long long>(s.n)));
    s.seed = static_cast<std::uint64_t>(c.get_int("seed", static_cast<long long>(s.seed)));
    s.age_mean = c.get_double("covariates.age_mean", s.age_mean);
    s.age_sd = c.get_double("covariates.age_sd", s.age_sd);
    s.male_rate = c.get_double("covariates.male_rate", s.male_rate);
    s.stage_probs = c.get_list("covariates.stage_probs", s.stage_probs);
    s.hpv_probs = c.get_list("covariates.hpv_probs", s.hpv_probs);
    s.never_smoker = c.get_double("covariates.never_smoker", s.never_smoker);
    s.pack_median = c.get_double("covariates.pack_median", s.pack_median);
    s.pack_sigma = c.get_double("covariates.pack_sigma", s.pack_sigma);
    s.site_probs = c.get_list("covariates.site_probs", s.site_probs);
    s.bed_params.alpha = c.get_double("bed.alpha", s.bed_params.alpha);
    s.bed_params.alpha_beta = c.get_double("bed.alpha_beta", s.bed_params.alpha_beta);
    s.bed_params.onset_days = c.get_double("bed.onset_days", s.bed_params.onset_days);
    s.bed_params.repopulation = c.get_double("bed.repopulation", s.bed_params.repopulation);
    s.bed_params.reference_dose = c.get_double("bed.reference_dose", s.bed_params.reference_dose);
    auto read_terms = [&](const std::string& sec, RiskCoefficients& r) {
      r.age = c.get_double(sec + ".age", r.age);
      r.male = c.get_double(sec + ".male", r.male);
      r.stage = c.get_double(sec + ".stage", r.stage);
      r.hpv = c.get_double(sec + ".hpv", r.hpv);
      r.pack = c.get_double(sec + ".pack_years", r.pack);
    };
    s.treat_intercept = c.get_double("treatment.intercept", s.treat_intercept);
    read_terms("treatment", s.treat);
    s.base_hazard = c.get_double("hazard.base", s.base_hazard);
    s.hazard_min = c.get_double("hazard.min", s.hazard_min);
    s.hazard_max = c.get_double("hazard.max", s.hazard_max);
    read_terms("hazard", s.hazard);
    s.shape = parse_effect_shape(c.get_string("effect.shape", to_string(s.shape)));
    s.peak = c.get_double("effect.peak", s.peak);
    s.amplitude = c.get_double("effect.amplitude", s.amplitude);
    s.amplitude_min = c.get_double("effect.amplitude_min", s.amplitude_min);
    s.amplitude_max = c.get_double("effect.amplitude_max", s.amplitude_max);
    read_terms("effect", s.modifier);
    s.admin_min = c.get_double("censoring.admin_min", s.admin_min);
    s.admin_max = c.get_double("censoring.admin_max", s.admin_max);
    s.dropout = c.get_double("censoring.dropout", s.dropout);
    s.horizons = c.get_list("horizons", s.horizons);
    s.validate();
    return s;
  }

  static ScenarioConfig load(const std::string& path) { return from_config(KeyValueConfig::load(path)); }

  void validate() const {
    auto probs_ok = [](const std::vector<double>& p) {
      double s = 0;
      for (double v : p) {
        if (v < 0) return false;
        s += v;
      }
      return !p.empty() && std::abs(s - 1) < 1e-9;
    };
    if (n == 0) throw Error(ErrorCode::ConfigError, "n must be positive");
    if (!probs_ok(stage_probs) || !probs_ok(hpv_probs) || hpv_probs.size() != 3 || !probs_ok(site_probs) ||
        site_probs.size() != 4)
      throw Error(ErrorCode::ConfigError, "categorical probabilities must be non-negative and sum to 1");
    if (!(base_hazard > 0) || !(hazard_min > 0) || !(hazard_max >= hazard_min) || dropout < 0)
      throw Error(ErrorCode::ConfigError, "hazards must be positive");
    if (!(admin_max >= admin_min) || !(admin_min > 0)) throw Error(ErrorCode::ConfigError, "bad censoring window");
    if (!(peak > 0)) throw Error(ErrorCode::ConfigError, "effect peak must be positive");
    if (amplitude_min < -1 || amplitude_max > 1 || amplitude_min > amplitude_max)
      throw Error(ErrorCode::ConfigError, "effect amplitude bounds must lie in [-1, 1]");
  }
};

inline const std::vector<std::string>& site_levels() {
  static const std::vector<std::string> levels{"oropharynx", "larynx", "nasopharynx", "hypopharynx"};
  return levels;
}

inline const std::vector<std::string>& hpv_levels() {
  static const std::vector<std::string> levels{"positive", "negative", "unknown"};
  return levels;
}

inline SchemaConfig synth_schema() {
  SchemaConfig s;
  s.columns = {{"age", SourceKind::Continuous},       {"male", SourceKind::Binary},
               {"tnm_stage", SourceKind::Continuous}, {"hpv", SourceKind::Categorical},
               {"pack_years", SourceKind::Continuous}, {"site", SourceKind::Categorical},
               {"bed_di", SourceKind::Continuous},    {"bed_dd", SourceKind::Continuous}};
  return s;
}

// Effect shape q(t) with q(peak) = 1 and q = 0 outside (0, 2 peak).
inline double effect_shape(EffectShape shape, double peak, double t) {
  if (shape == EffectShape::Null || t <= 0 || t >= 2 * peak) return 0.0;
  if (shape == EffectShape::Quadratic) return t * (2 * peak - t) / (peak * peak);
  return t <= peak ? t / peak : (2 * peak - t) / peak;
}

inline double effect_shape_slope(EffectShape shape, double peak, double t) {
  if (shape == EffectShape::Null || t < 0 || t >= 2 * peak) return 0.0;
  if (shape == EffectShape::Quadratic) return 2 * (peak - t) / (peak * peak);
  return t < peak ? 1 / peak : -1 / peak;
}

// Integral of q over [0, h].
inline double effect_shape_integral(EffectShape shape, double peak, double h) {
  if (shape == EffectShape::Null || h <= 0) return 0.0;
  h = std::min(h, 2 * peak);
  if (shape == EffectShape::Quadratic) return (peak * h * h - h * h * h / 3) / (peak * peak);
  if (h <= peak) return h * h / (2 * peak);
  return peak / 2 + 2 * (h - peak) - (h * h - peak * peak) / (2 * peak);
}

struct SyntheticSubject {
  double age, male, stage, pack_years;
  std::size_t hpv, site;
  double dose_per_fraction, fractions, duration_days;
  double propensity, hazard, amplitude;
};

struct TruthRecord {
  std::vector<double> horizons;
  std::vector<double> propensity;
  std::vector<double> amplitude;
  std::vector<double> hazard;
  std::vector<double> ate_sp;
  std::vector<double> ate_rmst;
  EffectShape shape = EffectShape::Quadratic;
  double peak = 0;

  double tau_sp(std::size_t i, double t) const { return amplitude[i] * effect_shape(shape, peak, t); }
  double tau_rmst(std::size_t i, double h) const {
    return amplitude[i] * effect_shape_integral(shape, peak, h);
  }

  // Average true SP (or RMST) effect over a subset of subjects.
  double mean_effect(const std::vector<std::size_t>& rows, double h, bool rmst = false) const {
    double s = 0;
    for (auto i : rows) s += rmst ? tau_rmst(i, h) : tau_sp(i, h);
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
  }

  nlohmann::ordered_json to_json(const std::vector<std::string>& ids) const {
    nlohmann::ordered_json j;
    j["shape"] = to_string(shape);
    j["peak"] = peak;
    j["horizons"] = horizons;
    j["ate_sp"] = ate_sp;
    j["ate_rmst"] = ate_rmst;
    nlohmann::ordered_json subjects = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < propensity.size(); ++i)
      subjects.push_back({{"id", ids[i]}, {"propensity", propensity[i]}, {"hazard", hazard[i]},
                          {"amplitude", amplitude[i]}});
    j["subjects"] = subjects;
    return j;
  }
};

struct SyntheticData {
  SurvivalCohort cohort;  // raw scale, not standardized
  detail::CsvTable table;
  TruthRecord truth;
};

namespace detail {

inline std::size_t draw_category(Engine& rng, const std::vector<double>& probs) {
  const double u = uniform01(rng);
  double acc = 0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k];
    if (u < acc) return k;
  }
  return probs.size() - 1;
}

inline double linear_terms(const RiskCoefficients& c, const SyntheticSubject& s) {
  return c.age * (s.age - 60) / 10 + c.male * s.male + c.stage * (s.stage - 2.5) + c.hpv * (s.hpv == 0 ? 1.0 : 0.0) +
         c.pack * (s.pack_years - 20) / 15;
}

inline double treated_survival(const ScenarioConfig& c, double hazard, double amplitude, double t) {
  return std::exp(-hazard * t) + amplitude * effect_shape(c.shape, c.peak, t);
}

// S1 = S0 + a q must stay in [0, 1] and be non-increasing on (0, 2 peak).
inline bool effect_feasible(const ScenarioConfig& c, double hazard, double amplitude) {
  if (c.shape == EffectShape::Null || amplitude == 0) return true;
  const double end = 2 * c.peak;
  const int steps = 2000;
  for (int k = 0; k <= steps; ++k) {
    const double t = end * k / steps;
    const double s1 = treated_survival(c, hazard, amplitude, t);
    if (s1 < -1e-12 || s1 > 1 + 1e-12) return false;
    if (-hazard * std::exp(-hazard * t) + amplitude * effect_shape_slope(c.shape, c.peak, t) > 1e-12) return false;
  }
  return true;
}

// Inverse of the treated survival curve at u by bisection.
inline double inverse_survival(const ScenarioConfig& c, double hazard, double amplitude, double u) {
  double lo = 0, hi = std::max(2 * c.peak, -std::log(u) / hazard);
  for (int it = 0; it < 200 && hi - lo > 1e-12 * std::max(1.0, hi); ++it) {
    const double mid = 0.5 * (lo + hi);
    (treated_survival(c, hazard, amplitude, mid) > u ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Draws a cohort with known potential-outcome survival curves. Control time
// is exponential with a subject hazard; treated survival is the control
// curve plus tau(x, t), so the survival-probability effect is exact.
inline SyntheticData generate(const ScenarioConfig& config) {
  config.validate();
  auto rng = detail::make_engine(config.seed, detail::Stream::Synth);
  static const double doses[] = {2.0, 2.12, 2.4};
  static const double fractions[] = {35, 33, 25};
  const std::vector<double> schedule_probs{0.6, 0.25, 0.15};

  SyntheticData out;
  auto& truth = out.truth;
  truth.horizons = config.horizons;
  truth.shape = config.shape;
  truth.peak = config.peak;
  auto& table = out.table;
  table.header = {kIdColumn, kTimeColumn, kEventColumn, kTreatmentColumn, "age", "male", "tnm_stage", "hpv",
                  "pack_years", "site", "bed_di", "bed_dd"};
  BedParams di = config.bed_params, dd = config.bed_params;
  di.model = BedModel::DoseIndependent;
  dd.model = BedModel::DoseDependent;

  for (std::size_t i = 0; i < config.n; ++i) {
    SyntheticSubject s{};
    s.age = std::clamp(config.age_mean + config.age_sd * detail::standard_normal(rng), 25.0, 95.0);
    s.male = detail::bernoulli(rng, config.male_rate) ? 1.0 : 0.0;
    s.stage = 1.0 + static_cast<double>(detail::draw_category(rng, config.stage_probs));
    s.hpv = detail::draw_category(rng, config.hpv_probs);
    s.pack_years = detail::bernoulli(rng, config.never_smoker)
                       ? 0.0
                       : config.pack_median * std::exp(config.pack_sigma * detail::standard_normal(rng));
    s.site = detail::draw_category(rng, config.site_probs);
    const auto sched = detail::draw_category(rng, schedule_probs);
    s.dose_per_fraction = doses[sched];
    s.fractions = fractions[sched];
    s.duration_days = std::floor((s.fractions - 1) / 5) * 7 + std::fmod(s.fractions - 1, 5) + 1 +
                      static_cast<double>(detail::uniform_index(rng, 8));

    s.propensity = 1 / (1 + std::exp(-(config.treat_intercept + detail::linear_terms(config.treat, s))));
    s.hazard = std::clamp(config.base_hazard * std::exp(detail::linear_terms(config.hazard, s)), config.hazard_min,
                          config.hazard_max);
    s.amplitude = config.shape == EffectShape::Null
                      ? 0.0
                      : std::clamp(config.amplitude + detail::linear_terms(config.modifier, s), config.amplitude_min,
                                   config.amplitude_max);
    if (!detail::effect_feasible(config, s.hazard, s.amplitude))
      throw Error(ErrorCode::InfeasibleEffect, "subject " + std::to_string(i + 1) +
                                                   ": effect pushes treated survival outside [0, 1] or makes it rise");

    const int w = detail::bernoulli(rng, s.propensity) ? 1 : 0;
    double u = detail::uniform01(rng);
    while (u <= 0) u = detail::uniform01(rng);
    const double t_event = w ? detail::inverse_survival(config, s.hazard, s.amplitude, u) : -std::log(u) / s.hazard;
    const double admin = config.admin_min + (config.admin_max - config.admin_min) * detail::uniform01(rng);
    double drop = std::numeric_limits<double>::infinity();
    if (config.dropout > 0) {
      double v = detail::uniform01(rng);
      while (v <= 0) v = detail::uniform01(rng);
      drop = -std::log(v) / config.dropout;
    }
    const double censor = std::min(admin, drop);
    const bool event = t_event <= censor;
    const double time = event ? t_event : censor;

    truth.propensity.push_back(s.propensity);
    truth.hazard.push_back(s.hazard);
    truth.amplitude.push_back(s.amplitude);
    table.rows.push_back({std::to_string(i + 1), detail::format_double(time), event ? "1" : "0", w ? "1" : "0",
                          detail::format_double(s.age), s.male > 0 ? "1" : "0", detail::format_double(s.stage),
                          hpv_levels()[s.hpv], detail::format_double(s.pack_years), site_levels()[s.site],
                          detail::format_double(bed(s.dose_per_fraction, s.fractions, s.duration_days, di)),
                          detail::format_double(bed(s.dose_per_fraction, s.fractions, s.duration_days, dd))});
  }

  std::vector<std::size_t> all(config.n);
  for (std::size_t i = 0; i < config.n; ++i) all[i] = i;
  for (double h : config.horizons) {
    truth.ate_sp.push_back(truth.mean_effect(all, h));
    truth.ate_rmst.push_back(truth.mean_effect(all, h, true));
  }
  out.cohort = encode_table(table, synth_schema());
  return out;
}

inline std::string cohort_table_csv(const detail::CsvTable& table) {
  std::string s;
  for (std::size_t j = 0; j < table.header.size(); ++j) s += (j ? "," : "") + detail::csv_escape(table.header[j]);
  s += '\n';
  for (const auto& row : table.rows) {
    for (std::size_t j = 0; j < row.size(); ++j) s += (j ? "," : "") + detail::csv_escape(row[j]);
    s += '\n';
  }
  return s;
}

}  // namespace cast
