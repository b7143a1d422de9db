#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cast/detail/text.hpp"
#include "cast/error.hpp"

namespace cast {

// Horizon-wise effect estimates fed to the trajectory fits.
struct EffectSeries {
  std::vector<double> horizons;
  std::vector<double> effects;
  std::vector<double> ses;
  std::string estimand = "sp";

  std::size_t size() const { return horizons.size(); }

  void validate() const {
    if (effects.size() != horizons.size() || ses.size() != horizons.size())
      throw Error(ErrorCode::DimensionMismatch, "horizons, effects and SEs differ in length");
    for (std::size_t k = 0; k < size(); ++k) {
      if (!std::isfinite(horizons[k]) || !std::isfinite(effects[k]))
        throw Error(ErrorCode::ConfigError, "non-finite value in effect series");
      if (!(ses[k] > 0)) throw Error(ErrorCode::ConfigError, "standard errors must be positive");
    }
  }

  std::vector<double> weights() const {
    std::vector<double> w(size());
    for (std::size_t k = 0; k < size(); ++k) w[k] = 1.0 / (ses[k] * ses[k]);
    return w;
  }

  // Same series ordered by horizon.
  EffectSeries sorted() const {
    std::vector<std::size_t> order(size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return horizons[a] < horizons[b]; });
    EffectSeries out;
    out.estimand = estimand;
    for (auto k : order) {
      out.horizons.push_back(horizons[k]);
      out.effects.push_back(effects[k]);
      out.ses.push_back(ses[k]);
    }
    return out;
  }

  std::size_t distinct_horizons() const {
    auto h = horizons;
    std::sort(h.begin(), h.end());
    return static_cast<std::size_t>(std::unique(h.begin(), h.end()) - h.begin());
  }
};

// Reads (horizon, ate, se) columns; ate_<estimand> / se_<estimand> in a wide
// table take precedence, and an estimand column filters rows.
inline EffectSeries read_effect_series(const detail::CsvTable& table, const std::string& estimand = "sp") {
  auto find = [&](std::initializer_list<std::string> names) -> std::ptrdiff_t {
    for (const auto& n : names)
      for (std::size_t j = 0; j < table.header.size(); ++j)
        if (table.header[j] == n) return static_cast<std::ptrdiff_t>(j);
    return -1;
  };
  const auto h = find({"horizon", "months", "Months"});
  const auto a = find({"ate_" + estimand, "ate"});
  const auto s = find({"se_" + estimand, "se"});
  const auto e = find({"estimand"});
  if (h < 0 || a < 0 || s < 0)
    throw Error(ErrorCode::MissingColumn, "effect series needs horizon, ate and se columns");
  EffectSeries out;
  out.estimand = estimand;
  for (const auto& row : table.rows) {
    if (e >= 0 && row[static_cast<std::size_t>(e)] != estimand) continue;
    double hv, av, sv;
    if (!detail::parse_double(row[static_cast<std::size_t>(h)], hv) ||
        !detail::parse_double(row[static_cast<std::size_t>(a)], av) ||
        !detail::parse_double(row[static_cast<std::size_t>(s)], sv))
      throw Error(ErrorCode::ParseError, "malformed number in effect series");
    out.horizons.push_back(hv);
    out.effects.push_back(av);
    out.ses.push_back(sv);
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Weighted quadratic

struct QuadraticFit {
  double b0 = 0, b1 = 0, b2 = 0;
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();
  std::optional<double> t_peak;
  std::optional<double> max_effect;
  std::optional<double> half_life;
  // Scaled-axis representation: u = (t - origin) / scale.
  double origin = 0, scale = 1;
  Eigen::Vector3d scaled_coef = Eigen::Vector3d::Zero();
  Eigen::Matrix3d scaled_covariance = Eigen::Matrix3d::Zero();

  double operator()(double t) const {
    const double u = (t - origin) / scale;
    return scaled_coef[0] + u * (scaled_coef[1] + u * scaled_coef[2]);
  }

  double derivative(double t) const {
    const double u = (t - origin) / scale;
    return (scaled_coef[1] + 2 * u * scaled_coef[2]) / scale;
  }

  double variance(double t) const {
    const double u = (t - origin) / scale;
    const Eigen::Vector3d x(1.0, u, u * u);
    return std::max(0.0, x.dot(scaled_covariance * x));
  }

  // Pointwise normal-theory interval.
  std::pair<double, double> ci(double t, double z = 1.96) const {
    const double v = (*this)(t), half = z * std::sqrt(variance(t));
    return {v - half, v + half};
  }
};

// Smallest lambda > 0 with q(t_peak + lambda) = max / 2, by bisection to
// |residual| < 1e-9, searching t in [t_peak, 2 max(H)].
inline std::optional<double> half_life(const QuadraticFit& fit, double max_horizon) {
  if (!fit.t_peak || !fit.max_effect || !(*fit.max_effect > 0)) return std::nullopt;
  const double target = *fit.max_effect / 2;
  double lo = *fit.t_peak, hi = 2 * max_horizon;
  if (!(hi > lo) || fit(hi) - target > 0) return std::nullopt;
  for (int it = 0; it < 400; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double r = fit(mid) - target;
    if (std::abs(r) < 1e-9) return mid - *fit.t_peak;
    (r > 0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi) - *fit.t_peak;
}

inline QuadraticFit fit_quadratic(const EffectSeries& input) {
  input.validate();
  if (input.distinct_horizons() < 3)
    throw Error(ErrorCode::SingularDesign, "quadratic fit needs at least 3 distinct horizons");
  const auto& h = input.horizons;
  const auto w = input.weights();
  const auto [lo_it, hi_it] = std::minmax_element(h.begin(), h.end());
  QuadraticFit fit;
  fit.origin = *lo_it;
  fit.scale = *hi_it - *lo_it;

  Eigen::Matrix3d xtwx = Eigen::Matrix3d::Zero();
  Eigen::Vector3d xtwy = Eigen::Vector3d::Zero();
  for (std::size_t k = 0; k < h.size(); ++k) {
    const double u = (h[k] - fit.origin) / fit.scale;
    const Eigen::Vector3d x(1.0, u, u * u);
    xtwx += w[k] * x * x.transpose();
    xtwy += w[k] * input.effects[k] * x;
  }
  const Eigen::FullPivLU<Eigen::Matrix3d> lu(xtwx);
  if (lu.rank() < 3) throw Error(ErrorCode::SingularDesign, "weighted design is singular");
  fit.scaled_coef = lu.solve(xtwy);
  fit.scaled_covariance = lu.inverse();

  // beta = J gamma for t = origin + scale u.
  const double a = fit.origin, s = fit.scale;
  Eigen::Matrix3d j;
  j << 1, -a / s, a * a / (s * s),
       0, 1 / s, -2 * a / (s * s),
       0, 0, 1 / (s * s);
  const Eigen::Vector3d beta = j * fit.scaled_coef;
  fit.b0 = beta[0];
  fit.b1 = beta[1];
  fit.b2 = beta[2];
  fit.covariance = j * fit.scaled_covariance * j.transpose();

  // Curvature indistinguishable from round-off counts as zero.
  const double curvature_tol = 1e-12 * fit.scaled_coef.cwiseAbs().maxCoeff();
  if (fit.b2 < 0 && fit.scaled_coef[2] < -curvature_tol) {
    const double tp = -fit.b1 / (2 * fit.b2);
    fit.t_peak = tp;
    fit.max_effect = fit.b0 + fit.b1 * tp + fit.b2 * tp * tp;
    fit.half_life = half_life(fit, *hi_it);
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Cubic smoothing spline

namespace detail {

// Band matrices of the Reinsch form: Q (n x n-2) and R (n-2 x n-2).
inline void reinsch_matrices(const std::vector<double>& t, Eigen::MatrixXd& q, Eigen::MatrixXd& r) {
  const auto n = static_cast<Eigen::Index>(t.size());
  q = Eigen::MatrixXd::Zero(n, n - 2);
  r = Eigen::MatrixXd::Zero(n - 2, n - 2);
  for (Eigen::Index j = 1; j + 1 < n; ++j) {
    const double h0 = t[static_cast<std::size_t>(j)] - t[static_cast<std::size_t>(j - 1)];
    const double h1 = t[static_cast<std::size_t>(j + 1)] - t[static_cast<std::size_t>(j)];
    const Eigen::Index c = j - 1;
    q(j - 1, c) = 1 / h0;
    q(j, c) = -1 / h0 - 1 / h1;
    q(j + 1, c) = 1 / h1;
    r(c, c) = (h0 + h1) / 3;
    if (c + 1 < n - 2) r(c, c + 1) = r(c + 1, c) = h1 / 6;
  }
}

}  // namespace detail

struct SplineFit {
  std::vector<double> knots;
  std::vector<double> values;  // g at knots
  std::vector<double> second;  // g'' at knots, zero at both ends
  double lambda = 0.0;
  double cv_score = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> lambda_grid;
  std::vector<double> cv_grid;
  std::optional<double> peak;
  std::optional<double> peak_value;
  std::vector<double> inflections;
  std::vector<std::pair<double, double>> phase_bounds;
  std::vector<std::string> phase_labels;

  std::size_t segment(double t) const {
    const auto it = std::upper_bound(knots.begin(), knots.end(), t);
    const auto k = static_cast<std::size_t>(std::max<std::ptrdiff_t>(it - knots.begin(), 1));
    return std::min(k, knots.size() - 1) - 1;
  }

  double operator()(double t) const {
    if (t < knots.front()) return values.front() + (t - knots.front()) * derivative(knots.front());
    if (t > knots.back()) return values.back() + (t - knots.back()) * derivative(knots.back());
    const auto i = segment(t);
    const double h = knots[i + 1] - knots[i], a = t - knots[i], b = knots[i + 1] - t;
    return (a * values[i + 1] + b * values[i]) / h -
           a * b / 6 * ((1 + a / h) * second[i + 1] + (1 + b / h) * second[i]);
  }

  double derivative(double t) const {
    t = std::clamp(t, knots.front(), knots.back());
    const auto i = segment(t);
    const double h = knots[i + 1] - knots[i], a = t - knots[i], b = knots[i + 1] - t;
    return (values[i + 1] - values[i]) / h -
           ((b - a) * ((1 + a / h) * second[i + 1] + (1 + b / h) * second[i]) +
            a * b * (second[i + 1] - second[i]) / h) / 6;
  }

  double second_derivative(double t) const {
    if (t <= knots.front() || t >= knots.back()) return 0.0;
    const auto i = segment(t);
    const double h = knots[i + 1] - knots[i];
    return second[i] + (t - knots[i]) * (second[i + 1] - second[i]) / h;
  }
};

struct SplineSolution {
  Eigen::VectorXd g;
  Eigen::VectorXd gamma;
  Eigen::VectorXd hat_diag;
};

// Penalized fit for a fixed lambda. Large lambda uses the rescaled system
// (R / lambda + Q' W^-1 Q) eta = Q' y so the linear limit stays well posed.
inline SplineSolution solve_spline(const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                   double lambda, const Eigen::MatrixXd& q, const Eigen::MatrixXd& r) {
  const Eigen::VectorXd winv = w.cwiseInverse();
  const Eigen::MatrixXd qtwq = q.transpose() * winv.asDiagonal() * q;
  SplineSolution out;
  const auto n = y.size();
  Eigen::MatrixXd m;
  double mult;  // gamma = mult * (M^-1 Q' y)
  if (lambda >= 1.0) {
    m = r / lambda + qtwq;
    mult = 1.0 / lambda;
  } else {
    m = r + lambda * qtwq;
    mult = 1.0;
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
  const Eigen::VectorXd sol = ldlt.solve(q.transpose() * y);
  // g = y - lambda W^-1 Q gamma in both parameterizations.
  const double scale = lambda >= 1.0 ? 1.0 : lambda;
  out.g = y - scale * winv.asDiagonal() * (q * sol);
  out.gamma = Eigen::VectorXd::Zero(n);
  out.gamma.segment(1, n - 2) = mult * sol;
  // A = I - c W^-1 Q M^-1 Q'
  const Eigen::MatrixXd minv_qt = ldlt.solve(q.transpose());
  out.hat_diag.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) out.hat_diag[i] = 1.0 - scale * winv[i] * q.row(i).dot(minv_qt.col(i));
  return out;
}

inline double loo_score(const Eigen::VectorXd& y, const Eigen::VectorXd& w, const SplineSolution& s) {
  double num = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double r = (y[i] - s.g[i]) / (1.0 - s.hat_diag[i]);
    num += w[i] * r * r;
  }
  return num / w.sum();
}

inline std::vector<double> spline_lambda_grid(const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                                              const Eigen::VectorXd& w, std::size_t count = 50) {
  const Eigen::MatrixXd qtwq = q.transpose() * w.cwiseInverse().asDiagonal() * q;
  const double base = r.trace() / qtwq.trace();
  std::vector<double> grid(count);
  for (std::size_t k = 0; k < count; ++k) {
    const double s = -6.0 + 12.0 * static_cast<double>(k) / static_cast<double>(count - 1);
    grid[k] = base * std::pow(10.0, s);
  }
  return grid;
}

// 1-month evaluation grid covering [lo, hi] inclusive.
inline std::vector<double> monthly_grid(double lo, double hi) {
  std::vector<double> g;
  const auto steps = static_cast<long>(std::floor(hi - lo + 1e-9));
  for (long k = 0; k <= steps; ++k) g.push_back(lo + static_cast<double>(k));
  if (hi - g.back() > 1e-9) g.push_back(hi);
  return g;
}

// Peak: grid argmax refined by golden-section search to 1e-3 months, NA on
// a boundary argmax. Inflections: sign changes of g'' refined by bisection.
inline void extract_features(SplineFit& fit) {
  const double lo = fit.knots.front(), hi = fit.knots.back();
  const auto grid = monthly_grid(lo, hi);
  std::size_t arg = 0;
  for (std::size_t k = 1; k < grid.size(); ++k)
    if (fit(grid[k]) > fit(grid[arg])) arg = k;
  fit.peak.reset();
  fit.peak_value.reset();
  if (arg > 0 && arg + 1 < grid.size()) {
    double a = grid[arg - 1], b = grid[arg + 1];
    const double phi = (std::sqrt(5.0) - 1) / 2;
    double c = b - phi * (b - a), d = a + phi * (b - a);
    while (b - a > 1e-3) {
      if (fit(c) >= fit(d)) {
        b = d;
      } else {
        a = c;
      }
      c = b - phi * (b - a);
      d = a + phi * (b - a);
    }
    double t = 0.5 * (a + b);
    if (fit(grid[arg]) > fit(t)) t = grid[arg];
    fit.peak = t;
    fit.peak_value = fit(t);
  }

  fit.inflections.clear();
  auto sign = [](double v) { return v > 0 ? 1 : (v < 0 ? -1 : 0); };
  int last_sign = 0;
  double last_t = lo;
  for (double t : grid) {
    const int s = sign(fit.second_derivative(t));
    if (s == 0) continue;
    if (last_sign != 0 && s != last_sign) {
      double a = last_t, b = t;
      for (int it = 0; it < 200 && b - a > 1e-9; ++it) {
        const double m = 0.5 * (a + b);
        if (sign(fit.second_derivative(m)) == last_sign) a = m;
        else b = m;
      }
      fit.inflections.push_back(0.5 * (a + b));
    }
    last_sign = s;
    last_t = t;
  }

  fit.phase_bounds.clear();
  fit.phase_labels.clear();
  std::vector<double> cuts{lo};
  cuts.insert(cuts.end(), fit.inflections.begin(), fit.inflections.end());
  cuts.push_back(hi);
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    const double mid = 0.5 * (cuts[k] + cuts[k + 1]);
    const double g2 = fit.second_derivative(mid);
    fit.phase_bounds.emplace_back(cuts[k], cuts[k + 1]);
    fit.phase_labels.push_back(g2 > 0 ? "acceleration" : g2 < 0 ? "deceleration" : "linear");
  }
}

// Natural cubic smoothing spline with knots at the horizons. Without a
// forced lambda, the penalty minimizes weighted leave-one-out error over a
// 50-point log grid (ties go to the smaller lambda).
inline SplineFit fit_spline(const EffectSeries& input, std::optional<double> forced_lambda = std::nullopt) {
  input.validate();
  const auto series = input.sorted();
  if (series.size() < 4 || series.distinct_horizons() < series.size())
    throw Error(ErrorCode::TooFewPoints, "spline needs at least 4 distinct horizons");
  const auto n = static_cast<Eigen::Index>(series.size());
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(series.effects.data(), n);
  const auto wv = series.weights();
  const Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(wv.data(), n);
  Eigen::MatrixXd q, r;
  detail::reinsch_matrices(series.horizons, q, r);

  SplineFit fit;
  fit.knots = series.horizons;
  if (forced_lambda) {
    if (!(*forced_lambda >= 0)) throw Error(ErrorCode::ConfigError, "smoothing parameter must be >= 0");
    fit.lambda = *forced_lambda;
  } else {
    fit.lambda_grid = spline_lambda_grid(q, r, w);
    double best = std::numeric_limits<double>::infinity();
    for (double lam : fit.lambda_grid) {
      const double cv = loo_score(y, w, solve_spline(y, w, lam, q, r));
      fit.cv_grid.push_back(cv);
      if (cv < best) {
        best = cv;
        fit.lambda = lam;
      }
    }
  }
  const auto sol = solve_spline(y, w, fit.lambda, q, r);
  fit.cv_score = loo_score(y, w, sol);
  fit.values.assign(sol.g.data(), sol.g.data() + n);
  fit.second.assign(sol.gamma.data(), sol.gamma.data() + n);
  extract_features(fit);
  return fit;
}

// ---------------------------------------------------------------------------
// Report

struct TrajectoryResult {
  EffectSeries series;
  QuadraticFit quadratic;
  std::optional<SplineFit> spline;  // absent with fewer than 4 horizons
};

inline TrajectoryResult fit_trajectory(const EffectSeries& series) {
  TrajectoryResult r;
  r.series = series.sorted();
  r.quadratic = fit_quadratic(r.series);
  if (r.series.size() >= 4) r.spline = fit_spline(r.series);
  return r;
}

// Sampled curves on the 1-month grid: t, quadratic, q_lo, q_hi, spline.
inline std::string trajectory_curves_csv(const TrajectoryResult& r) {
  std::ostringstream out;
  out << "t,quadratic,q_lo,q_hi,spline\n";
  for (double t : monthly_grid(r.series.horizons.front(), r.series.horizons.back())) {
    const auto [lo, hi] = r.quadratic.ci(t);
    out << detail::format_double(t) << ',' << detail::format_double(r.quadratic(t)) << ','
        << detail::format_double(lo) << ',' << detail::format_double(hi) << ','
        << (r.spline ? detail::format_double((*r.spline)(t)) : std::string("NA")) << '\n';
  }
  return out.str();
}

inline nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json trajectory_summary_json(const TrajectoryResult& r) {
  nlohmann::ordered_json q;
  q["beta"] = {r.quadratic.b0, r.quadratic.b1, r.quadratic.b2};
  q["t_peak"] = optional_json(r.quadratic.t_peak);
  q["max_effect"] = optional_json(r.quadratic.max_effect);
  q["half_life"] = optional_json(r.quadratic.half_life);
  nlohmann::ordered_json out;
  out["estimand"] = r.series.estimand;
  out["horizons"] = r.series.horizons;
  out["quadratic"] = q;
  if (r.spline) {
    nlohmann::ordered_json s;
    s["lambda"] = r.spline->lambda;
    s["loo_cv"] = r.spline->cv_score;
    s["t_peak"] = optional_json(r.spline->peak);
    s["max_effect"] = optional_json(r.spline->peak_value);
    s["inflections"] = r.spline->inflections;
    nlohmann::ordered_json phases = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < r.spline->phase_labels.size(); ++k)
      phases.push_back({{"start", r.spline->phase_bounds[k].first},
                        {"end", r.spline->phase_bounds[k].second},
                        {"phase", r.spline->phase_labels[k]}});
    s["phases"] = phases;
    out["spline"] = s;
  } else {
    out["spline"] = nullptr;
  }
  return out;
}

}  // namespace cast
