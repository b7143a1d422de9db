#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cast/heterogeneity.hpp"
#include "cast/pipeline.hpp"
#include "cast/refutation.hpp"
#include "cast/synth.hpp"
#include "cast/trajectory.hpp"

namespace cast::cli {

inline constexpr const char* kVersion = "0.1.0";

using Json = nlohmann::ordered_json;

// Settings shared by the analysis subcommands.
struct RunOptions {
  std::uint64_t seed = 1;
  std::string horizons = "12:120:12";
  std::string estimand = "both";
  std::size_t trees = 5000;
  std::size_t nuisance_trees = 500;
  bool tune = true;
  double trim_low = 0.10;
  double trim_high = 0.90;
  std::size_t threads = 0;  // 0: available parallelism
  bool gnuplot = false;

  std::size_t resolved_threads() const { return threads == 0 ? detail::default_threads() : threads; }
};

inline std::vector<Estimand> parse_estimands(const std::string& s) {
  if (s == "both") return {Estimand::SP, Estimand::RMST};
  return {parse_estimand(s)};
}

inline PipelineConfig pipeline_config(const RunOptions& o) {
  if (o.trees == 0 || o.nuisance_trees == 0) throw Error(ErrorCode::ConfigError, "tree counts must be positive");
  PipelineConfig c;
  c.seed = o.seed;
  c.threads = o.resolved_threads();
  c.trim_low = o.trim_low;
  c.trim_high = o.trim_high;
  c.horizons.horizons = HorizonSpec::parse_list(o.horizons);
  c.estimands = parse_estimands(o.estimand);
  c.estimation.forest.trees = o.trees;
  c.estimation.nuisance.trees = o.nuisance_trees;
  c.estimation.tune = o.tune;
  if (!(o.trim_low >= 0 && o.trim_high <= 1 && o.trim_low < o.trim_high))
    throw Error(ErrorCode::ConfigError, "trim bounds must satisfy 0 <= low < high <= 1");
  return c;
}

// Resolved configuration as recorded in manifests. Thread counts are left
// out: results do not depend on them.
inline Json config_json(const RunOptions& o) {
  const auto c = pipeline_config(o);
  Json j;
  j["seed"] = o.seed;
  j["horizon_spec"] = o.horizons;
  j["horizons"] = c.horizons.horizons;
  j["estimand"] = o.estimand;
  j["train_fraction"] = c.train_fraction;
  j["trim_low"] = o.trim_low;
  j["trim_high"] = o.trim_high;
  const auto& f = c.estimation.forest;
  j["cate_forest"] = {{"trees", f.trees},           {"subsample", f.subsample},
                      {"honesty_fraction", f.honesty_fraction},
                      {"min_node", f.min_node},     {"mtry", f.mtry},
                      {"group_size", f.group_size}, {"imbalance_penalty", f.imbalance_penalty},
                      {"tune", o.tune}};
  const auto& t = c.estimation.tuning;
  j["tuning_grid"] = {{"min_node", t.min_node}, {"subsample", t.subsample}, {"trees", t.trees}};
  j["nuisance_forest"] = {{"trees", c.estimation.nuisance.trees},
                          {"min_node", c.estimation.nuisance.min_node},
                          {"folds", c.estimation.nuisance_folds}};
  j["censor_floor"] = c.estimation.censor_floor;
  const auto& p = c.propensity;
  j["propensity"] = {{"alpha_grid", p.alpha_grid},
                     {"n_lambda", p.n_lambda},
                     {"lambda_min_ratio", p.lambda_min_ratio},
                     {"folds", p.folds}};
  return j;
}

inline RunOptions options_from_json(const nlohmann::json& j) {
  RunOptions o;
  try {
    o.seed = j.at("seed").get<std::uint64_t>();
    o.horizons = j.at("horizon_spec").get<std::string>();
    o.estimand = j.at("estimand").get<std::string>();
    o.trim_low = j.at("trim_low").get<double>();
    o.trim_high = j.at("trim_high").get<double>();
    o.trees = j.at("cate_forest").at("trees").get<std::size_t>();
    o.tune = j.at("cate_forest").at("tune").get<bool>();
    o.nuisance_trees = j.at("nuisance_forest").at("trees").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("manifest config is incomplete: ") + e.what());
  }
  return o;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

// Output directory that records every file written to it and closes with a
// manifest. Timing and thread data go in the manifest's "runtime" block.
class RunWriter {
 public:
  RunWriter(const std::string& dir, const std::string& command, std::size_t threads)
      : dir_(dir), threads_(threads), started_(utc_timestamp()), clock_(std::chrono::steady_clock::now()) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create '" + dir + "': " + ec.message());
    manifest_["tool"] = "cast";
    manifest_["version"] = kVersion;
    manifest_["command"] = command;
  }

  std::filesystem::path path(const std::string& name) const { return dir_ / name; }

  // Input location relative to this directory, so sibling runs record the
  // same manifest.
  std::string input(const std::string& p) const {
    namespace fs = std::filesystem;
    return fs::absolute(p).lexically_normal().lexically_relative(fs::absolute(dir_).lexically_normal()).string();
  }

  void write(const std::string& name, const std::string& body) {
    const auto p = dir_ / name;
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    detail::write_text_file(p.string(), body);
    files_.push_back(name);
  }

  void write_json(const std::string& name, const Json& j) { write(name, j.dump(2) + "\n"); }

  Json& manifest() { return manifest_; }

  void finish() {
    Json m = manifest_;
    m["outputs"] = files_;
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_).count();
    m["runtime"] = {{"threads", threads_},
                    {"started_utc", started_},
                    {"finished_utc", utc_timestamp()},
                    {"wall_seconds", wall}};
    detail::write_text_file((dir_ / "manifest.json").string(), m.dump(2) + "\n");
  }

 private:
  std::filesystem::path dir_;
  std::size_t threads_;
  std::string started_;
  std::chrono::steady_clock::time_point clock_;
  Json manifest_;
  std::vector<std::string> files_;
};

inline std::string hname(double h) { return "h" + detail::format_double(h); }

// ---------------------------------------------------------------------------
// simulate

struct SimulateOptions {
  std::string scenario;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n;
};

inline void cmd_simulate(const SimulateOptions& o) {
  auto config = ScenarioConfig::load(o.scenario);
  if (o.seed) config.seed = *o.seed;
  if (o.n) config.n = *o.n;
  const auto data = generate(config);
  RunWriter w(o.out, "simulate", 1);
  std::vector<std::string> ids;
  for (const auto& s : data.cohort.subjects) ids.push_back(s.id);
  w.write("cohort.csv", cohort_table_csv(data.table));
  w.write("schema.toml", synth_schema().to_text());
  w.write_json("truth.json", data.truth.to_json(ids));
  w.manifest()["inputs"] = {{"scenario", w.input(o.scenario)}};
  w.manifest()["config"] = {{"seed", config.seed}, {"n", config.n}, {"shape", to_string(config.shape)},
                            {"peak", config.peak}};
  w.manifest()["diagnostics"] = {{"event_rate", data.cohort.event_rate()},
                                 {"treated_rate", data.cohort.treated_rate()}};
  w.finish();
}

// ---------------------------------------------------------------------------
// propensity

struct CohortInput {
  std::string cohort;
  std::string schema;
};

inline SurvivalCohort load_cohort(const CohortInput& in) {
  return ingest_csv(in.cohort, SchemaConfig::load(in.schema));
}

inline Json propensity_diagnostics(const PipelineResult& r) {
  return {{"alpha", r.propensity.alpha},
          {"lambda", r.propensity.lambda},
          {"cv_folds", r.propensity.cv_folds},
          {"cv_loss", r.propensity.cv_loss},
          {"converged", r.propensity.converged},
          {"n_train", r.split.train.size()},
          {"n_test", r.split.test.size()},
          {"n_trimmed", r.trim.trimmed.size()},
          {"n_analyzed", r.trim.kept.size()}};
}

inline std::string trim_sensitivity_csv(const SurvivalCohort& cohort, const std::vector<double>& scores) {
  std::ostringstream out;
  out << "threshold,lower,upper,kept,trimmed,kept_treated,kept_control\n";
  for (double tau : {0.01, 0.03, 0.05, 0.07, 0.10}) {
    std::size_t treated = 0;
    TrimResult t;
    try {
      t = trim(scores, tau, 1 - tau);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyAfterTrim) throw;
      t.lower = tau;
      t.upper = 1 - tau;
      t.trimmed.resize(scores.size());
    }
    for (auto i : t.kept) treated += static_cast<std::size_t>(cohort.subjects[i].treatment);
    out << detail::format_double(tau) << ',' << detail::format_double(t.lower) << ','
        << detail::format_double(t.upper) << ',' << t.kept.size() << ',' << t.trimmed.size() << ',' << treated << ','
        << t.kept.size() - treated << '\n';
  }
  return out.str();
}

inline void write_correlations(RunWriter& w, const std::string& stem, const CorrelationReport& report) {
  w.write(stem + ".csv", report.matrix_csv());
  w.write(stem + "_mask.csv", report.mask_csv());
}

inline void gnuplot_overlap(RunWriter& w) {
  w.write("overlap.gp",
          "set datafile separator ','\n"
          "set xlabel 'propensity score'\nset ylabel 'density'\n"
          "plot 'density_treated.csv' every ::1 using 1:2 with lines title 'treated', \\\n"
          "     'density_control.csv' every ::1 using 1:2 with lines title 'control'\n");
}

inline void cmd_propensity(const CohortInput& in, const RunOptions& o, const std::string& out) {
  const auto raw = load_cohort(in);
  const auto config = pipeline_config(o);
  RunWriter w(out, "propensity", config.threads);
  const auto r = prepare_pipeline(raw, config);
  w.write("propensity_scores.csv", propensity_scores_csv(raw, r));
  w.write("propensity_coefficients.csv", propensity_coefficients_csv(r.propensity));
  std::vector<double> treated, control;
  for (std::size_t i = 0; i < raw.size(); ++i) (raw.subjects[i].treatment ? treated : control).push_back(r.scores[i]);
  if (!treated.empty()) w.write("density_treated.csv", kde_density(treated).to_csv());
  if (!control.empty()) w.write("density_control.csv", kde_density(control).to_csv());
  w.write("trim_sensitivity.csv", trim_sensitivity_csv(raw, r.scores));

  std::vector<std::vector<double>> columns;
  std::vector<std::string> names = raw.schema.names;
  for (std::size_t j = 0; j < raw.dim(); ++j) {
    std::vector<double> c(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) c[i] = raw.subjects[i].covariates[j];
    columns.push_back(std::move(c));
  }
  const auto wt = raw.treatments();
  columns.emplace_back(wt.begin(), wt.end());
  names.push_back("treatment");
  columns.push_back(r.scores);
  names.push_back("propensity");
  write_correlations(w, "correlation_pearson", correlation_diagnostics(columns, names, CorrelationMethod::Pearson));
  write_correlations(w, "correlation_spearman", correlation_diagnostics(columns, names, CorrelationMethod::Spearman));
  if (o.gnuplot) gnuplot_overlap(w);

  w.manifest()["inputs"] = {{"cohort", w.input(in.cohort)}, {"schema", w.input(in.schema)}};
  w.manifest()["config"] = config_json(o);
  w.manifest()["diagnostics"] = {{"propensity", propensity_diagnostics(r)}};
  w.finish();
}

// ---------------------------------------------------------------------------
// fit

inline std::string importance_csv(const std::vector<HorizonEstimate>& est, const std::vector<std::string>& names) {
  std::ostringstream out;
  out << "horizon";
  for (const auto& n : names) out << ',' << detail::csv_escape(n);
  out << '\n';
  for (const auto& e : est) {
    out << detail::format_double(e.horizon);
    for (double v : e.importance) out << ',' << detail::format_double(v);
    out << '\n';
  }
  return out.str();
}

inline Json horizon_diagnostics(const std::vector<HorizonEstimate>& est) {
  Json a = Json::array();
  for (const auto& e : est)
    a.push_back({{"estimand", to_string(e.estimand)},
                 {"horizon", e.horizon},
                 {"n_valid", e.n_valid},
                 {"n_below_floor", e.n_below_floor},
                 {"ate_se_forest", std::isnan(e.ate_se_forest) ? Json(nullptr) : Json(e.ate_se_forest)},
                 {"tuned_min_node", e.tuning.min_node},
                 {"tuned_subsample", e.tuning.subsample}});
  return a;
}

inline void cmd_fit(const CohortInput& in, const RunOptions& o, const std::string& out) {
  const auto raw = load_cohort(in);
  const auto config = pipeline_config(o);
  RunWriter w(out, "fit", config.threads);
  const auto r = run_pipeline(raw, config);
  w.write("effects.csv", effect_table_csv(r.sp, r.rmst));
  Json diag = {{"propensity", propensity_diagnostics(r)}};
  Json horizons = Json::array();
  for (auto e : config.estimands) {
    const auto& est = r.estimates(e);
    const auto tag = to_string(e);
    w.write("sweep_" + tag + ".csv", horizon_sweep_csv(est));
    w.write("importance_" + tag + ".csv", importance_csv(est, r.analysis.schema.names));
    for (const auto& h : est) w.write("cate/" + tag + "_" + hname(h.horizon) + ".csv", cate_csv(h, r.analysis));
    for (auto& d : horizon_diagnostics(est)) horizons.push_back(d);
  }
  diag["horizons"] = horizons;
  w.manifest()["inputs"] = {{"cohort", w.input(in.cohort)}, {"schema", w.input(in.schema)}};
  w.manifest()["config"] = config_json(o);
  w.manifest()["diagnostics"] = diag;
  w.finish();
}

// ---------------------------------------------------------------------------
// trajectory

// Estimands the table can supply: ate_<e>/se_<e> pairs with numeric
// content, or the generic ate/se pair under the requested label.
inline std::vector<std::string> available_estimands(const detail::CsvTable& table, const std::string& selection) {
  auto has = [&](const std::string& c) { return table.column(c) >= 0; };
  auto numeric = [&](const std::string& c) {
    const auto j = static_cast<std::size_t>(table.column(c));
    for (const auto& row : table.rows)
      if (!detail::is_missing_token(row[j])) return true;
    return false;
  };
  std::vector<std::string> wanted;
  if (selection == "both") wanted = {"sp", "rmst"};
  else wanted = {to_string(parse_estimand(selection))};
  std::vector<std::string> out;
  for (const auto& e : wanted)
    if (has("ate_" + e) && has("se_" + e) && numeric("ate_" + e)) out.push_back(e);
  if (out.empty() && has("ate") && has("se")) out.push_back(wanted.front());
  if (out.empty()) throw Error(ErrorCode::MissingColumn, "effect table has no usable ate/se columns");
  return out;
}

inline void gnuplot_trajectory(RunWriter& w, const std::string& tag) {
  w.write("trajectory_" + tag + ".gp",
          "set datafile separator ','\nset xlabel 'months'\nset ylabel 'effect'\n"
          "plot 'trajectory_curves_" + tag + ".csv' every ::1 using 1:3:4 with filledcurves title '95% CI', \\\n"
          "     '' every ::1 using 1:2 with lines title 'quadratic', \\\n"
          "     '' every ::1 using 1:5 with lines title 'spline'\n");
}

inline void cmd_trajectory(const std::string& effects, const std::string& estimand, const std::string& out,
                           bool gnuplot = false) {
  const auto table = detail::read_csv_file(effects);
  const auto tags = available_estimands(table, estimand);
  std::vector<std::pair<std::string, TrajectoryResult>> fits;
  for (const auto& tag : tags) {
    const auto series = read_effect_series(table, tag);
    if (series.distinct_horizons() < 3)
      throw Error(ErrorCode::TooFewPoints, "trajectory needs at least 3 distinct horizons, got " +
                                               std::to_string(series.distinct_horizons()));
    fits.emplace_back(tag, fit_trajectory(series));
  }
  RunWriter w(out, "trajectory", 1);
  Json summary;
  for (const auto& [tag, fit] : fits) {
    w.write("trajectory_curves_" + tag + ".csv", trajectory_curves_csv(fit));
    summary[tag] = trajectory_summary_json(fit);
    if (gnuplot) gnuplot_trajectory(w, tag);
  }
  w.write_json("trajectory_summary.json", summary);
  w.manifest()["inputs"] = {{"effects", w.input(effects)}};
  w.manifest()["config"] = {{"estimand", estimand}};
  w.finish();
}

// ---------------------------------------------------------------------------
// refute

inline const std::vector<std::string>& refutation_names() {
  static const std::vector<std::string> names{"dummy", "negative", "confounder", "noise"};
  return names;
}

inline std::vector<std::string> parse_tests(const std::string& s) {
  if (s == "all") return refutation_names();
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto& all = refutation_names();
    if (std::find(all.begin(), all.end(), tok) == all.end())
      throw Error(ErrorCode::ConfigError, "unknown refutation test '" + tok + "'");
    out.push_back(tok);
  }
  if (out.empty()) throw Error(ErrorCode::ConfigError, "no refutation test selected");
  return out;
}

inline RefutationReport run_refutation(const std::string& test, const SurvivalCohort& raw, const PipelineConfig& pc,
                                       const RefutationConfig& rc, Estimand e) {
  if (test == "dummy") return dummy_outcome_test(raw, pc, rc, e);
  if (test == "negative") return negative_control_test(raw, pc, rc, e);
  if (test == "confounder") return synthetic_confounder_test(raw, pc, rc, e);
  return noise_feature_test(raw, pc, rc, e);
}

inline void cmd_refute(const CohortInput& in, const std::string& tests, const RunOptions& o,
                       const RefutationConfig& rc, const std::string& out) {
  const auto selected = parse_tests(tests);
  const auto raw = load_cohort(in);
  const auto pc = pipeline_config(o);
  RunWriter w(out, "refute", pc.threads);
  Json verdicts;
  for (auto e : pc.estimands) {
    for (const auto& t : selected) {
      const auto rep = run_refutation(t, raw, pc, rc, e);
      const auto stem = "refute_" + rep.kind + "_" + to_string(e);
      w.write(stem + ".csv", rep.to_csv());
      w.write_json(stem + ".json", rep.to_json());
      verdicts[rep.kind + "_" + to_string(e)] = rep.pass;
    }
  }
  w.write_json("refutation_summary.json", verdicts);
  w.manifest()["inputs"] = {{"cohort", w.input(in.cohort)}, {"schema", w.input(in.schema)}};
  Json cfg = config_json(o);
  cfg["refutation"] = {{"tests", selected},
                       {"repetitions", rc.repetitions},
                       {"strengths", rc.strengths},
                       {"noise_features", rc.noise_features}};
  w.manifest()["config"] = cfg;
  w.finish();
}

// ---------------------------------------------------------------------------
// explain

struct ExplainOptions {
  std::string run_dir;
  double horizon = 60;
  std::string estimand = "sp";
  std::size_t subjects = 200;
  std::size_t background = 100;
  std::size_t iterations = 1000;
  double epsilon = 0.01;
};

// Covariates of the selected analysis rows mapped back to the input scale.
inline Eigen::MatrixXd raw_scale(const SurvivalCohort& analysis, const ColumnSchema& stats,
                                 const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd x = rows_matrix(analysis, rows);
  for (std::size_t j = 0; j < stats.size(); ++j)
    if (stats.kinds[j] == ColumnKind::Continuous && !stats.zero_variance[j])
      x.col(static_cast<Eigen::Index>(j)) = x.col(static_cast<Eigen::Index>(j)).array() * stats.sds[j] + stats.means[j];
  return x;
}

inline void gnuplot_shap(RunWriter& w) {
  w.write("shap.gp",
          "set datafile separator ','\nset xlabel 'feature value'\nset ylabel 'SHAP'\n"
          "# one panel per feature: filter shap_scatter.csv on column 1\n"
          "plot 'shap_scatter.csv' every ::1 using 2:3 with points pt 7 ps 0.4 notitle\n");
}

inline void cmd_explain(const CohortInput& in, const ExplainOptions& x, std::size_t threads, bool gnuplot,
                        const std::string& out) {
  const auto manifest_path = std::filesystem::path(x.run_dir) / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw Error(ErrorCode::ConfigError, "no manifest.json in '" + x.run_dir + "'");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("unreadable manifest: ") + e.what());
  }
  if (!manifest.contains("config")) throw Error(ErrorCode::ConfigError, "manifest has no config block");
  RunOptions o = options_from_json(manifest["config"]);
  o.threads = threads;
  if (!(x.horizon > 0)) throw Error(ErrorCode::ConfigError, "explain horizon must be positive");
  const auto e = parse_estimand(x.estimand);
  auto pc = pipeline_config(o);
  pc.horizons.horizons = {x.horizon};
  pc.estimands = {e};
  pc.estimation.keep_forest = true;

  const auto raw = load_cohort(in);
  RunWriter w(out, "explain", pc.threads);
  const auto r = run_pipeline(raw, pc);
  const auto& est = r.estimates(e).front();
  const auto forest = est.forest;

  const auto explained = select_background(r.analysis.size(), x.subjects,
                                           detail::derive_seed(o.seed, detail::Stream::Shap, 1000000));
  const auto bg_pick = select_background(r.analysis_train.size(), x.background, o.seed);
  std::vector<std::size_t> bg_rows;
  for (auto k : bg_pick) bg_rows.push_back(r.analysis_train[k]);

  ShapConfig sc;
  sc.iterations = x.iterations;
  sc.epsilon = x.epsilon;
  sc.seed = detail::derive_seed(o.seed, detail::Stream::Shap, 0);
  sc.threads = pc.threads;
  const BatchPredictor predict = [&](const Eigen::MatrixXd& m) { return forest->predict_mean(m, 1); };
  const auto names = r.analysis.schema.names;
  const auto shap =
      shap_monte_carlo(predict, rows_matrix(r.analysis, explained), rows_matrix(r.analysis, bg_rows), names, sc);

  std::vector<std::string> ids;
  std::vector<double> cate;
  for (auto i : explained) {
    ids.push_back(r.analysis.subjects[i].id);
    cate.push_back(est.cate[i]);
  }
  const auto xraw = raw_scale(r.analysis, r.stats, explained);

  w.write("shap.csv", shap_csv(shap, ids));
  w.write("shap_scatter.csv", shap_scatter_csv(shap, xraw));
  w.write("shap_importance.csv", shap_summary_csv(shap));
  const auto corr = effect_correlations(xraw, names, shap, cate);
  write_correlations(w, "effect_correlation_pearson", corr.pearson);
  write_correlations(w, "effect_correlation_spearman", corr.spearman);
  if (gnuplot) gnuplot_shap(w);

  std::size_t converged = 0, max_iter = 0;
  for (std::size_t i = 0; i < shap.converged.size(); ++i) {
    converged += shap.converged[i] ? 1 : 0;
    max_iter = std::max(max_iter, shap.iterations[i]);
  }
  w.manifest()["inputs"] = {
      {"cohort", w.input(in.cohort)}, {"schema", w.input(in.schema)}, {"run", w.input(x.run_dir)}};
  Json cfg = config_json(o);
  cfg["explain"] = {{"horizon", x.horizon},         {"estimand", to_string(e)},
                    {"subjects", x.subjects},       {"background", x.background},
                    {"iterations", x.iterations},   {"epsilon", x.epsilon}};
  w.manifest()["config"] = cfg;
  w.manifest()["diagnostics"] = {{"baseline", shap.baseline},
                                 {"explained", shap.converged.size()},
                                 {"converged", converged},
                                 {"max_iterations_used", max_iter},
                                 {"max_raw_residual", shap.max_raw_residual()},
                                 {"ate", est.ate}};
  w.finish();
}

// ---------------------------------------------------------------------------
// run-all

struct RunAllOptions {
  std::string scenario;
  std::string out;
  std::optional<std::size_t> n;
  std::string tests = "all";
  RefutationConfig refutation;
  ExplainOptions explain;
};

inline void cmd_run_all(const RunAllOptions& a, const RunOptions& o) {
  namespace fs = std::filesystem;
  const fs::path root(a.out);
  cmd_simulate({a.scenario, (root / "simulate").string(), std::nullopt, a.n});
  const CohortInput in{(root / "simulate" / "cohort.csv").string(), (root / "simulate" / "schema.toml").string()};
  cmd_propensity(in, o, (root / "propensity").string());
  cmd_fit(in, o, (root / "fit").string());
  cmd_trajectory((root / "fit" / "effects.csv").string(), o.estimand, (root / "trajectory").string(), o.gnuplot);
  cmd_refute(in, a.tests, o, a.refutation, (root / "refute").string());
  auto x = a.explain;
  x.run_dir = (root / "fit").string();
  cmd_explain(in, x, o.threads, o.gnuplot, (root / "explain").string());
  RunWriter w(a.out, "run-all", o.resolved_threads());
  w.manifest()["inputs"] = {{"scenario", w.input(a.scenario)}};
  w.manifest()["config"] = config_json(o);
  w.manifest()["stages"] = {"simulate", "propensity", "fit", "trajectory", "refute", "explain"};
  w.finish();
}

// Exit status for a library error: 2 for bad input or configuration, 1 for
// failures while computing.
inline int exit_code(const Error& e) {
  switch (e.code()) {
    case ErrorCode::ConfigError:
    case ErrorCode::ParseError:
    case ErrorCode::MissingColumn:
    case ErrorCode::TooFewPoints:
    case ErrorCode::NonPositiveTime:
      return 2;
    default:
      return 1;
  }
}

}  // namespace cast::cli
