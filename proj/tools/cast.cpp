// cast: command-line front end.

#include <iostream>

#include <CLI11.hpp>

#include "cast/cli.hpp"

namespace {

using namespace cast::cli;

void add_run_options(CLI::App* app, RunOptions& o) {
  app->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  app->add_option("--horizons", o.horizons, "start:stop:step or a comma list (months)")->capture_default_str();
  app->add_option("--estimand", o.estimand, "sp | rmst | both")
      ->check(CLI::IsMember({"sp", "rmst", "both"}))
      ->capture_default_str();
  app->add_option("--trees", o.trees, "Trees in each CATE forest")->capture_default_str();
  app->add_option("--nuisance-trees", o.nuisance_trees, "Trees in each outcome nuisance forest")
      ->capture_default_str();
  app->add_flag("!--no-tune", o.tune, "Skip CATE forest tuning");
  app->add_option("--trim-low", o.trim_low, "Lower propensity trim bound")->capture_default_str();
  app->add_option("--trim-high", o.trim_high, "Upper propensity trim bound")->capture_default_str();
  app->add_option("--threads", o.threads, "Worker threads (0: all cores)")->capture_default_str();
  app->add_flag("--gnuplot", o.gnuplot, "Also write gnuplot script stubs");
}

void add_cohort_options(CLI::App* app, CohortInput& in) {
  app->add_option("--cohort", in.cohort, "Cohort CSV")->required()->check(CLI::ExistingFile);
  app->add_option("--schema", in.schema, "Column schema file")->required()->check(CLI::ExistingFile);
}

void add_refutation_options(CLI::App* app, cast::RefutationConfig& rc) {
  app->add_option("--reps", rc.repetitions, "Repetitions of the dummy-outcome test")->capture_default_str();
  app->add_option("--noise-features", rc.noise_features, "Noise columns in the noise test")->capture_default_str();
}

void add_explain_options(CLI::App* app, ExplainOptions& x) {
  app->add_option("--horizon", x.horizon, "Horizon to explain (months)")->capture_default_str();
  app->add_option("--shap-subjects", x.subjects, "Subjects to explain (seeded sample)")->capture_default_str();
  app->add_option("--background", x.background, "Background rows")->capture_default_str();
  app->add_option("--shap-iterations", x.iterations, "Permutation cap per subject")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal survival forest analysis of treatment-effect trajectories"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  RunOptions run;
  CohortInput in;
  std::string out;

  SimulateOptions sim;
  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic cohort with known effects");
  simulate->add_option("--scenario", sim.scenario, "Scenario file")->required();
  simulate->add_option("--out", sim.out, "Output directory")->required();
  simulate->add_option("--seed", sim.seed, "Override the scenario seed");
  simulate->add_option("--n", sim.n, "Override the cohort size");

  auto* propensity = app.add_subcommand("propensity", "Fit propensity scores and overlap diagnostics");
  add_cohort_options(propensity, in);
  add_run_options(propensity, run);
  propensity->add_option("--out", out, "Output directory")->required();

  auto* fit = app.add_subcommand("fit", "Estimate ATE and CATE at every horizon");
  add_cohort_options(fit, in);
  add_run_options(fit, run);
  fit->add_option("--out", out, "Output directory")->required();

  std::string effects;
  std::string traj_estimand = "both";
  bool traj_gnuplot = false;
  auto* trajectory = app.add_subcommand("trajectory", "Fit quadratic and spline trajectories to a horizon table");
  trajectory->add_option("--effects", effects, "CSV with horizon, ate, se columns")
      ->required()
      ->check(CLI::ExistingFile);
  trajectory->add_option("--estimand", traj_estimand, "sp | rmst | both")
      ->check(CLI::IsMember({"sp", "rmst", "both"}))
      ->capture_default_str();
  trajectory->add_option("--out", out, "Output directory")->required();
  trajectory->add_flag("--gnuplot", traj_gnuplot, "Also write gnuplot script stubs");

  std::string tests = "all";
  cast::RefutationConfig rc;
  auto* refute = app.add_subcommand("refute", "Run refutation tests");
  add_cohort_options(refute, in);
  add_run_options(refute, run);
  add_refutation_options(refute, rc);
  refute->add_option("--tests", tests, "all or a comma list of dummy,negative,confounder,noise")
      ->capture_default_str();
  refute->add_option("--out", out, "Output directory")->required();

  ExplainOptions ex;
  std::size_t ex_threads = 0;
  bool ex_gnuplot = false;
  auto* explain = app.add_subcommand("explain", "SHAP values and correlations for a fitted run");
  add_cohort_options(explain, in);
  explain->add_option("--run", ex.run_dir, "Directory of a previous fit")->required()->check(CLI::ExistingDirectory);
  explain->add_option("--estimand", ex.estimand, "sp | rmst")
      ->check(CLI::IsMember({"sp", "rmst"}))
      ->capture_default_str();
  add_explain_options(explain, ex);
  explain->add_option("--threads", ex_threads, "Worker threads (0: all cores)")->capture_default_str();
  explain->add_flag("--gnuplot", ex_gnuplot, "Also write gnuplot script stubs");
  explain->add_option("--out", out, "Output directory")->required();

  RunAllOptions all;
  auto* run_all = app.add_subcommand("run-all", "simulate, propensity, fit, trajectory, refute, explain");
  run_all->add_option("--scenario", all.scenario, "Scenario file")->required();
  run_all->add_option("--n", all.n, "Override the cohort size");
  add_run_options(run_all, run);
  add_refutation_options(run_all, all.refutation);
  run_all->add_option("--tests", all.tests, "Refutation tests")->capture_default_str();
  add_explain_options(run_all, all.explain);
  run_all->add_option("--out", all.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*simulate) cmd_simulate(sim);
    else if (*propensity) cmd_propensity(in, run, out);
    else if (*fit) cmd_fit(in, run, out);
    else if (*trajectory) cmd_trajectory(effects, traj_estimand, out, traj_gnuplot);
    else if (*refute) cmd_refute(in, tests, run, rc, out);
    else if (*explain) cmd_explain(in, ex, ex_threads, ex_gnuplot, out);
    else if (*run_all) cmd_run_all(all, run);
  } catch (const cast::Error& e) {
    std::cerr << "cast: " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "cast: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
