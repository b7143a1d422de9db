#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cast/cli.hpp"
#include "reference_series.hpp"
#include "test_util.hpp"

using namespace cast;
using namespace cast::cli;
using cast::testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

// Runs the installed binary; returns its exit status and stderr.
std::pair<int, std::string> run_cast(const std::string& args, const TempDir& dir) {
  const auto err = dir.file("stderr.txt");
  const int status = std::system((std::string(CAST_BINARY) + " " + args + " 2> " + err + " > /dev/null").c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

RunOptions quick_options() {
  RunOptions o;
  o.seed = 3;
  o.horizons = "12,36,60";
  o.trees = 40;
  o.nuisance_trees = 20;
  o.tune = false;
  o.threads = 1;
  return o;
}

std::string effects_csv(const EffectSeries& s) {
  std::string out = "horizon,ate,se\n";
  for (std::size_t k = 0; k < s.size(); ++k)
    out += detail::format_double(s.horizons[k]) + "," + detail::format_double(s.effects[k]) + "," +
           detail::format_double(s.ses[k]) + "\n";
  return out;
}

// Small cohort written by the simulate command.
CohortInput simulated(const TempDir& dir, std::size_t n = 500, const std::string& scenario = "radcure-like.toml") {
  cmd_simulate({std::string(CAST_SOURCE_DIR) + "/scenarios/" + scenario, dir.file("sim"), std::nullopt, n});
  return {dir.file("sim/cohort.csv"), dir.file("sim/schema.toml")};
}

}  // namespace

TEST(CliSimulate, NullScenarioTruthIsZero) {
  TempDir dir;
  simulated(dir, 300, "null.toml");
  const auto truth = nlohmann::json::parse(slurp(dir.file("sim/truth.json")));
  ASSERT_EQ(truth["ate_sp"].size(), truth["horizons"].size());
  for (const auto& v : truth["ate_sp"]) EXPECT_EQ(v.get<double>(), 0.0);
  for (const auto& v : truth["ate_rmst"]) EXPECT_EQ(v.get<double>(), 0.0);
}

TEST(CliSimulate, RowCountMatchesConfiguredSize) {
  TempDir dir;
  const auto [code, err] = run_cast("simulate --scenario " + std::string(CAST_SOURCE_DIR) +
                                        "/scenarios/radcure-like.toml --n 321 --out " + dir.file("sim"),
                                    dir);
  ASSERT_EQ(code, 0) << err;
  EXPECT_EQ(count_lines(dir.file("sim/cohort.csv")), 322u);
  const auto cohort = ingest_csv(dir.file("sim/cohort.csv"), SchemaConfig::load(dir.file("sim/schema.toml")));
  EXPECT_EQ(cohort.size(), 321u);
}

TEST(CliSimulate, MissingScenarioExitsWithConfigError) {
  TempDir dir;
  const auto [code, err] = run_cast("simulate --scenario " + dir.file("absent.toml") + " --out " + dir.file("o"), dir);
  EXPECT_EQ(code, 2);
  EXPECT_NE(err.find("ConfigError"), std::string::npos);
}

TEST(CliUsage, BadFlagsExitTwo) {
  TempDir dir;
  EXPECT_EQ(run_cast("", dir).first, 2);
  EXPECT_EQ(run_cast("frobnicate", dir).first, 2);
  EXPECT_EQ(run_cast("trajectory --effects " + std::string(CAST_SOURCE_DIR) +
                         "/scenarios/hnc_effects.csv --estimand median --out " + dir.file("o"),
                     dir)
                .first,
            2);
  EXPECT_EQ(run_cast("--version", dir).first, 0);
}

TEST(CliTrajectory, ReferenceTablePeak) {
  TempDir dir;
  const auto [code, err] = run_cast(
      "trajectory --effects " + std::string(CAST_SOURCE_DIR) + "/scenarios/hnc_effects.csv --out " + dir.file("t"), dir);
  ASSERT_EQ(code, 0) << err;
  const auto summary = nlohmann::json::parse(slurp(dir.file("t/trajectory_summary.json")));
  const double peak = summary["sp"]["quadratic"]["t_peak"].get<double>();
  EXPECT_GE(peak, 50.0);
  EXPECT_LE(peak, 65.0);
  EXPECT_TRUE(summary["rmst"]["quadratic"]["t_peak"].is_null());
  EXPECT_EQ(count_lines(dir.file("t/trajectory_curves_sp.csv")), 110u);  // header + 12..120
  EXPECT_EQ(count_lines(dir.file("t/trajectory_curves_rmst.csv")), 110u);
}

TEST(CliTrajectory, GenericColumnsUseRequestedLabel) {
  TempDir dir;
  const auto path = dir.write("e.csv", effects_csv(cast::testing::reference_sp_series()));
  cmd_trajectory(path, "sp", dir.file("t"));
  const auto summary = nlohmann::json::parse(slurp(dir.file("t/trajectory_summary.json")));
  EXPECT_TRUE(summary.contains("sp"));
  EXPECT_FALSE(summary.contains("rmst"));
}

TEST(CliTrajectory, TwoRowsExitTwoWithTooFewPoints) {
  TempDir dir;
  auto s = cast::testing::reference_sp_series();
  s.horizons.resize(2);
  s.effects.resize(2);
  s.ses.resize(2);
  const auto path = dir.write("two.csv", effects_csv(s));
  const auto [code, err] = run_cast("trajectory --effects " + path + " --out " + dir.file("t"), dir);
  EXPECT_EQ(code, 2);
  EXPECT_NE(err.find("TooFewPoints"), std::string::npos);
  try {
    cmd_trajectory(path, "sp", dir.file("t"));
    FAIL() << "expected TooFewPoints";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewPoints);
    EXPECT_EQ(exit_code(e), 2);
  }
}

TEST(CliTrajectory, GnuplotStubs) {
  TempDir dir;
  cmd_trajectory(std::string(CAST_SOURCE_DIR) + "/scenarios/hnc_effects.csv", "both", dir.file("t"), true);
  EXPECT_TRUE(std::filesystem::exists(dir.file("t/trajectory_sp.gp")));
  EXPECT_TRUE(std::filesystem::exists(dir.file("t/trajectory_rmst.gp")));
}

TEST(CliFit, OutputsAndDeterminism) {
  TempDir dir;
  const auto in = simulated(dir);
  auto o = quick_options();
  cmd_fit(in, o, dir.file("a"));
  o.threads = 3;
  cmd_fit(in, o, dir.file("b"));

  const auto effects = slurp(dir.file("a/effects.csv"));
  EXPECT_EQ(effects.substr(0, effects.find('\n')), "horizon,ate_sp,se_sp,ate_rmst,se_rmst");
  EXPECT_EQ(count_lines(dir.file("a/effects.csv")), 4u);
  EXPECT_EQ(count_lines(dir.file("a/sweep_sp.csv")), 4u);
  EXPECT_TRUE(std::filesystem::exists(dir.file("a/cate/rmst_h36.csv")));

  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir.file("a"))) {
    if (!entry.is_regular_file() || entry.path().filename() == "manifest.json") continue;
    const auto rel = std::filesystem::relative(entry.path(), dir.file("a"));
    EXPECT_TRUE(slurp(entry.path()) == slurp(dir.path() / "b" / rel)) << rel;
  }
  auto ma = nlohmann::json::parse(slurp(dir.file("a/manifest.json")));
  auto mb = nlohmann::json::parse(slurp(dir.file("b/manifest.json")));
  EXPECT_EQ(ma["runtime"]["threads"], 1);
  EXPECT_EQ(mb["runtime"]["threads"], 3);
  EXPECT_EQ(ma["config"]["trim_low"].get<double>(), 0.10);
  EXPECT_EQ(ma["config"]["trim_high"].get<double>(), 0.90);
  ma.erase("runtime");
  mb.erase("runtime");
  EXPECT_EQ(ma, mb);
}

TEST(CliFit, SweepAgreesWithLibrary) {
  TempDir dir;
  const auto in = simulated(dir);
  const auto o = quick_options();
  cmd_fit(in, o, dir.file("f"));
  const auto r = run_pipeline(load_cohort(in), pipeline_config(o));
  EXPECT_EQ(slurp(dir.file("f/sweep_sp.csv")), horizon_sweep_csv(r.sp));
  EXPECT_EQ(slurp(dir.file("f/effects.csv")), effect_table_csv(r.sp, r.rmst));
}

TEST(CliPropensity, Artifacts) {
  TempDir dir;
  const auto in = simulated(dir);
  auto o = quick_options();
  o.gnuplot = true;
  cmd_propensity(in, o, dir.file("p"));
  EXPECT_EQ(count_lines(dir.file("p/propensity_scores.csv")), 501u);
  EXPECT_EQ(count_lines(dir.file("p/density_treated.csv")), 513u);
  EXPECT_EQ(count_lines(dir.file("p/trim_sensitivity.csv")), 6u);
  EXPECT_TRUE(std::filesystem::exists(dir.file("p/correlation_spearman_mask.csv")));
  EXPECT_TRUE(std::filesystem::exists(dir.file("p/overlap.gp")));
  const auto m = nlohmann::json::parse(slurp(dir.file("p/manifest.json")));
  EXPECT_EQ(m["diagnostics"]["propensity"]["n_train"].get<int>() + m["diagnostics"]["propensity"]["n_test"].get<int>(),
            500);
  EXPECT_EQ(m["inputs"]["cohort"], "../sim/cohort.csv");
}

TEST(CliExplain, RefitsFromManifest) {
  TempDir dir;
  const auto in = simulated(dir);
  const auto o = quick_options();
  cmd_fit(in, o, dir.file("f"));
  ExplainOptions x;
  x.run_dir = dir.file("f");
  x.horizon = 36;
  x.subjects = 15;
  x.background = 30;
  x.iterations = 200;
  cmd_explain(in, x, 1, false, dir.file("x"));
  EXPECT_EQ(count_lines(dir.file("x/shap.csv")), 16u);
  const auto m = nlohmann::json::parse(slurp(dir.file("x/manifest.json")));
  EXPECT_EQ(m["config"]["cate_forest"]["trees"], 40);
  // The refit at a single horizon reproduces the fitted ATE.
  const auto sweep = detail::read_csv_file(dir.file("f/sweep_sp.csv"));
  double ate = 0;
  detail::parse_double(sweep.rows[1][2], ate);
  EXPECT_DOUBLE_EQ(m["diagnostics"]["ate"].get<double>(), ate);
  EXPECT_EQ(m["diagnostics"]["explained"], 15);
  const auto table = detail::read_csv_file(dir.file("x/shap.csv"));
  EXPECT_EQ(table.header.front(), "id");
  EXPECT_EQ(table.header.size(), 14u);
}

TEST(CliExplain, MissingManifestIsConfigError) {
  TempDir dir;
  const auto in = simulated(dir, 300);
  ExplainOptions x;
  x.run_dir = dir.path().string();
  try {
    cmd_explain(in, x, 1, false, dir.file("x"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(exit_code(e), 2);
  }
}

TEST(CliRefute, WritesReportPerTest) {
  TempDir dir;
  const auto in = simulated(dir, 400);
  auto o = quick_options();
  o.estimand = "sp";
  RefutationConfig rc;
  rc.repetitions = 2;
  cmd_refute(in, "dummy,negative", o, rc, dir.file("r"));
  EXPECT_TRUE(std::filesystem::exists(dir.file("r/refute_dummy_outcome_sp.csv")));
  EXPECT_TRUE(std::filesystem::exists(dir.file("r/refute_negative_control_sp.json")));
  EXPECT_FALSE(std::filesystem::exists(dir.file("r/refute_noise_features_sp.csv")));
  const auto v = nlohmann::json::parse(slurp(dir.file("r/refutation_summary.json")));
  EXPECT_EQ(v.size(), 2u);
  EXPECT_THROW(parse_tests("dummy,bogus"), Error);
}

TEST(CliOptions, ConfigRoundTrip) {
  auto o = quick_options();
  o.estimand = "rmst";
  o.trim_low = 0.05;
  o.trim_high = 0.95;
  const auto back = options_from_json(nlohmann::json::parse(config_json(o).dump()));
  EXPECT_EQ(back.seed, o.seed);
  EXPECT_EQ(back.horizons, o.horizons);
  EXPECT_EQ(back.estimand, o.estimand);
  EXPECT_EQ(back.trees, o.trees);
  EXPECT_EQ(back.nuisance_trees, o.nuisance_trees);
  EXPECT_EQ(back.tune, o.tune);
  EXPECT_EQ(back.trim_low, o.trim_low);
  EXPECT_EQ(back.trim_high, o.trim_high);
  o.trim_low = 0.95;
  EXPECT_THROW(pipeline_config(o), Error);
}
