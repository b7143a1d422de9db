#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cast/config.hpp"
#include "cast/detail/rng.hpp"
#include "cast/detail/text.hpp"
#include "cast/error.hpp"

namespace cast {

inline constexpr const char* kTimeColumn = "time_months";
inline constexpr const char* kEventColumn = "event";
inline constexpr const char* kTreatmentColumn = "treatment";
inline constexpr const char* kIdColumn = "id";

// Kind of a source column as declared in the schema config.
enum class SourceKind { Continuous, Binary, Categorical };

// Kind of an encoded covariate column.
enum class ColumnKind { Continuous, Binary, OneHot };

inline std::string to_string(SourceKind k) {
  switch (k) {
    case SourceKind::Continuous: return "continuous";
    case SourceKind::Binary: return "binary";
    case SourceKind::Categorical: return "categorical";
  }
  return "?";
}

// Ordered column-name -> kind mapping. Only mapped columns become covariates.
struct SchemaConfig {
  std::vector<std::pair<std::string, SourceKind>> columns;

  static SchemaConfig from_config(const KeyValueConfig& cfg) {
    SchemaConfig out;
    std::set<std::string> seen;
    for (const auto& [key, value] : cfg.entries()) {
      if (key == kTimeColumn || key == kEventColumn || key == kTreatmentColumn ||
          key == kIdColumn)
        continue;
      SourceKind kind;
      if (value == "continuous") kind = SourceKind::Continuous;
      else if (value == "binary") kind = SourceKind::Binary;
      else if (value == "categorical") kind = SourceKind::Categorical;
      else
        throw Error(ErrorCode::ConfigError,
                    "column '" + key + "' has unknown kind '" + value + "'");
      if (!seen.insert(key).second)
        throw Error(ErrorCode::ConfigError, "duplicate column '" + key + "'");
      out.columns.emplace_back(key, kind);
    }
    return out;
  }

  static SchemaConfig load(const std::string& path) {
    return from_config(KeyValueConfig::load(path));
  }

  std::string to_text() const {
    std::string s = "# column = continuous | binary | categorical\n";
    for (const auto& [name, kind] : columns) s += name + " = " + to_string(kind) + "\n";
    return s;
  }
};

struct ColumnSchema {
  std::vector<std::string> names;
  std::vector<ColumnKind> kinds;
  // Source column of each encoded column (the column itself unless one-hot).
  std::vector<std::string> sources;
  // Level string for one-hot members, empty otherwise.
  std::vector<std::string> levels;
  // Standardization statistics; meaningful for continuous columns once set.
  std::vector<double> means;
  std::vector<double> sds;
  std::vector<bool> zero_variance;
  SchemaConfig source_config;

  std::size_t size() const { return names.size(); }

  std::ptrdiff_t index_of(const std::string& name) const {
    for (std::size_t j = 0; j < names.size(); ++j)
      if (names[j] == name) return static_cast<std::ptrdiff_t>(j);
    return -1;
  }

  void push(std::string name, ColumnKind kind, std::string source, std::string level) {
    names.push_back(std::move(name));
    kinds.push_back(kind);
    sources.push_back(std::move(source));
    levels.push_back(std::move(level));
    means.push_back(0.0);
    sds.push_back(1.0);
    zero_variance.push_back(false);
  }
};

struct SubjectRecord {
  std::string id;
  std::vector<double> covariates;
  int treatment = 0;
  double time_months = 0.0;
  int event = 0;

  bool operator==(const SubjectRecord&) const = default;
};

struct SurvivalCohort {
  std::vector<SubjectRecord> subjects;
  ColumnSchema schema;
  bool standardized = false;
  std::size_t dropped_incomplete = 0;
  std::size_t rejected_nonpositive_time = 0;

  std::size_t size() const { return subjects.size(); }
  std::size_t dim() const { return schema.size(); }

  Eigen::MatrixXd covariate_matrix() const {
    Eigen::MatrixXd x(subjects.size(), dim());
    for (std::size_t i = 0; i < subjects.size(); ++i)
      for (std::size_t j = 0; j < dim(); ++j) x(i, j) = subjects[i].covariates[j];
    return x;
  }

  std::vector<double> times() const {
    std::vector<double> t;
    t.reserve(size());
    for (const auto& s : subjects) t.push_back(s.time_months);
    return t;
  }
  std::vector<int> events() const {
    std::vector<int> e;
    e.reserve(size());
    for (const auto& s : subjects) e.push_back(s.event);
    return e;
  }
  std::vector<int> treatments() const {
    std::vector<int> w;
    w.reserve(size());
    for (const auto& s : subjects) w.push_back(s.treatment);
    return w;
  }

  double event_rate() const {
    if (subjects.empty()) return 0.0;
    double e = 0;
    for (const auto& s : subjects) e += s.event;
    return e / static_cast<double>(subjects.size());
  }
  double treated_rate() const {
    if (subjects.empty()) return 0.0;
    double w = 0;
    for (const auto& s : subjects) w += s.treatment;
    return w / static_cast<double>(subjects.size());
  }

  SurvivalCohort subset(const std::vector<std::size_t>& indices) const {
    SurvivalCohort out;
    out.schema = schema;
    out.standardized = standardized;
    out.subjects.reserve(indices.size());
    for (auto i : indices) out.subjects.push_back(subjects.at(i));
    return out;
  }

  // Appends a continuous covariate column (used by refutation tests).
  SurvivalCohort with_extra_column(const std::string& name,
                                   const std::vector<double>& values) const {
    if (values.size() != size())
      throw Error(ErrorCode::DimensionMismatch, "extra column length mismatch");
    SurvivalCohort out = *this;
    out.schema.push(name, ColumnKind::Continuous, name, "");
    out.schema.source_config.columns.emplace_back(name, SourceKind::Continuous);
    for (std::size_t i = 0; i < size(); ++i) out.subjects[i].covariates.push_back(values[i]);
    return out;
  }
};

// Builds a cohort from an already parsed table. Rows missing any mapped field
// are dropped and counted; rows with time <= 0 are rejected and counted.
inline SurvivalCohort encode_table(const detail::CsvTable& table, const SchemaConfig& config) {
  const auto time_col = table.column(kTimeColumn);
  const auto event_col = table.column(kEventColumn);
  const auto treat_col = table.column(kTreatmentColumn);
  const auto id_col = table.column(kIdColumn);
  for (auto [col, name] : {std::pair{time_col, kTimeColumn}, std::pair{event_col, kEventColumn},
                           std::pair{treat_col, kTreatmentColumn}}) {
    if (col < 0) throw Error(ErrorCode::MissingColumn, std::string("column '") + name + "' not found");
  }
  std::vector<std::ptrdiff_t> source_cols;
  for (const auto& [name, kind] : config.columns) {
    const auto c = table.column(name);
    if (c < 0) throw Error(ErrorCode::MissingColumn, "column '" + name + "' not found");
    source_cols.push_back(c);
  }

  auto field = [](const std::vector<std::string>& row, std::ptrdiff_t c) -> std::string_view {
    if (c < 0 || static_cast<std::size_t>(c) >= row.size()) return {};
    return detail::trim(row[static_cast<std::size_t>(c)]);
  };
  auto parse_num = [](std::string_view s, std::size_t rowno, const std::string& col) {
    double v;
    if (!detail::parse_double(s, v) || !std::isfinite(v))
      throw Error(ErrorCode::ParseError, "row " + std::to_string(rowno) + ", column '" + col +
                                             "': malformed number '" + std::string(s) + "'");
    return v;
  };
  auto parse_flag = [&](std::string_view s, std::size_t rowno, const std::string& col) {
    const double v = parse_num(s, rowno, col);
    if (v != 0.0 && v != 1.0)
      throw Error(ErrorCode::ParseError, "row " + std::to_string(rowno) + ", column '" + col +
                                             "': expected 0 or 1, got '" + std::string(s) + "'");
    return static_cast<int>(v);
  };

  SurvivalCohort cohort;
  // First pass: decide which rows survive and collect categorical levels.
  std::vector<std::size_t> keep;
  std::vector<std::set<std::string>> level_sets(config.columns.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    bool missing = detail::is_missing_token(field(row, time_col)) ||
                   detail::is_missing_token(field(row, event_col)) ||
                   detail::is_missing_token(field(row, treat_col));
    for (auto c : source_cols) missing = missing || detail::is_missing_token(field(row, c));
    if (missing) {
      ++cohort.dropped_incomplete;
      continue;
    }
    const double t = parse_num(field(row, time_col), r + 1, kTimeColumn);
    if (!(t > 0.0)) {
      ++cohort.rejected_nonpositive_time;
      continue;
    }
    keep.push_back(r);
    for (std::size_t k = 0; k < config.columns.size(); ++k)
      if (config.columns[k].second == SourceKind::Categorical)
        level_sets[k].insert(std::string(field(row, source_cols[k])));
  }

  auto& schema = cohort.schema;
  schema.source_config = config;
  std::vector<std::vector<std::string>> levels(config.columns.size());
  for (std::size_t k = 0; k < config.columns.size(); ++k) {
    const auto& [name, kind] = config.columns[k];
    if (kind == SourceKind::Categorical) {
      levels[k].assign(level_sets[k].begin(), level_sets[k].end());
      for (const auto& lv : levels[k]) schema.push(name + "=" + lv, ColumnKind::OneHot, name, lv);
    } else {
      schema.push(name, kind == SourceKind::Binary ? ColumnKind::Binary : ColumnKind::Continuous,
                  name, "");
    }
  }
  {
    std::set<std::string> unique(schema.names.begin(), schema.names.end());
    if (unique.size() != schema.names.size())
      throw Error(ErrorCode::ConfigError, "encoded column names are not unique");
  }

  cohort.subjects.reserve(keep.size());
  for (auto r : keep) {
    const auto& row = table.rows[r];
    SubjectRecord s;
    s.id = id_col >= 0 ? std::string(field(row, id_col)) : std::to_string(r + 1);
    s.time_months = parse_num(field(row, time_col), r + 1, kTimeColumn);
    s.event = parse_flag(field(row, event_col), r + 1, kEventColumn);
    s.treatment = parse_flag(field(row, treat_col), r + 1, kTreatmentColumn);
    s.covariates.reserve(schema.size());
    for (std::size_t k = 0; k < config.columns.size(); ++k) {
      const auto& [name, kind] = config.columns[k];
      const auto value = field(row, source_cols[k]);
      switch (kind) {
        case SourceKind::Continuous: s.covariates.push_back(parse_num(value, r + 1, name)); break;
        case SourceKind::Binary:
          s.covariates.push_back(static_cast<double>(parse_flag(value, r + 1, name)));
          break;
        case SourceKind::Categorical:
          for (const auto& lv : levels[k]) s.covariates.push_back(value == lv ? 1.0 : 0.0);
          break;
      }
    }
    cohort.subjects.push_back(std::move(s));
  }
  return cohort;
}

inline SurvivalCohort ingest_csv(const std::string& path, const SchemaConfig& config) {
  return encode_table(detail::read_csv_file(path), config);
}

// Writes subjects back in source form (categoricals as level strings), so
// that ingest_csv(write) with the cohort's source schema reproduces the records.
inline std::string cohort_to_csv(const SurvivalCohort& cohort) {
  const auto& schema = cohort.schema;
  const auto& cfg = schema.source_config;
  std::ostringstream out;
  out << kIdColumn << ',' << kTimeColumn << ',' << kEventColumn << ',' << kTreatmentColumn;
  for (const auto& [name, kind] : cfg.columns) out << ',' << detail::csv_escape(name);
  out << '\n';
  // Map each source column to its encoded column range.
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& [name, kind] : cfg.columns) {
    std::size_t b = schema.size(), e = 0;
    for (std::size_t j = 0; j < schema.size(); ++j)
      if (schema.sources[j] == name) {
        b = std::min(b, j);
        e = j + 1;
      }
    ranges.emplace_back(b, e);
  }
  for (const auto& s : cohort.subjects) {
    out << detail::csv_escape(s.id) << ',' << detail::format_double(s.time_months) << ','
        << s.event << ',' << s.treatment;
    for (std::size_t k = 0; k < cfg.columns.size(); ++k) {
      out << ',';
      const auto [b, e] = ranges[k];
      if (cfg.columns[k].second == SourceKind::Categorical) {
        for (std::size_t j = b; j < e; ++j)
          if (s.covariates[j] == 1.0) out << detail::csv_escape(schema.levels[j]);
      } else if (b < e) {
        out << detail::format_double(s.covariates[b]);
      }
    }
    out << '\n';
  }
  return out.str();
}

inline void write_cohort_csv(const SurvivalCohort& cohort, const std::string& path) {
  detail::write_text_file(path, cohort_to_csv(cohort));
}

// Computes mean and sample SD of every continuous column.
inline ColumnSchema standardization_stats(const SurvivalCohort& cohort) {
  ColumnSchema schema = cohort.schema;
  const std::size_t n = cohort.size();
  for (std::size_t j = 0; j < schema.size(); ++j) {
    schema.means[j] = 0.0;
    schema.sds[j] = 1.0;
    schema.zero_variance[j] = false;
    if (schema.kinds[j] != ColumnKind::Continuous || n == 0) continue;
    double mean = 0.0;
    for (const auto& s : cohort.subjects) mean += s.covariates[j];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (const auto& s : cohort.subjects) ss += (s.covariates[j] - mean) * (s.covariates[j] - mean);
    const double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
    schema.means[j] = mean;
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      schema.zero_variance[j] = true;
      schema.sds[j] = 1.0;
    } else {
      schema.sds[j] = sd;
    }
  }
  return schema;
}

// Applies (x - mean) / sd with the statistics stored in `stats`; binary,
// one-hot and zero-variance columns pass through unchanged.
inline SurvivalCohort apply_standardization(const SurvivalCohort& cohort, const ColumnSchema& stats) {
  if (cohort.standardized)
    throw Error(ErrorCode::ConfigError, "cohort is already standardized");
  if (stats.size() != cohort.dim())
    throw Error(ErrorCode::DimensionMismatch, "standardization stats dimension mismatch");
  SurvivalCohort out = cohort;
  out.schema.means = stats.means;
  out.schema.sds = stats.sds;
  out.schema.zero_variance = stats.zero_variance;
  for (auto& s : out.subjects)
    for (std::size_t j = 0; j < stats.size(); ++j)
      if (stats.kinds[j] == ColumnKind::Continuous && !stats.zero_variance[j])
        s.covariates[j] = (s.covariates[j] - stats.means[j]) / stats.sds[j];
  out.standardized = true;
  return out;
}

// Standardizes with the cohort's own statistics. Constant continuous columns
// are left untransformed and flagged in schema.zero_variance.
inline SurvivalCohort standardize(const SurvivalCohort& cohort) {
  return apply_standardization(cohort, standardization_stats(cohort));
}

struct SplitAssignment {
  std::vector<std::size_t> train;  // subject indices, ascending
  std::vector<std::size_t> test;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::uint64_t seed = 0;
  double train_fraction = 0.75;
};

// Event-stratified split. Events and censored subjects are shuffled within
// their stratum; the number of events allotted to the training part is the one
// that best equalizes the two event rates for the requested training size.
inline SplitAssignment stratified_split(const SurvivalCohort& cohort, double train_fraction = 0.75,
                                        std::uint64_t seed = 0) {
  if (cohort.size() == 0) throw Error(ErrorCode::EmptyInput, "cannot split an empty cohort");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw Error(ErrorCode::ConfigError, "train_fraction must lie in (0, 1)");
  std::vector<std::size_t> events, censored;
  for (std::size_t i = 0; i < cohort.size(); ++i)
    (cohort.subjects[i].event ? events : censored).push_back(i);
  if (events.size() < 4)
    throw Error(ErrorCode::TooFewEvents,
                "stratified split needs at least 4 events, got " + std::to_string(events.size()));

  auto rng = detail::make_engine(seed, detail::Stream::Split);
  detail::shuffle(events, rng);
  detail::shuffle(censored, rng);

  const std::size_t n = cohort.size();
  const auto target = static_cast<std::ptrdiff_t>(
      std::llround(train_fraction * static_cast<double>(n)));

  // Search the event allotment (and, if needed, a training size within two
  // rows of the target) so that the partitions' event rates agree to 0.02.
  struct Choice {
    std::size_t n_train = 0, events = 0;
    double diff = INFINITY;
    std::ptrdiff_t shift = 0;
    double dist = INFINITY;
  };
  auto better = [](const Choice& a, const Choice& b) {
    const bool fa = a.diff <= 0.02, fb = b.diff <= 0.02;
    if (fa != fb) return fa;
    if (fa && std::abs(a.shift) != std::abs(b.shift)) return std::abs(a.shift) < std::abs(b.shift);
    if (std::abs(a.diff - b.diff) > 1e-15) return a.diff < b.diff;
    if (std::abs(a.shift) != std::abs(b.shift)) return std::abs(a.shift) < std::abs(b.shift);
    return a.dist < b.dist;
  };
  Choice best;
  for (std::ptrdiff_t shift : {0, -1, 1, -2, 2}) {
    const std::ptrdiff_t nt = target + shift;
    if (nt < 1 || nt > static_cast<std::ptrdiff_t>(n) - 1) continue;
    const auto n_train = static_cast<std::size_t>(nt);
    const std::size_t n_test = n - n_train;
    const double ideal = static_cast<double>(events.size()) * static_cast<double>(n_train) /
                         static_cast<double>(n);
    for (std::size_t e = 0; e <= std::min(events.size(), n_train); ++e) {
      if (n_train - e > censored.size() || events.size() - e > n_test) continue;
      Choice c{n_train, e,
               std::abs(static_cast<double>(e) / static_cast<double>(n_train) -
                        static_cast<double>(events.size() - e) / static_cast<double>(n_test)),
               shift, std::abs(static_cast<double>(e) - ideal)};
      if (better(c, best)) best = c;
    }
  }
  const std::size_t n_train = best.n_train;
  const std::size_t best_e = best.events;

  SplitAssignment split;
  split.seed = seed;
  split.train_fraction = train_fraction;
  split.train.assign(events.begin(), events.begin() + static_cast<std::ptrdiff_t>(best_e));
  split.train.insert(split.train.end(), censored.begin(),
                     censored.begin() + static_cast<std::ptrdiff_t>(n_train - best_e));
  split.test.assign(events.begin() + static_cast<std::ptrdiff_t>(best_e), events.end());
  split.test.insert(split.test.end(),
                    censored.begin() + static_cast<std::ptrdiff_t>(n_train - best_e), censored.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  for (auto i : split.train) split.train_ids.push_back(cohort.subjects[i].id);
  for (auto i : split.test) split.test_ids.push_back(cohort.subjects[i].id);
  return split;
}

}  // namespace cast
