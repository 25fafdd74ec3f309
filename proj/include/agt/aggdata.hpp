#pragma once

// Data model, ingestion and validation for aggregate trial summaries and
// individual-level covariate samples.

#include "agt/common.hpp"

#include <algorithm>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace agt {

enum class CovariateKind { binary, categorical, continuous };

std::string_view to_string(CovariateKind kind);

struct Covariate {
  std::string name;
  CovariateKind kind = CovariateKind::continuous;
  // binary: labels for the values 0 and 1; categorical: level labels, coded
  // 0..L-1 in samples; continuous: empty.
  std::vector<std::string> levels;

  std::optional<std::size_t> level_index(std::string_view label) const;
  bool operator==(const Covariate&) const = default;
};

/// Interval on the real line with open/closed ends. Accepts "[40, 50)",
/// "(-inf, 40]", "<=40", "<40", ">=60", ">60" on parse.
struct Interval {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  bool lo_closed = false;
  bool hi_closed = false;

  bool contains(double v) const {
    const bool above = lo_closed ? v >= lo : v > lo;
    const bool below = hi_closed ? v <= hi : v < hi;
    return above && below;
  }
  static Interval parse(std::string_view text);
  std::string str() const;
  bool operator==(const Interval&) const = default;
};

/// One reported subgroup stratum x_{k,l}: either a discrete level or an
/// interval of a continuous covariate.
struct Stratum {
  std::string label;
  std::size_t covariate = 0;  // 0-based schema index
  std::variant<std::size_t, Interval> rule;

  bool contains(double value) const;
  bool contains_row(Row row) const { return contains(row[covariate]); }
  bool operator==(const Stratum&) const = default;
};

class CovariateSchema {
 public:
  void add_covariate(Covariate c);
  /// Declare the strata a trial reports for a covariate; trial "*" sets the
  /// default for trials without their own entry.
  void set_strata(const std::string& trial, std::size_t covariate, std::vector<Stratum> strata);

  const std::vector<Covariate>& covariates() const { return covariates_; }
  std::size_t size() const { return covariates_.size(); }
  const Covariate& covariate(std::size_t k) const { return covariates_.at(k); }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;  // throws InputError

  /// Strata reported by `trial` for covariate k: explicit per-trial entry,
  /// then the "*" default, then (discrete covariates only) one stratum per level.
  std::vector<Stratum> strata_for(std::string_view trial, std::size_t k) const;
  /// Resolve a stratum label to its 1-based position and definition.
  std::pair<std::size_t, Stratum> resolve(std::string_view trial, std::size_t k, std::string_view label) const;

  /// Parse a sample value: 0/1 or level labels for binary, level labels (or
  /// integer codes) for categorical, numbers for continuous.
  double parse_value(std::size_t k, std::string_view text) const;
  std::string format_value(std::size_t k, double value) const;

  static CovariateSchema parse(std::string_view text);
  static CovariateSchema load(const std::filesystem::path& path);
  std::string serialize() const;

  const std::map<std::pair<std::string, std::size_t>, std::vector<Stratum>>& explicit_strata() const {
    return strata_;
  }
  bool operator==(const CovariateSchema&) const = default;

 private:
  std::vector<Covariate> covariates_;
  std::map<std::pair<std::string, std::size_t>, std::vector<Stratum>> strata_;
};

// ---------------------------------------------------------------------------
// Effect estimates and moment summaries
// ---------------------------------------------------------------------------

struct ArmCounts {
  long events1 = 0;
  long n1 = 0;
  long events0 = 0;
  long n0 = 0;
  bool operator==(const ArmCounts&) const = default;
};

struct RiskDifference {
  double estimate = 0.0;
  double se = 0.0;
};

/// Difference in event proportions between arms with its Wald standard error.
RiskDifference risk_difference_from_counts(long events1, long n1, long events0, long n0);

struct EffectEstimate {
  std::string trial;
  std::size_t covariate = 0;  // 1-based schema index, 0 = marginal
  std::size_t level = 0;      // 1-based position in the trial's strata, 0 = marginal
  std::string stratum_label;
  double estimate = 0.0;
  double se = 0.0;
  std::optional<ArmCounts> counts;

  bool is_marginal() const { return covariate == 0; }
  bool operator==(const EffectEstimate&) const = default;
};

enum class MomentKind { mean, proportion, second_moment };

/// A fixed covariate function h_{s,r}(x) whose trial mean is reported.
struct MomentSpec {
  MomentKind kind = MomentKind::mean;
  std::size_t covariate = 0;  // 0-based
  std::size_t level = 1;      // proportion only: level code (binary 1 = "x == 1")

  double evaluate(Row row) const {
    const double v = row[covariate];
    switch (kind) {
      case MomentKind::mean: return v;
      case MomentKind::proportion: return v == static_cast<double>(level) ? 1.0 : 0.0;
      case MomentKind::second_moment: return v * v;
    }
    return v;
  }
  std::string describe(const CovariateSchema& schema) const;
  bool operator==(const MomentSpec&) const = default;
};

struct MomentSummary {
  std::string trial;
  MomentSpec spec;
  double value = 0.0;
  double n = 0.0;
  // SD as written in the input, kept so second moments serialize back verbatim.
  std::optional<double> reported_sd;
  bool operator==(const MomentSummary&) const = default;
};

struct Trial {
  std::string id;
  std::vector<EffectEstimate> effects;  // marginal first, then by (covariate, level)
  std::vector<MomentSummary> moments;
  double n = 0.0;  // trial sample size n_s
  std::optional<double> followup;

  std::size_t effect_count() const { return effects.size(); }
  std::vector<MomentSpec> moment_specs() const;
  Vector moment_targets_plus() const;  // (1, mu_hat)
  bool operator==(const Trial&) const = default;
};

class MetaDataset {
 public:
  MetaDataset() = default;
  MetaDataset(CovariateSchema schema, std::vector<Trial> trials);

  const CovariateSchema& schema() const { return schema_; }
  const std::vector<Trial>& trials() const { return trials_; }
  std::size_t trial_count() const { return trials_.size(); }
  const Trial& trial(std::string_view id) const;
  std::optional<std::size_t> trial_index(std::string_view id) const;

  /// Total number of effect moments J = sum_s J_s.
  std::size_t moment_count() const;
  Vector stacked_estimates() const;
  Vector stacked_standard_errors() const;

  /// Restrict to a subset of trials (used for indirect comparisons).
  MetaDataset subset(const std::vector<std::string>& ids) const;

  const std::vector<std::string>& warnings() const { return warnings_; }
  void add_warning(std::string w) { warnings_.push_back(std::move(w)); }

  bool operator==(const MetaDataset& o) const { return schema_ == o.schema_ && trials_ == o.trials_; }

 private:
  void validate() const;

  CovariateSchema schema_;
  std::vector<Trial> trials_;
  std::vector<std::string> warnings_;
};

MetaDataset parse_meta_dataset(std::string_view effects_csv, std::string_view moments_csv, CovariateSchema schema);
MetaDataset load_meta_dataset(const std::filesystem::path& effects_path, const std::filesystem::path& moments_path,
                              const std::filesystem::path& schema_path);

/// Attach follow-up times from a `trial,time` CSV.
void attach_followups(MetaDataset& dataset, std::string_view followup_csv);

std::string serialize_effects(const MetaDataset& dataset);
/// Second moments are written back as `sd` rows.
std::string serialize_moments(const MetaDataset& dataset);

/// SD to second moment under the population-variance convention.
inline double second_moment_from_sd(double mean, double sd, double n) {
  return sd * sd * (n - 1.0) / n + mean * mean;
}
inline double sd_from_second_moment(double mean, double m2, double n) {
  return std::sqrt(std::max(0.0, (m2 - mean * mean) * n / (n - 1.0)));
}

// ---------------------------------------------------------------------------
// Individual-level covariate samples
// ---------------------------------------------------------------------------

enum class SampleRole { base, target };

class CovariateSample {
 public:
  CovariateSample() = default;
  CovariateSample(RowMatrix values, SampleRole role, std::optional<Vector> outcome = std::nullopt);

  std::size_t rows() const { return static_cast<std::size_t>(values_.rows()); }
  std::size_t covariates() const { return static_cast<std::size_t>(values_.cols()); }
  Row row(std::size_t i) const {
    return Row(values_.data() + i * values_.cols(), static_cast<std::size_t>(values_.cols()));
  }
  const RowMatrix& values() const { return values_; }
  SampleRole role() const { return role_; }
  const std::optional<Vector>& outcome() const { return outcome_; }

  CovariateSample with_role(SampleRole role) const;
  /// Rows i with keep[i] true.
  CovariateSample filter(const std::vector<bool>& keep) const;

 private:
  RowMatrix values_;
  SampleRole role_ = SampleRole::base;
  std::optional<Vector> outcome_;
};

CovariateSample parse_covariate_sample(std::string_view csv_text, const CovariateSchema& schema, SampleRole role);
CovariateSample load_covariate_sample(const std::filesystem::path& path, const CovariateSchema& schema,
                                      SampleRole role);
std::string serialize_covariate_sample(const CovariateSample& sample, const CovariateSchema& schema);

/// Validate that every value conforms to the schema (levels, finiteness).
void validate_sample(const CovariateSample& sample, const CovariateSchema& schema);

}  // namespace agt
