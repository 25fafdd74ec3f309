#pragma once

// Simulation harness: data generation from individual-level potential
// outcomes, the four comparison estimators, performance metrics and
// scenario sweeps.

#include "agt/estimands.hpp"
#include "agt/glm.hpp"

#include <array>
#include <filesystem>

namespace agt::sim {

using Coef = std::array<double, 4>;  // (intercept, x1, x2, x3)

struct Scenario {
  int id = 0;
  std::string set;               // "5trial" or "1trial"
  std::size_t n_total = 5000;    // overall population, trials plus target
  std::size_t m = 5;             // number of trials
  double p1 = 0.3, p2 = 0.3, mu = 0.0, rho = 0.3;  // covariate law eta
  double sigma = 1.0;            // sd of x3
  Coef beta{};                   // selection into the trial population
  std::vector<Coef> gamma;       // allocation, trials 2..m (trial 1 is the reference)
  Coef theta1{}, theta0{};       // potential-outcome logistic coefficients
  /// Cutpoint for reporting x3 subgroup effects; defaults to the population median mu.
  std::optional<double> x3_cut;

  double cut() const { return x3_cut.value_or(mu); }
  /// Throws InputError when dimensions or probabilities are invalid.
  void validate() const;
};

/// Catalog file: JSON object with a "scenarios" array. Numbers may be given
/// as literals or as "log(v)".
std::vector<Scenario> load_catalog(const std::filesystem::path& path);
std::vector<Scenario> parse_catalog(std::string_view json_text);
/// The shipped catalog filtered to one set ("5trial", "1trial" or "all").
std::vector<Scenario> select_set(const std::vector<Scenario>& catalog, std::string_view set);

/// Pooled individual records of the trial participants.
struct TrialIpd {
  RowMatrix x;             // n x 3
  std::vector<int> trial;  // 0-based trial index
  Vector a;
  Vector y;
  std::size_t rows() const { return static_cast<std::size_t>(x.rows()); }
};

struct Replicate {
  TrialIpd ipd;
  MetaDataset dataset;
  CovariateSample target;
  double truth = 0.0;  // mean over target rows of expit(theta1'x) - expit(theta0'x)
  int attempts = 1;
  std::vector<std::string> warnings;
};

/// Schema of the simulated covariates x1, x2 (binary) and x3 (continuous,
/// reported in two strata split at `cut`).
CovariateSchema simulation_schema(double cut);

/// One draw of the data-generating process. Replicates with an empty arm in
/// any reported stratum, or a zero-SE effect, are redrawn with a new sub-seed.
Replicate run_dgp(const Scenario& scenario, std::uint64_t rep_seed);

struct Estimate {
  double psi = 0.0;
  double se = 0.0;
};

/// Logistic outcome model on (1, x, a, a x) fitted to the pooled trials;
/// psi is the target mean of predicted risk differences, se from the
/// influence function with an HC0 sandwich for the coefficients.
Estimate ipd_gformula(const TrialIpd& ipd, const CovariateSample& target);

struct MetaResult {
  double pooled = 0.0;
  double se = 0.0;
  double tau2 = 0.0;
};

/// REML between-trial variance for y_i ~ N(x_i' b, v_i + tau2).
double reml_tau2(const Vector& y, const Vector& v, const Matrix& X);
/// Restricted log-likelihood at tau2 (up to a constant).
double reml_loglik(const Vector& y, const Vector& v, const Matrix& X, double tau2);

/// Random-effects meta-analysis of marginal effects; needs m >= 2.
MetaResult meta_random_effects(const Vector& estimates, const Vector& se);

struct GlsFit {
  Vector coef;
  Matrix cov;  // (X' W X)^-1
};
GlsFit gls(const Vector& y, const Vector& v, const Matrix& X, double tau2);

/// REML meta-regression of trial effects on trial mean covariates, predicted
/// at the target means. Covariate columns constant across trials are dropped
/// (leaving an intercept-only fit when all are); otherwise the design must
/// have full column rank with more trials than regressors.
Estimate meta_regression(const Vector& estimates, const Vector& se, const Matrix& trial_means,
                         const Vector& target_means);

/// CATE-transport estimate: linear working basis, target as base sample,
/// SE-only variance inputs.
Estimate cima(const Replicate& rep, Weighting weighting = Weighting::inverse_se2);

enum class Method { cima, meta, metareg, ipd };
std::string to_string(Method m);
Method parse_method(std::string_view text);
/// Methods applicable to a scenario: meta and metareg need several trials.
std::vector<Method> applicable(const Scenario& s, const std::vector<Method>& requested);

struct MetricsRow {
  int scenario = 0;
  std::string set;
  Method method = Method::cima;
  std::size_t replications = 0;  // successful replications used
  std::size_t failures = 0;
  bool flagged = false;          // failures >= 2% of replications
  double truth = 0.0;            // mean true psi
  double bias = 0.0;
  double variance = 0.0;         // sample variance of psi_hat
  double mse = 0.0;
  double mae = 0.0;
  double coverage = 0.0;
  double mcse_bias = 0.0;
  double mcse_coverage = 0.0;
  double mcse_mse = 0.0;
};

struct StudyOptions {
  std::size_t replications = 300;
  unsigned jobs = 1;
  std::uint64_t seed = 42;
  std::vector<Method> methods{Method::cima, Method::meta, Method::metareg, Method::ipd};
  Weighting weighting = Weighting::inverse_se2;
};

/// Replicate r of scenario s uses seed derive_seed(seed, s.id, r), so results
/// do not depend on the number of jobs.
std::vector<MetricsRow> run_study(const std::vector<Scenario>& scenarios, const StudyOptions& options);

std::string metrics_csv(const std::vector<MetricsRow>& rows);

}  // namespace agt::sim
