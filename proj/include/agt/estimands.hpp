#pragma once

// Marginalizing a fitted CATE over a target sample: overall and subgroup
// ATEs, indirect comparisons between two fits, and relative-scale transport.

#include "agt/gmm.hpp"
#include "agt/inference.hpp"

#include <optional>

namespace agt {

struct TransportResult {
  std::string label;
  double psi_hat = 0.0;
  double se = 0.0;
  Interval95 ci;
  std::size_t n_effective = 0;
  // Variance split: target-sample variation of g and propagated Var(theta_hat).
  double var_target = 0.0;
  double var_theta = 0.0;
};

/// Conjunction of covariate conditions such as `lvef<=40,prehhf=yes`.
/// Operators: = != < <= > >=. Discrete covariates compare level labels.
class SubgroupFilter {
 public:
  struct Clause {
    std::size_t covariate = 0;
    std::string op;
    double value = 0.0;
    std::string text;
  };

  static SubgroupFilter parse(std::string_view text, const CovariateSchema& schema);

  bool matches(Row x) const;
  std::vector<bool> mask(const CovariateSample& sample) const;
  const std::vector<Clause>& clauses() const { return clauses_; }
  std::string describe() const;
  bool empty() const { return clauses_.empty(); }

 private:
  std::vector<Clause> clauses_;
};

struct TransportOptions {
  /// Time stratum to evaluate stratified CATEs in.
  std::size_t stratum = 0;
  std::string label = "overall";
};

/// psi_hat = mean over the target of g(x; theta_hat). Requires fit.V_theta
/// and fit.n_total from the variance step for a nonzero second term.
TransportResult transport_ate(const CateFit& fit, const CovariateSample& target, const TransportOptions& options = {});

TransportResult subgroup_ate(const CateFit& fit, const CovariateSample& target, const SubgroupFilter& filter,
                             TransportOptions options = {});

/// psi_12 = mean over the target of g2 - g1. The fits must come from disjoint
/// trial sets, except that a fit compared with itself gives exactly 0.
TransportResult indirect_comparison(const CateFit& fit1, const CateFit& fit2, const CovariateSample& target,
                                    const TransportOptions& options = {});

/// Control-arm risk b0(x) from a logistic regression of the target outcome
/// on intercept plus main effects of every schema covariate.
BaselineFn fit_baseline(const CovariateSample& target, const CovariateSchema& schema);

/// psi_hat = mean(g b0) - mean(Y) for a relative-scale fit. b0 is fitted from
/// the target when not supplied and then treated as fixed in the variance.
TransportResult transport_relative(const CateFit& fit, const CovariateSample& target, const CovariateSchema& schema,
                                   const std::optional<BaselineFn>& baseline = std::nullopt,
                                   const TransportOptions& options = {});

/// CSV with header `label,estimate,se,ci_lo,ci_hi,n_effective`.
std::string results_csv(const std::vector<TransportResult>& results);

}  // namespace agt
