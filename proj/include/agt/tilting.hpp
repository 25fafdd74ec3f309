#pragma once

// Exponential tilting of a base covariate sample toward reported trial
// moments, and the representer weights built from the tilts.

#include "agt/aggdata.hpp"

#include <functional>
#include <string>
#include <vector>

namespace agt {

struct TiltOptions {
  double tolerance = 1e-9;  // max-abs residual on standardized moments
  int max_iterations = 200;
  double backtrack = 0.5;   // step shrink factor of the line search
  double armijo = 1e-4;     // sufficient-decrease constant
  double eta_limit = 40.0;  // standardized |eta| beyond which the target is declared unreachable
};

/// Where a target moment sits relative to the base-sample support.
struct HullPosition {
  std::string moment;
  double target = 0.0;
  double base_min = 0.0;
  double base_max = 0.0;
  bool inside = true;
};

class InfeasibleMoments : public NumericalError {
 public:
  InfeasibleMoments(const std::string& message, std::vector<HullPosition> hull)
      : NumericalError("tilting", message), hull_(std::move(hull)) {}
  const std::vector<HullPosition>& hull() const { return hull_; }

 private:
  std::vector<HullPosition> hull_;
};

/// Base-sample design H+ with a leading column of ones, one row per base row.
Matrix moment_design(const CovariateSample& base, const std::vector<MomentSpec>& specs);

struct TiltFit {
  std::string trial;
  std::vector<MomentSpec> specs;
  Vector mu_plus;      // targets (1, mu_hat)
  Vector eta;          // w(x) = exp(eta' h+(x)), intercept first
  Matrix design;       // H+ over the base sample
  Vector weights;      // w(X_i; eta) per base row
  double residual_norm = 0.0;  // max-abs standardized residual
  Vector raw_residual;         // mean(w h+) - mu_plus
  int iterations = 0;
  std::vector<double> objective_trace;  // dual objective per accepted iterate

  std::size_t dim() const { return static_cast<std::size_t>(eta.size()); }
  /// Same design evaluated at another eta; used by finite-difference checks.
  TiltFit with_eta(const Vector& new_eta) const;
};

TiltFit solve_tilt(const CovariateSample& base, const std::vector<MomentSpec>& specs, const Vector& mu_plus,
                   const TiltOptions& options = {}, std::string trial = {});

/// One tilt per trial, in dataset order.
std::vector<TiltFit> solve_tilts(const MetaDataset& dataset, const CovariateSample& base,
                                 const TiltOptions& options = {});

// ---------------------------------------------------------------------------
// Representers
// ---------------------------------------------------------------------------

struct RepresenterColumn {
  std::size_t trial = 0;      // dataset trial index
  std::size_t covariate = 0;  // 1-based, 0 = marginal
  std::size_t level = 0;      // 1-based, 0 = marginal
  std::string label;
  bool normalized = false;    // divided by mean(w * factor) over the base sample
  double normalizer = 1.0;
};

/// n_q x J matrix; column j is alpha_j evaluated on the base rows, ordered to
/// match the stacked effect vector of the dataset.
struct RepresenterMatrix {
  Matrix values;
  std::vector<RepresenterColumn> columns;
  /// Per column, the factor multiplying w before normalization (stratum
  /// indicator, times b(x) in relative mode).
  Matrix factors;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(values.cols()); }
};

RepresenterMatrix evaluate_representers(const std::vector<TiltFit>& tilts, const CovariateSample& base,
                                        const MetaDataset& dataset);

using BaselineFn = std::function<double(Row)>;

/// Relative-scale representers w b I / mean(w b I); every column normalized.
RepresenterMatrix evaluate_relative_representers(const std::vector<TiltFit>& tilts, const CovariateSample& base,
                                                 const MetaDataset& dataset, const BaselineFn& b);

/// d alpha_j / d eta_s over the base rows (n_q x dim(eta_s)), for a column
/// belonging to trial s.
Matrix representer_eta_derivative(const RepresenterMatrix& reps, std::size_t column, const TiltFit& tilt);

}  // namespace agt
