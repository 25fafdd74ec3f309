#pragma once

// Stacked representer moments M(theta) = mean(alpha g(.; theta)) - tau_hat,
// GMM fitting of theta, and the Jacobian blocks used by the variance
// estimator.

#include "agt/cate.hpp"
#include "agt/tilting.hpp"

#include <functional>
#include <memory>
#include <optional>

namespace agt {

enum class Weighting { identity, inverse_se2, two_step };

std::string to_string(Weighting w);
Weighting parse_weighting(std::string_view text);

/// Raised when the moment Jacobian does not have full column rank.
class RankDeficient : public NumericalError {
 public:
  RankDeficient(const std::string& message, Vector singular_values)
      : NumericalError("gmm", message), singular_values_(std::move(singular_values)) {}
  const Vector& singular_values() const { return singular_values_; }

 private:
  Vector singular_values_;
};

class MomentSystem {
 public:
  /// Requires J >= d; representers must be evaluated on `base` for `dataset`.
  MomentSystem(const MetaDataset& dataset, CovariateSample base, RepresenterMatrix representers,
               const CateModel& model);

  MomentSystem(const MomentSystem& other);
  MomentSystem& operator=(const MomentSystem& other);
  MomentSystem(MomentSystem&&) noexcept = default;
  MomentSystem& operator=(MomentSystem&&) noexcept = default;

  std::size_t moments() const { return static_cast<std::size_t>(tau_.size()); }
  std::size_t dim() const { return model_->dim(); }
  std::size_t base_rows() const { return base_.rows(); }

  const MetaDataset& dataset() const { return dataset_; }
  const CovariateSample& base() const { return base_; }
  const RepresenterMatrix& representers() const { return reps_; }
  const CateModel& model() const { return *model_; }
  const Vector& tau() const { return tau_; }
  const Vector& se() const { return se_; }

  /// Dataset trial index and CATE time stratum of moment j.
  std::size_t column_trial(std::size_t j) const { return reps_.columns.at(j).trial; }
  std::size_t column_stratum(std::size_t j) const { return column_stratum_.at(j); }
  /// Moment indices [first, first + count) belonging to trial s.
  std::pair<std::size_t, std::size_t> trial_block(std::size_t s) const { return trial_blocks_.at(s); }

  /// g(X_i; theta) for every base row, one column per time stratum.
  Matrix g_values(const Vector& theta) const;
  /// M_hat(theta), length J.
  Vector stack(const Vector& theta) const;
  /// J^m_theta = mean(alpha dg/dtheta), J x d.
  Matrix jacobian_theta(const Vector& theta) const;
  /// Per-row influence of the base sample on M_hat with eta held fixed,
  /// n_q x J, centered. Unnormalized columns give alpha g - mean(alpha g);
  /// normalized columns give alpha (g - mean(alpha g)), the linearization of
  /// the ratio mean(w f g) / mean(w f).
  Matrix base_influence(const Vector& theta) const;

 private:
  MetaDataset dataset_;
  CovariateSample base_;
  RepresenterMatrix reps_;
  std::unique_ptr<CateModel> model_;
  Vector tau_;
  Vector se_;
  std::vector<std::size_t> column_stratum_;
  std::vector<std::pair<std::size_t, std::size_t>> trial_blocks_;
  std::vector<Matrix> features_;  // linear models: phi over base rows per stratum
};

/// Stacked moments at theta; same as system.stack(theta).
Vector stack_moments(const MomentSystem& system, const Vector& theta);

/// Omega_hat as a function of theta, used by the second GMM step and the
/// J-statistic.
using OmegaFn = std::function<Matrix(const Vector& theta)>;

struct FitOptions {
  Weighting weighting = Weighting::inverse_se2;
  int max_iterations = 500;
  int multistarts = 5;
  std::uint64_t seed = 1;
  double tolerance = 1e-12;       // relative objective change for Gauss-Newton convergence
  double rank_threshold = 1e-7;   // smallest / largest singular value of standardized J^m_theta
  bool force_iterative = false;   // use Gauss-Newton even for linear models
  /// Sample size used in the J-statistic n M' Omega^-1 M.
  double n_total = 0.0;
};

struct CateFit {
  std::shared_ptr<const CateModel> model;
  std::vector<std::string> trials;  // ids of the trials the fit used
  Vector theta;
  std::vector<std::string> parameter_names;
  Matrix weight;             // W used in the final step
  Weighting weighting = Weighting::inverse_se2;  // weighting actually used
  Vector residuals;          // M_hat(theta_hat)
  double objective = 0.0;    // M' W M
  double foc_norm = 0.0;     // |J' W M| / (|J' W| |tau|)
  std::optional<double> j_statistic;
  int degrees_of_freedom = 0;  // J - d
  Vector singular_values;    // of the standardized J^m_theta
  int iterations = 0;
  bool closed_form = false;
  std::vector<std::string> warnings;

  // Filled by the variance step.
  Matrix V_theta;            // asymptotic covariance V_theta
  double n_total = 0.0;      // n in Var(theta_hat) = V_theta / n

  Matrix var_theta() const;
  Vector standard_errors() const;
};

CateFit fit(const MomentSystem& system, const FitOptions& options = {}, const OmegaFn& omega = {});

/// Smallest/largest singular value check on J^m_theta with rows scaled by
/// 1/se and columns scaled to unit norm; throws RankDeficient.
Vector check_rank(const MomentSystem& system, const Vector& theta, double threshold = 1e-7);

struct JacobianSet {
  Matrix J_m_theta;                 // J x d
  Matrix J_theta_m;                 // d x J
  std::vector<Matrix> J_m_tau;      // per trial, J x J_s (minus the embedding)
  std::vector<Matrix> J_m_eta;      // per trial, J x (R_s + 1)
  std::vector<Matrix> J_eta_mu;     // per trial, (R_s + 1) x (R_s + 1)
  std::vector<Matrix> A;            // per trial, J_m_eta * J_eta_mu
};

JacobianSet compute_jacobians(const MomentSystem& system, const Vector& theta, const Matrix& weight,
                              const std::vector<TiltFit>& tilts);

}  // namespace agt
