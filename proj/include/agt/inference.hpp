#pragma once

// Plug-in sandwich variance for theta_hat: within-trial covariance
// approximations, Omega_hat assembly and V_theta.

#include "agt/gmm.hpp"

namespace agt {

/// Approximate per-observation covariance of one trial's reported effects.
struct SigmaTau {
  Matrix sigma;          // n_s diag(se) C diag(se)
  Matrix correlation;    // C after clipping and PSD repair
  double psd_repair = 0.0;  // negative eigenvalue mass clipped from C
  std::vector<std::string> warnings;
};

/// Correlations from the homoscedastic difference-in-means working model,
/// with stratum probabilities under the tilted base sample; clipped to
/// [-clip, clip].
SigmaTau approximate_sigma_tau(const Trial& trial, const TiltFit& tilt, const CovariateSample& base,
                               const CovariateSchema& schema, double clip = 0.999);

/// Tilted covariance of h+: mean(w (h+ - mu+)(h+ - mu+)').
Matrix approximate_sigma_mu(const TiltFit& tilt);

struct TrialCovariance {
  std::string trial;
  Matrix sigma_tau;     // J_s x J_s
  Matrix sigma_mu;      // (R_s + 1) x (R_s + 1)
  Matrix sigma_taumu;   // J_s x (R_s + 1), zero unless supplied
  double psd_repair = 0.0;
  std::vector<std::string> warnings;
};

std::vector<TrialCovariance> approximate_covariances(const MetaDataset& dataset, const std::vector<TiltFit>& tilts,
                                                     const CovariateSample& base);

struct SampleSizes {
  double n_q = 0.0;
  std::vector<double> n_s;
  double n_0 = 0.0;  // target sample; 0 when no target is involved

  /// n = n_0 + sum_s n_s.
  double total() const;
  static SampleSizes from(const MetaDataset& dataset, const CovariateSample& base, double n_0 = 0.0);
};

struct VarianceOptions {
  /// Drop the base-sample term, as if Q were known exactly.
  bool treat_q_exact = false;
};

struct VarianceReport {
  Matrix omega;                  // Omega_hat, J x J
  Matrix omega_q;                // pi_q Gamma_q
  std::vector<Matrix> omega_s;   // pi_s Gamma_s per trial
  Matrix V_theta;                // J^theta_m Omega (J^theta_m)'
  Matrix var_theta;              // V_theta / n
  double n_total = 0.0;
  double pi_q = 0.0;
  std::vector<double> pi_s;
  double pi_0 = 0.0;
  double share_q = 0.0;               // trace share of V_theta from the base sample
  std::vector<double> share_s;        // per trial
  double psd_repair = 0.0;            // eigenvalue mass clipped from Omega_hat
  std::vector<std::string> warnings;
};

/// Omega_hat at theta together with its per-source parts.
struct OmegaParts {
  Matrix omega;
  Matrix omega_q;
  std::vector<Matrix> omega_s;
  double psd_repair = 0.0;
};

OmegaParts estimate_omega(const MomentSystem& system, const Vector& theta, const JacobianSet& jacobians,
                          const std::vector<TiltFit>& tilts, const std::vector<TrialCovariance>& covs,
                          const SampleSizes& sizes, const VarianceOptions& options = {});

VarianceReport assemble_variance(const CateFit& fit, const MomentSystem& system, const JacobianSet& jacobians,
                                 const std::vector<TiltFit>& tilts, const std::vector<TrialCovariance>& covs,
                                 const SampleSizes& sizes, const VarianceOptions& options = {});

/// Omega_hat as a function of theta for the second GMM step.
OmegaFn make_omega_fn(const MomentSystem& system, const std::vector<TiltFit>& tilts,
                      const std::vector<TrialCovariance>& covs, const SampleSizes& sizes,
                      const VarianceOptions& options = {});

/// Wald interval estimate +/- 1.96 se.
struct Interval95 {
  double lo = 0.0;
  double hi = 0.0;
};
Interval95 wald_interval(double estimate, double se);

}  // namespace agt
