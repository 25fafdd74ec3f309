#include "agt/inference.hpp"

#include <cmath>
#include <sstream>

namespace agt {

namespace {

constexpr std::string_view kModule = "inference";
// Negative eigenvalue mass below this fraction of the trace is rounding noise.
constexpr double kRoundoff = 1e-12;

InputError input_error(const std::string& msg) { return InputError(std::string(kModule), msg); }

std::string effect_label(const Trial& trial, const EffectEstimate& e, const CovariateSchema& schema) {
  if (e.is_marginal()) return trial.id + ":overall";
  return trial.id + ":" + schema.covariate(e.covariate - 1).name + "=" + e.stratum_label;
}

}  // namespace

SigmaTau approximate_sigma_tau(const Trial& trial, const TiltFit& tilt, const CovariateSample& base,
                               const CovariateSchema& schema, double clip) {
  const std::size_t J = trial.effects.size();
  const auto n = static_cast<Eigen::Index>(base.rows());
  if (tilt.weights.size() != n) throw input_error("tilt was solved on a different base sample");
  if (!(trial.n > 0.0)) throw input_error("trial '" + trial.id + "' has no sample size");

  Vector se(static_cast<Eigen::Index>(J));
  Matrix ind(n, static_cast<Eigen::Index>(J));
  for (std::size_t j = 0; j < J; ++j) {
    const EffectEstimate& e = trial.effects[j];
    if (!(e.se > 0.0) || !std::isfinite(e.se)) {
      throw input_error("missing standard error for " + effect_label(trial, e, schema));
    }
    se(static_cast<Eigen::Index>(j)) = e.se;
    if (e.is_marginal()) {
      ind.col(static_cast<Eigen::Index>(j)).setOnes();
      continue;
    }
    const Stratum st = schema.strata_for(trial.id, e.covariate - 1).at(e.level - 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      ind(i, static_cast<Eigen::Index>(j)) = st.contains_row(base.row(static_cast<std::size_t>(i))) ? 1.0 : 0.0;
    }
  }

  // Tilted probabilities of every stratum and every pair of strata.
  const Vector w = tilt.weights / tilt.weights.mean();
  const Matrix weighted = ind.array().colwise() * w.array();
  const Matrix joint = weighted.transpose() * ind / static_cast<double>(n);

  SigmaTau out;
  Matrix C = Matrix::Identity(static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(J));
  int clipped = 0;
  for (std::size_t a = 0; a < J; ++a) {
    for (std::size_t b = a + 1; b < J; ++b) {
      const EffectEstimate& ea = trial.effects[a];
      const EffectEstimate& eb = trial.effects[b];
      const auto ia = static_cast<Eigen::Index>(a);
      const auto ib = static_cast<Eigen::Index>(b);
      double r = 0.0;
      if (ea.is_marginal() || eb.is_marginal()) {
        const auto overall = ea.is_marginal() ? ia : ib;
        const auto sub = ea.is_marginal() ? ib : ia;
        r = joint(sub, sub) * se(sub) / se(overall);
      } else if (ea.covariate == eb.covariate) {
        r = 0.0;
      } else {
        const double denom = std::sqrt(joint(ia, ia) * joint(ib, ib));
        r = denom > 0.0 ? joint(ia, ib) / denom : 0.0;
      }
      if (std::abs(r) > clip) {
        r = std::copysign(clip, r);
        ++clipped;
      }
      C(ia, ib) = C(ib, ia) = r;
    }
  }
  if (clipped > 0) {
    out.warnings.push_back("trial '" + trial.id + "': " + std::to_string(clipped) +
                           " approximate effect correlations clipped to +/-" + std::to_string(clip));
  }

  double mass = 0.0;
  Matrix repaired = nearest_psd(C, &mass);
  if (mass <= kRoundoff * static_cast<double>(J)) {
    mass = 0.0;
    repaired = C;
  } else {
    const Vector d = repaired.diagonal().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
    repaired = d.asDiagonal() * repaired * d.asDiagonal();
    std::ostringstream msg;
    msg << "trial '" << trial.id << "': effect correlation matrix repaired to PSD (clipped eigenvalue mass " << mass
        << ")";
    out.warnings.push_back(msg.str());
  }
  out.psd_repair = mass;
  out.correlation = repaired;
  out.sigma = trial.n * se.asDiagonal() * repaired * se.asDiagonal();

  // The correlation formulas assume se^2 proportional to 1 / (stratum size).
  const EffectEstimate* overall = nullptr;
  for (const auto& e : trial.effects) {
    if (e.is_marginal()) overall = &e;
  }
  if (overall != nullptr && overall->counts) {
    const double n_all = static_cast<double>(overall->counts->n1 + overall->counts->n0);
    for (const auto& e : trial.effects) {
      if (e.is_marginal() || !e.counts) continue;
      const double n_sub = static_cast<double>(e.counts->n1 + e.counts->n0);
      if (!(n_sub > 0.0) || !(n_all > 0.0)) continue;
      const double ratio = (e.se * e.se * n_sub) / (overall->se * overall->se * n_all);
      if (ratio > 2.0 || ratio < 0.5) {
        std::ostringstream msg;
        msg << effect_label(trial, e, schema) << ": size-scaled variance differs from the overall effect by a factor "
            << ratio << "; homoscedastic correlation approximations may be poor";
        out.warnings.push_back(msg.str());
      }
    }
  }
  return out;
}

Matrix approximate_sigma_mu(const TiltFit& tilt) {
  const auto n = static_cast<double>(tilt.design.rows());
  const Matrix centered = tilt.design.rowwise() - tilt.mu_plus.transpose();
  const Matrix weighted = centered.array().colwise() * tilt.weights.array();
  const Matrix s = weighted.transpose() * centered / n;
  return 0.5 * (s + s.transpose());
}

std::vector<TrialCovariance> approximate_covariances(const MetaDataset& dataset, const std::vector<TiltFit>& tilts,
                                                     const CovariateSample& base) {
  if (tilts.size() != dataset.trial_count()) throw input_error("one tilt per trial is required");
  std::vector<TrialCovariance> out;
  for (std::size_t s = 0; s < dataset.trial_count(); ++s) {
    const Trial& t = dataset.trials()[s];
    SigmaTau st = approximate_sigma_tau(t, tilts[s], base, dataset.schema());
    TrialCovariance c;
    c.trial = t.id;
    c.sigma_tau = std::move(st.sigma);
    c.sigma_mu = approximate_sigma_mu(tilts[s]);
    c.sigma_taumu = Matrix::Zero(c.sigma_tau.rows(), c.sigma_mu.rows());
    c.psd_repair = st.psd_repair;
    c.warnings = std::move(st.warnings);
    out.push_back(std::move(c));
  }
  return out;
}

double SampleSizes::total() const {
  double n = n_0;
  for (double v : n_s) n += v;
  return n;
}

SampleSizes SampleSizes::from(const MetaDataset& dataset, const CovariateSample& base, double n_0) {
  SampleSizes s;
  s.n_q = static_cast<double>(base.rows());
  s.n_0 = n_0;
  for (const auto& t : dataset.trials()) {
    if (!(t.n > 0.0)) throw input_error("trial '" + t.id + "' has no sample size");
    s.n_s.push_back(t.n);
  }
  return s;
}

OmegaParts estimate_omega(const MomentSystem& system, const Vector& theta, const JacobianSet& jacobians,
                          const std::vector<TiltFit>& tilts, const std::vector<TrialCovariance>& covs,
                          const SampleSizes& sizes, const VarianceOptions& options) {
  const std::size_t m = system.dataset().trial_count();
  if (tilts.size() != m || covs.size() != m || sizes.n_s.size() != m || jacobians.A.size() != m) {
    throw input_error("variance inputs do not cover every trial");
  }
  if (!(sizes.n_q > 0.0)) throw input_error("base sample size must be positive");
  const double n = sizes.total();
  const auto J = static_cast<Eigen::Index>(system.moments());

  OmegaParts out;
  out.omega_q = Matrix::Zero(J, J);
  if (!options.treat_q_exact) {
    Matrix xi = system.base_influence(theta);
    for (std::size_t s = 0; s < m; ++s) {
      const TiltFit& t = tilts[s];
      const Matrix wh = (t.design.array().colwise() * t.weights.array()).matrix().rowwise() - t.mu_plus.transpose();
      xi += wh * jacobians.A[s].transpose();
    }
    xi.rowwise() -= xi.colwise().mean();
    const double nq = static_cast<double>(xi.rows());
    out.omega_q = (n / sizes.n_q) * (xi.transpose() * xi) / nq;
  }

  out.omega = out.omega_q;
  for (std::size_t s = 0; s < m; ++s) {
    const TrialCovariance& c = covs[s];
    const Matrix& Jt = jacobians.J_m_tau[s];
    const Matrix& A = jacobians.A[s];
    if (c.sigma_tau.rows() != Jt.cols() || c.sigma_mu.rows() != A.cols()) {
      throw input_error("covariance blocks for trial '" + c.trial + "' do not match the moment layout");
    }
    Matrix gamma = Jt * c.sigma_tau * Jt.transpose() + A * c.sigma_mu * A.transpose();
    if (c.sigma_taumu.size() > 0 && c.sigma_taumu.cwiseAbs().maxCoeff() > 0.0) {
      const Matrix cross = Jt * c.sigma_taumu * A.transpose();
      gamma -= cross + cross.transpose();
    }
    if (!(sizes.n_s[s] > 0.0)) throw input_error("trial sample sizes must be positive");
    out.omega_s.push_back((n / sizes.n_s[s]) * gamma);
    out.omega += out.omega_s.back();
  }
  const double trace = out.omega.trace();
  Matrix repaired = nearest_psd(out.omega, &out.psd_repair);
  if (out.psd_repair > kRoundoff * std::max(trace, 0.0)) {
    out.omega = std::move(repaired);
  } else {
    out.psd_repair = 0.0;
    out.omega = 0.5 * (out.omega + out.omega.transpose());
  }
  return out;
}

VarianceReport assemble_variance(const CateFit& fit, const MomentSystem& system, const JacobianSet& jacobians,
                                 const std::vector<TiltFit>& tilts, const std::vector<TrialCovariance>& covs,
                                 const SampleSizes& sizes, const VarianceOptions& options) {
  OmegaParts parts = estimate_omega(system, fit.theta, jacobians, tilts, covs, sizes, options);
  VarianceReport r;
  r.n_total = sizes.total();
  r.pi_q = options.treat_q_exact ? 0.0 : r.n_total / sizes.n_q;
  for (double ns : sizes.n_s) r.pi_s.push_back(r.n_total / ns);
  r.pi_0 = sizes.n_0 > 0.0 ? r.n_total / sizes.n_0 : 0.0;

  const Matrix& Jtm = jacobians.J_theta_m;
  const auto sandwich = [&](const Matrix& om) {
    const Matrix v = Jtm * om * Jtm.transpose();
    return Matrix(0.5 * (v + v.transpose()));
  };
  r.V_theta = sandwich(parts.omega);
  r.var_theta = r.V_theta / r.n_total;

  const double trace = r.V_theta.trace();
  r.share_q = trace > 0.0 ? sandwich(parts.omega_q).trace() / trace : 0.0;
  for (const auto& o : parts.omega_s) r.share_s.push_back(trace > 0.0 ? sandwich(o).trace() / trace : 0.0);

  r.psd_repair = parts.psd_repair;
  if (parts.psd_repair > 0.0) {
    std::ostringstream msg;
    msg << "Omega_hat repaired to PSD (clipped eigenvalue mass " << parts.psd_repair << ", trace "
        << parts.omega.trace() << ")";
    r.warnings.push_back(msg.str());
  }
  for (const auto& c : covs) r.warnings.insert(r.warnings.end(), c.warnings.begin(), c.warnings.end());

  r.omega = std::move(parts.omega);
  r.omega_q = std::move(parts.omega_q);
  r.omega_s = std::move(parts.omega_s);
  return r;
}

OmegaFn make_omega_fn(const MomentSystem& system, const std::vector<TiltFit>& tilts,
                      const std::vector<TrialCovariance>& covs, const SampleSizes& sizes,
                      const VarianceOptions& options) {
  // The returned closure refers to its arguments; they must outlive it.
  return [&system, &tilts, &covs, sizes, options](const Vector& theta) {
    const auto J = static_cast<Eigen::Index>(system.moments());
    const JacobianSet jac = compute_jacobians(system, theta, Matrix::Identity(J, J), tilts);
    return estimate_omega(system, theta, jac, tilts, covs, sizes, options).omega;
  };
}

Interval95 wald_interval(double estimate, double se) {
  return Interval95{estimate - kWaldZ * se, estimate + kWaldZ * se};
}

}  // namespace agt
