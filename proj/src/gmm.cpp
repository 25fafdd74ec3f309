#include "agt/gmm.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace agt {

namespace {

constexpr std::string_view kModule = "gmm";

InputError input_error(const std::string& msg) { return InputError(std::string(kModule), msg); }

}  // namespace

std::string to_string(Weighting w) {
  switch (w) {
    case Weighting::identity: return "identity";
    case Weighting::inverse_se2: return "inverse-se2";
    case Weighting::two_step: return "two-step";
  }
  return "?";
}

Weighting parse_weighting(std::string_view text) {
  if (text == "identity") return Weighting::identity;
  if (text == "inverse-se2" || text == "inverse_se2") return Weighting::inverse_se2;
  if (text == "two-step" || text == "two_step") return Weighting::two_step;
  throw input_error("unknown weighting '" + std::string(text) + "' (identity, inverse-se2, two-step)");
}

// ---------------------------------------------------------------------------
// MomentSystem
// ---------------------------------------------------------------------------

MomentSystem::MomentSystem(const MetaDataset& dataset, CovariateSample base, RepresenterMatrix representers,
                           const CateModel& model)
    : dataset_(dataset),
      base_(std::move(base)),
      reps_(std::move(representers)),
      model_(model.clone()),
      tau_(dataset.stacked_estimates()),
      se_(dataset.stacked_standard_errors()) {
  const std::size_t J = moments();
  if (reps_.cols() != J) {
    throw input_error("representer matrix has " + std::to_string(reps_.cols()) + " columns for " + std::to_string(J) +
                      " effect moments");
  }
  if (reps_.rows() != base_.rows()) throw input_error("representers were evaluated on a different base sample");
  if (J < dim()) {
    throw input_error("only " + std::to_string(J) + " effect moments for a CATE model with " + std::to_string(dim()) +
                      " parameters; the moment conditions need J >= d");
  }

  column_stratum_.reserve(J);
  for (std::size_t j = 0; j < J; ++j) {
    const std::size_t s = reps_.columns[j].trial;
    column_stratum_.push_back(model_->stratum_of(dataset_.trials().at(s).id));
  }
  std::size_t first = 0;
  for (const auto& t : dataset_.trials()) {
    trial_blocks_.emplace_back(first, t.effects.size());
    first += t.effects.size();
  }

  if (model_->linear_in_parameters()) {
    const Vector zero = Vector::Zero(static_cast<Eigen::Index>(dim()));
    const auto n = static_cast<Eigen::Index>(base_.rows());
    for (std::size_t t = 0; t < model_->stratum_count(); ++t) {
      Matrix phi(n, static_cast<Eigen::Index>(dim()));
      for (Eigen::Index i = 0; i < n; ++i) phi.row(i) = model_->gradient(base_.row(static_cast<std::size_t>(i)), zero, t);
      features_.push_back(std::move(phi));
    }
  }
}

MomentSystem::MomentSystem(const MomentSystem& other)
    : dataset_(other.dataset_),
      base_(other.base_),
      reps_(other.reps_),
      model_(other.model_->clone()),
      tau_(other.tau_),
      se_(other.se_),
      column_stratum_(other.column_stratum_),
      trial_blocks_(other.trial_blocks_),
      features_(other.features_) {}

MomentSystem& MomentSystem::operator=(const MomentSystem& other) {
  if (this != &other) *this = MomentSystem(other);
  return *this;
}

Matrix MomentSystem::g_values(const Vector& theta) const {
  if (static_cast<std::size_t>(theta.size()) != dim()) {
    throw input_error("theta has length " + std::to_string(theta.size()) + ", model dimension is " +
                      std::to_string(dim()));
  }
  const auto n = static_cast<Eigen::Index>(base_.rows());
  const auto T = static_cast<Eigen::Index>(model_->stratum_count());
  Matrix g(n, T);
  for (Eigen::Index t = 0; t < T; ++t) {
    if (!features_.empty()) {
      g.col(t) = features_[static_cast<std::size_t>(t)] * theta;
    } else {
      for (Eigen::Index i = 0; i < n; ++i) {
        g(i, t) = model_->evaluate(base_.row(static_cast<std::size_t>(i)), theta, static_cast<std::size_t>(t));
      }
    }
  }
  return g;
}

Vector MomentSystem::stack(const Vector& theta) const {
  const Matrix g = g_values(theta);
  const auto n = static_cast<double>(base_.rows());
  Vector m(tau_.size());
  for (Eigen::Index j = 0; j < m.size(); ++j) {
    const auto t = static_cast<Eigen::Index>(column_stratum_[static_cast<std::size_t>(j)]);
    m(j) = reps_.values.col(j).dot(g.col(t)) / n - tau_(j);
  }
  return m;
}

Matrix MomentSystem::jacobian_theta(const Vector& theta) const {
  if (static_cast<std::size_t>(theta.size()) != dim()) throw input_error("theta has the wrong length");
  const auto n = static_cast<Eigen::Index>(base_.rows());
  const auto d = static_cast<Eigen::Index>(dim());
  const auto J = tau_.size();
  Matrix out(J, d);
  for (std::size_t t = 0; t < model_->stratum_count(); ++t) {
    Matrix grad_storage;
    const Matrix* grad = nullptr;
    if (!features_.empty()) {
      grad = &features_[t];
    } else {
      grad_storage.resize(n, d);
      for (Eigen::Index i = 0; i < n; ++i) grad_storage.row(i) = model_->gradient(base_.row(static_cast<std::size_t>(i)), theta, t);
      grad = &grad_storage;
    }
    for (Eigen::Index j = 0; j < J; ++j) {
      if (column_stratum_[static_cast<std::size_t>(j)] != t) continue;
      out.row(j) = reps_.values.col(j).transpose() * (*grad) / static_cast<double>(n);
    }
  }
  return out;
}

Matrix MomentSystem::base_influence(const Vector& theta) const {
  const Matrix g = g_values(theta);
  const auto J = tau_.size();
  Matrix out(g.rows(), J);
  for (Eigen::Index j = 0; j < J; ++j) {
    const auto t = static_cast<Eigen::Index>(column_stratum_[static_cast<std::size_t>(j)]);
    const Vector ag = reps_.values.col(j).cwiseProduct(g.col(t));
    const double gbar = ag.mean();
    if (reps_.columns[static_cast<std::size_t>(j)].normalized) {
      out.col(j) = ag - gbar * reps_.values.col(j);
    } else {
      out.col(j) = ag.array() - gbar;
    }
  }
  return out;
}

Vector stack_moments(const MomentSystem& system, const Vector& theta) { return system.stack(theta); }

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

Matrix CateFit::var_theta() const {
  if (V_theta.size() == 0 || !(n_total > 0.0)) {
    throw Error("gmm", "variance has not been estimated for this fit");
  }
  return V_theta / n_total;
}

Vector CateFit::standard_errors() const { return var_theta().diagonal().cwiseMax(0.0).cwiseSqrt(); }

Vector check_rank(const MomentSystem& system, const Vector& theta, double threshold) {
  Matrix J = system.jacobian_theta(theta);
  J = J.array().colwise() / system.se().array();
  for (Eigen::Index c = 0; c < J.cols(); ++c) {
    const double norm = J.col(c).norm();
    if (norm > 0.0) J.col(c) /= norm;
  }
  const Vector sv = Eigen::JacobiSVD<Matrix>(J).singularValues();
  const double top = sv.size() > 0 ? sv(0) : 0.0;
  const double bottom = sv.size() > 0 ? sv(sv.size() - 1) : 0.0;
  if (!(top > 0.0) || bottom < threshold * top) {
    throw RankDeficient("moment Jacobian J^m_theta is rank deficient (smallest/largest singular value " +
                            std::to_string(top > 0.0 ? bottom / top : 0.0) +
                            "); the reported effects do not identify every CATE parameter",
                        sv);
  }
  return sv;
}

namespace {

struct Weighted {
  Matrix W;
  Matrix U;  // upper Cholesky factor, W = U' U
};

Weighted make_weighted(Matrix W) {
  W = 0.5 * (W + W.transpose());
  Eigen::LLT<Matrix> llt(W);
  if (llt.info() != Eigen::Success) throw NumericalError(std::string(kModule), "weighting matrix is not positive definite");
  return Weighted{W, llt.matrixU()};
}

double objective(const Vector& m, const Matrix& W) { return m.dot(W * m); }

// Closed-form weighted least squares for M(theta) = J theta + M(0).
Vector solve_linear(const MomentSystem& system, const Weighted& w) {
  const Vector zero = Vector::Zero(static_cast<Eigen::Index>(system.dim()));
  const Matrix J = system.jacobian_theta(zero);
  const Vector m0 = system.stack(zero);
  const Matrix A = w.U * J;
  const Vector b = -(w.U * m0);
  return A.colPivHouseholderQr().solve(b);
}

struct LmResult {
  Vector theta;
  double value = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

// Levenberg-damped Gauss-Newton on r(theta) = U M(theta).
LmResult levenberg(const MomentSystem& system, const Weighted& w, Vector theta, const FitOptions& opt) {
  LmResult res;
  Vector m = system.stack(theta);
  double value = objective(m, w.W);
  double lambda = 1e-3;
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    const Matrix A = w.U * system.jacobian_theta(theta);
    const Vector r = w.U * m;
    const Matrix AtA = A.transpose() * A;
    const Vector grad = A.transpose() * r;
    const double scale = A.norm() * std::max(r.norm(), 1e-300);
    if (grad.norm() <= 1e-13 * scale || value <= 1e-300) {
      res.converged = true;
      break;
    }
    bool accepted = false;
    while (lambda < 1e16) {
      Matrix damped = AtA;
      damped.diagonal() += lambda * AtA.diagonal().cwiseMax(1e-12 * AtA.diagonal().maxCoeff());
      const Vector step = damped.ldlt().solve(-grad);
      const Vector candidate = theta + step;
      const Vector mc = system.stack(candidate);
      const double vc = objective(mc, w.W);
      if (std::isfinite(vc) && vc <= value) {
        const bool small = step.norm() <= 1e-14 * (theta.norm() + 1e-14) ||
                           value - vc <= opt.tolerance * value;
        theta = candidate;
        m = mc;
        value = vc;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        if (small) res.converged = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) {
      // No decrease possible at any damping: stationary to working precision.
      res.converged = true;
      break;
    }
    if (res.converged) break;
  }
  res.theta = std::move(theta);
  res.value = value;
  res.iterations = it;
  return res;
}

struct StepResult {
  Vector theta;
  int iterations = 0;
  bool closed_form = false;
};

StepResult solve_step(const MomentSystem& system, const Weighted& w, const FitOptions& opt) {
  if (system.model().linear_in_parameters() && !opt.force_iterative) {
    return StepResult{solve_linear(system, w), 0, true};
  }
  // Start from the solution of the problem linearized at theta = 0.
  const Vector start = solve_linear(system, w);
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> z(0.0, 1.0);
  const int starts = system.model().linear_in_parameters() ? 1 : std::max(1, opt.multistarts);
  LmResult best;
  int total_iterations = 0;
  bool any_converged = false;
  for (int k = 0; k < starts; ++k) {
    Vector init = start;
    if (k > 0) {
      for (Eigen::Index p = 0; p < init.size(); ++p) init(p) += 0.5 * (1.0 + std::abs(start(p))) * z(rng);
    }
    LmResult r = levenberg(system, w, init, opt);
    total_iterations += r.iterations;
    if (!r.converged) continue;
    any_converged = true;
    if (r.value < best.value) best = std::move(r);
  }
  if (!any_converged) {
    throw NumericalError(std::string(kModule), "Gauss-Newton did not converge within " +
                                                   std::to_string(opt.max_iterations) + " iterations from any of " +
                                                   std::to_string(starts) + " starting points");
  }
  return StepResult{best.theta, total_iterations, false};
}

Matrix first_step_weight(const MomentSystem& system, Weighting w) {
  const auto J = static_cast<Eigen::Index>(system.moments());
  if (w == Weighting::identity) return Matrix::Identity(J, J);
  const Vector& se = system.se();
  if ((se.array() <= 0.0).any()) throw input_error("inverse-se2 weighting needs positive standard errors");
  return se.array().square().inverse().matrix().asDiagonal();
}

// Omega_hat^{-1} for the second step; nullopt when Omega_hat is singular.
std::optional<Matrix> invert_omega(const Matrix& omega, std::vector<std::string>& warnings) {
  const Matrix sym = 0.5 * (omega + omega.transpose());
  if (!sym.allFinite()) return std::nullopt;
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
  const Vector ev = es.eigenvalues();
  const double top = ev.maxCoeff();
  const double bottom = ev.minCoeff();
  if (!(top > 0.0) || bottom <= 1e-14 * top) return std::nullopt;
  Matrix reg = sym;
  if (bottom < 1e-8 * top) {
    const double ridge = 1e-8 * sym.trace() / static_cast<double>(sym.rows());
    reg.diagonal().array() += ridge;
    warnings.push_back("Omega_hat is near-singular (eigenvalue ratio " + std::to_string(bottom / top) +
                       "); added ridge " + std::to_string(ridge) + " before inversion");
  }
  Matrix inv = reg.ldlt().solve(Matrix::Identity(reg.rows(), reg.cols()));
  return Matrix(0.5 * (inv + inv.transpose()));
}

double foc_norm(const MomentSystem& system, const Vector& theta, const Matrix& W, const Vector& m) {
  const Matrix JtW = system.jacobian_theta(theta).transpose() * W;
  const double scale = JtW.norm() * std::max(system.tau().norm(), 1e-12);
  return (JtW * m).norm() / scale;
}

}  // namespace

CateFit fit(const MomentSystem& system, const FitOptions& options, const OmegaFn& omega) {
  if (options.weighting == Weighting::two_step && !omega) {
    throw input_error("two-step weighting needs an Omega_hat estimator");
  }
  CateFit out;
  out.model = std::shared_ptr<const CateModel>(system.model().clone());
  for (const auto& t : system.dataset().trials()) out.trials.push_back(t.id);
  out.parameter_names = system.model().parameter_names();
  out.degrees_of_freedom = static_cast<int>(system.moments()) - static_cast<int>(system.dim());

  if (system.model().linear_in_parameters()) {
    out.singular_values = check_rank(system, Vector::Zero(static_cast<Eigen::Index>(system.dim())),
                                     options.rank_threshold);
  }

  const Weighting first = options.weighting == Weighting::two_step ? Weighting::inverse_se2 : options.weighting;
  Weighted w = make_weighted(first_step_weight(system, first));
  StepResult step = solve_step(system, w, options);
  out.weighting = first;

  if (options.weighting == Weighting::two_step) {
    const Matrix om = omega(step.theta);
    if (auto inv = invert_omega(om, out.warnings)) {
      w = make_weighted(*inv);
      const int first_iterations = step.iterations;
      step = solve_step(system, w, options);
      step.iterations += first_iterations;
      out.weighting = Weighting::two_step;
    } else {
      out.warnings.push_back("Omega_hat is singular at the first-step estimate; second GMM step skipped, "
                             "keeping inverse-se2 weights");
    }
  }

  out.theta = step.theta;
  out.closed_form = step.closed_form;
  out.iterations = step.iterations;
  out.weight = w.W;
  out.residuals = system.stack(out.theta);
  out.objective = objective(out.residuals, w.W);
  out.foc_norm = foc_norm(system, out.theta, w.W, out.residuals);
  if (!system.model().linear_in_parameters()) {
    out.singular_values = check_rank(system, out.theta, options.rank_threshold);
  }

  if (omega && options.n_total > 0.0) {
    const Matrix om = omega(out.theta);
    const Matrix sym = 0.5 * (om + om.transpose());
    const Matrix pinv = sym.completeOrthogonalDecomposition().pseudoInverse();
    out.j_statistic = std::max(0.0, options.n_total * out.residuals.dot(pinv * out.residuals));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Jacobians
// ---------------------------------------------------------------------------

JacobianSet compute_jacobians(const MomentSystem& system, const Vector& theta, const Matrix& weight,
                              const std::vector<TiltFit>& tilts) {
  const MetaDataset& ds = system.dataset();
  if (tilts.size() != ds.trial_count()) throw input_error("one tilt per trial is required for the Jacobians");
  const auto J = static_cast<Eigen::Index>(system.moments());
  const auto n = static_cast<double>(system.base_rows());

  JacobianSet out;
  out.J_m_theta = system.jacobian_theta(theta);
  const Matrix& Jm = out.J_m_theta;
  const Matrix bread = Jm.transpose() * weight * Jm;
  Eigen::LDLT<Matrix> ldlt(bread);
  if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-14) {
    throw NumericalError(std::string(kModule), "J' W J is singular; theta is not identified at this weighting");
  }
  out.J_theta_m = -ldlt.solve(Jm.transpose() * weight);

  const Matrix g = system.g_values(theta);
  for (std::size_t s = 0; s < ds.trial_count(); ++s) {
    const TiltFit& tilt = tilts[s];
    if (static_cast<double>(tilt.weights.size()) != n) throw input_error("tilt was solved on a different base sample");
    const auto [first, count] = system.trial_block(s);
    const auto f = static_cast<Eigen::Index>(first);
    const auto c = static_cast<Eigen::Index>(count);
    const auto R1 = static_cast<Eigen::Index>(tilt.dim());

    Matrix tau_block = Matrix::Zero(J, c);
    tau_block.block(f, 0, c, c) = -Matrix::Identity(c, c);
    out.J_m_tau.push_back(std::move(tau_block));

    Matrix eta_block = Matrix::Zero(J, R1);
    for (Eigen::Index j = f; j < f + c; ++j) {
      const Matrix da = representer_eta_derivative(system.representers(), static_cast<std::size_t>(j), tilt);
      const auto t = static_cast<Eigen::Index>(system.column_stratum(static_cast<std::size_t>(j)));
      eta_block.row(j) = g.col(t).transpose() * da / n;
    }

    const Matrix& H = tilt.design;
    const Matrix hessian = H.transpose() * tilt.weights.asDiagonal() * H / n;
    Eigen::FullPivLU<Matrix> lu(hessian);
    if (!lu.isInvertible() || lu.rcond() < 1e-14) {
      throw NumericalError(std::string(kModule), "tilting Hessian for trial '" + ds.trials()[s].id +
                                                     "' is singular; J^eta_mu cannot be formed");
    }
    Matrix eta_mu = -lu.inverse();
    out.A.push_back(eta_block * eta_mu);
    out.J_m_eta.push_back(std::move(eta_block));
    out.J_eta_mu.push_back(std::move(eta_mu));
  }
  return out;
}

}  // namespace agt
