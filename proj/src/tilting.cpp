#include "agt/tilting.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace agt {

namespace {

constexpr std::string_view kModule = "tilting";

std::string moment_name(const std::vector<MomentSpec>& specs, std::size_t r) {
  if (r == 0) return "intercept";
  const MomentSpec& s = specs[r - 1];
  const char* kind = s.kind == MomentKind::mean ? "mean" : s.kind == MomentKind::proportion ? "proportion" : "m2";
  return std::string(kind) + "[" + std::to_string(s.covariate) + "]";
}

// Profiled dual in standardized coordinates. With the intercept profiled out,
// minimizing mean(exp(Z l)) - l.t over l = (l0, l1) reduces to minimizing
// t0 * log mean(exp(Z1 l1)) - l1.t1, whose gradient is t0 * (softmax-weighted
// mean of Z1) - t1.
struct Profiled {
  const Matrix& z;  // n x R standardized non-intercept design
  const Vector& t;  // R standardized targets
  double t0;

  // Returns log mean exp(z l) and fills the normalized softmax weights p.
  double log_mean_exp(const Vector& l, Vector& p) const {
    const Vector s = z * l;
    const double m = s.maxCoeff();
    p = (s.array() - m).exp();
    const double total = p.sum();
    p /= total;
    return m + std::log(total / static_cast<double>(z.rows()));
  }
  double value(const Vector& l, Vector& p) const { return t0 * log_mean_exp(l, p) - l.dot(t); }
  Vector gradient(const Vector& p) const { return t0 * (z.transpose() * p) - t; }
  Matrix hessian(const Vector& p) const {
    const Vector zbar = z.transpose() * p;
    Matrix h = z.transpose() * p.asDiagonal() * z;
    h -= zbar * zbar.transpose();
    return t0 * h;
  }
};

// Newton step restricted to the range of the Hessian (pseudo-inverse), so
// collinear moment functions do not destabilize the solve.
Vector newton_direction(const Matrix& h, const Vector& g) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
  const Vector& values = eig.eigenvalues();
  const double top = values.size() > 0 ? values.maxCoeff() : 0.0;
  Vector d = Vector::Zero(g.size());
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values(i) > 1e-12 * top) {
      const auto v = eig.eigenvectors().col(i);
      d -= (v.dot(g) / values(i)) * v;
    }
  }
  if (!d.allFinite() || d.dot(g) >= 0.0) d = -g;
  return d;
}

}  // namespace

Matrix moment_design(const CovariateSample& base, const std::vector<MomentSpec>& specs) {
  const auto n = static_cast<Eigen::Index>(base.rows());
  Matrix h(n, static_cast<Eigen::Index>(specs.size() + 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Row row = base.row(static_cast<std::size_t>(i));
    h(i, 0) = 1.0;
    for (std::size_t r = 0; r < specs.size(); ++r) {
      if (specs[r].covariate >= row.size()) throw InputError(std::string(kModule), "moment covariate out of range");
      h(i, static_cast<Eigen::Index>(r + 1)) = specs[r].evaluate(row);
    }
  }
  return h;
}

TiltFit TiltFit::with_eta(const Vector& new_eta) const {
  TiltFit out = *this;
  out.eta = new_eta;
  out.weights = (design * new_eta).array().exp();
  const double n = static_cast<double>(design.rows());
  out.raw_residual = design.transpose() * out.weights / n - mu_plus;
  out.residual_norm = out.raw_residual.cwiseAbs().maxCoeff();
  return out;
}

TiltFit solve_tilt(const CovariateSample& base, const std::vector<MomentSpec>& specs, const Vector& mu_plus,
                   const TiltOptions& options, std::string trial) {
  const std::size_t R = specs.size();
  if (static_cast<std::size_t>(mu_plus.size()) != R + 1) {
    throw InputError(std::string(kModule), "moment target length does not match the moment specs");
  }
  if (base.rows() == 0) throw InputError(std::string(kModule), "empty base sample");
  if (!(mu_plus(0) > 0.0)) throw InputError(std::string(kModule), "intercept target must be positive");

  TiltFit fit;
  fit.trial = std::move(trial);
  fit.specs = specs;
  fit.mu_plus = mu_plus;
  fit.design = moment_design(base, specs);
  const Eigen::Index n = fit.design.rows();
  const double nd = static_cast<double>(n);
  const double t0 = mu_plus(0);

  // Hull precheck, componentwise on the ratio targets mu_r / mu_0.
  std::vector<HullPosition> hull;
  bool outside = false;
  Vector center(static_cast<Eigen::Index>(R)), scale(static_cast<Eigen::Index>(R));
  std::vector<Eigen::Index> active;
  for (std::size_t r = 0; r < R; ++r) {
    const auto c = fit.design.col(static_cast<Eigen::Index>(r + 1));
    HullPosition pos;
    pos.moment = moment_name(specs, r + 1);
    pos.target = mu_plus(static_cast<Eigen::Index>(r + 1)) / t0;
    pos.base_min = c.minCoeff();
    pos.base_max = c.maxCoeff();
    const double span = pos.base_max - pos.base_min;
    const double edge = 1e-12 * std::max(1.0, std::max(std::abs(pos.base_min), std::abs(pos.base_max)));
    const double m = c.mean();
    const double sd = std::sqrt((c.array() - m).square().mean());
    center(static_cast<Eigen::Index>(r)) = m;
    scale(static_cast<Eigen::Index>(r)) = sd > 0.0 ? sd : 1.0;
    if (span <= edge) {
      pos.inside = std::abs(pos.target - pos.base_min) <= edge;
    } else {
      pos.inside = pos.target > pos.base_min + edge && pos.target < pos.base_max - edge;
      if (pos.inside) active.push_back(static_cast<Eigen::Index>(r));
    }
    outside = outside || !pos.inside;
    hull.push_back(pos);
  }
  auto hull_report = [&] {
    std::ostringstream ss;
    for (const auto& h : hull) {
      ss << "; " << h.moment << " target " << h.target << " base range [" << h.base_min << ", " << h.base_max << "]"
         << (h.inside ? "" : " OUTSIDE");
    }
    return ss.str();
  };
  if (outside) {
    throw InfeasibleMoments("infeasible moments for trial '" + fit.trial +
                                "': target lies outside the base-sample support" + hull_report(),
                            hull);
  }

  // Standardized design over the non-degenerate moments.
  const auto A = static_cast<Eigen::Index>(active.size());
  Matrix z(n, A);
  Vector t(A);
  for (Eigen::Index a = 0; a < A; ++a) {
    const Eigen::Index r = active[static_cast<std::size_t>(a)];
    z.col(a) = (fit.design.col(r + 1).array() - center(r)) / scale(r);
    t(a) = (mu_plus(r + 1) - t0 * center(r)) / scale(r);
  }
  const Profiled dual{z, t, t0};

  // Targets must lie in the affine hull of the base design: any direction v
  // along which the design is constant must also leave the target unchanged.
  if (A > 0) {
    const Matrix cov = z.transpose() * z / nd;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    const double top = eig.eigenvalues().maxCoeff();
    for (Eigen::Index i = 0; i < A; ++i) {
      if (eig.eigenvalues()(i) > 1e-12 * top) continue;
      const double gap = std::abs(eig.eigenvectors().col(i).dot(t)) / t0;
      if (gap > 1e-8) {
        throw InfeasibleMoments("infeasible moments for trial '" + fit.trial +
                                    "': moment functions are collinear on the base sample and the targets violate "
                                    "the implied linear constraint" + hull_report(),
                                hull);
      }
    }
  }

  Vector lambda = Vector::Zero(A);
  Vector p;
  double value = dual.value(lambda, p);
  Vector grad = dual.gradient(p);
  auto full_dual = [&](double profiled) { return t0 - t0 * std::log(t0) + profiled; };
  fit.objective_trace.push_back(full_dual(value));

  int iter = 0;
  bool converged = A == 0 || grad.cwiseAbs().maxCoeff() <= options.tolerance;
  while (!converged && iter < options.max_iterations) {
    ++iter;
    const Vector dir = newton_direction(dual.hessian(p), grad);
    double step = 1.0;
    const double slope = grad.dot(dir);
    Vector trial_lambda, trial_p;
    double trial_value = value;
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      trial_lambda = lambda + step * dir;
      trial_value = dual.value(trial_lambda, trial_p);
      if (std::isfinite(trial_value) && trial_value <= value + options.armijo * step * slope) {
        accepted = true;
        break;
      }
      // Near the optimum the objective change drops below rounding; a full
      // step that shrinks the gradient is then taken on that basis.
      if (k == 0 && std::isfinite(trial_value) &&
          trial_value <= value + 1e-12 * std::max(1.0, std::abs(value)) &&
          dual.gradient(trial_p).norm() < 0.5 * grad.norm()) {
        accepted = true;
        break;
      }
      step *= options.backtrack;
    }
    if (!accepted) break;  // no further decrease available at machine precision
    lambda = trial_lambda;
    p = trial_p;
    value = trial_value;
    grad = dual.gradient(p);
    fit.objective_trace.push_back(full_dual(value));
    if (lambda.cwiseAbs().maxCoeff() > options.eta_limit) {
      throw InfeasibleMoments("infeasible moments for trial '" + fit.trial +
                                  "': tilting parameters diverge, target is outside the achievable moment set" +
                                  hull_report(),
                              hull);
    }
    converged = grad.cwiseAbs().maxCoeff() <= options.tolerance;
  }

  // A few undamped polishing steps push the residual toward rounding level.
  for (int k = 0; k < 3 && A > 0; ++k) {
    const Vector dir = newton_direction(dual.hessian(p), grad);
    const Vector cand = lambda + dir;
    Vector cand_p;
    const double cand_value = dual.value(cand, cand_p);
    const Vector cand_grad = dual.gradient(cand_p);
    // The dual value is flat to rounding here, so only the gradient decides.
    if (!std::isfinite(cand_value) || cand_value > value + 1e-12 * std::max(1.0, std::abs(value)) ||
        cand_grad.cwiseAbs().maxCoeff() >= grad.cwiseAbs().maxCoeff()) {
      break;
    }
    lambda = cand;
    p = cand_p;
    value = cand_value;
    grad = cand_grad;
    fit.objective_trace.push_back(full_dual(value));
  }
  converged = A == 0 || grad.cwiseAbs().maxCoeff() <= options.tolerance;
  fit.iterations = iter;
  if (!converged) {
    const double g = grad.cwiseAbs().maxCoeff();
    if (lambda.cwiseAbs().maxCoeff() > 0.5 * options.eta_limit) {
      throw InfeasibleMoments("infeasible moments for trial '" + fit.trial +
                                  "': solver stalled near the boundary of the achievable moment set" + hull_report(),
                              hull);
    }
    throw NumericalError(std::string(kModule), "tilting for trial '" + fit.trial + "' did not converge after " +
                                                   std::to_string(iter) + " iterations (residual " +
                                                   std::to_string(g) + ")");
  }

  // Back to raw coordinates: eta_r = l_r / s_r, intercept absorbs the centering
  // and is then set so that mean(w) equals t0 to rounding.
  fit.eta = Vector::Zero(static_cast<Eigen::Index>(R + 1));
  double offset = 0.0;
  for (Eigen::Index a = 0; a < A; ++a) {
    const Eigen::Index r = active[static_cast<std::size_t>(a)];
    fit.eta(r + 1) = lambda(a) / scale(r);
    offset += lambda(a) * center(r) / scale(r);
  }
  const Vector s = z * lambda;
  const double m = A > 0 ? s.maxCoeff() : 0.0;
  Vector w = (s.array() - m).exp();
  const double log_norm = std::log(t0) - std::log(w.mean());
  w *= std::exp(log_norm);
  fit.eta(0) = log_norm - m - offset;
  fit.weights = w;
  fit.raw_residual = fit.design.transpose() * fit.weights / nd - mu_plus;
  fit.residual_norm = A > 0 ? grad.cwiseAbs().maxCoeff() : 0.0;
  if ((fit.weights.array() <= 0.0).any() || !fit.weights.allFinite()) {
    throw NumericalError(std::string(kModule), "tilting produced non-positive weights for trial '" + fit.trial + "'");
  }
  return fit;
}

std::vector<TiltFit> solve_tilts(const MetaDataset& dataset, const CovariateSample& base,
                                 const TiltOptions& options) {
  std::vector<TiltFit> out;
  out.reserve(dataset.trial_count());
  for (const auto& t : dataset.trials()) {
    out.push_back(solve_tilt(base, t.moment_specs(), t.moment_targets_plus(), options, t.id));
  }
  return out;
}

namespace {

RepresenterMatrix build_representers(const std::vector<TiltFit>& tilts, const CovariateSample& base,
                                     const MetaDataset& dataset, const BaselineFn* b) {
  if (tilts.size() != dataset.trial_count()) {
    throw InputError(std::string(kModule), "one tilt per trial is required to evaluate representers");
  }
  const auto n = static_cast<Eigen::Index>(base.rows());
  const auto J = static_cast<Eigen::Index>(dataset.moment_count());
  RepresenterMatrix reps;
  reps.values.resize(n, J);
  reps.factors.resize(n, J);

  Vector bvals = Vector::Ones(n);
  if (b != nullptr) {
    for (Eigen::Index i = 0; i < n; ++i) {
      bvals(i) = (*b)(base.row(static_cast<std::size_t>(i)));
      if (!(bvals(i) > 0.0) || !std::isfinite(bvals(i))) {
        throw InputError(std::string(kModule), "baseline function b(x) must be positive on the base sample (row " +
                                                   std::to_string(i + 1) + ")");
      }
    }
  }

  const auto& schema = dataset.schema();
  Eigen::Index j = 0;
  for (std::size_t s = 0; s < dataset.trial_count(); ++s) {
    const Trial& trial = dataset.trials()[s];
    const TiltFit& tilt = tilts[s];
    if (tilt.weights.size() != n) throw InputError(std::string(kModule), "tilt was solved on a different base sample");
    for (const auto& e : trial.effects) {
      RepresenterColumn col;
      col.trial = s;
      col.covariate = e.covariate;
      col.level = e.level;
      Vector factor = bvals;
      if (e.is_marginal()) {
        col.label = trial.id + ":overall";
        col.normalized = b != nullptr;
      } else {
        const std::size_t k = e.covariate - 1;
        const Stratum stratum = schema.strata_for(trial.id, k).at(e.level - 1);
        col.label = trial.id + ":" + schema.covariate(k).name + "=" + stratum.label;
        col.normalized = true;
        for (Eigen::Index i = 0; i < n; ++i) {
          if (!stratum.contains_row(base.row(static_cast<std::size_t>(i)))) factor(i) = 0.0;
        }
      }
      Vector alpha = tilt.weights.cwiseProduct(factor);
      if (col.normalized) {
        col.normalizer = alpha.mean();
        if (!(col.normalizer > 0.0)) {
          throw InputError(std::string(kModule), "empty stratum: no base row falls in '" + col.label + "'");
        }
        alpha /= col.normalizer;
      }
      reps.values.col(j) = alpha;
      reps.factors.col(j) = factor;
      reps.columns.push_back(std::move(col));
      ++j;
    }
  }
  return reps;
}

}  // namespace

RepresenterMatrix evaluate_representers(const std::vector<TiltFit>& tilts, const CovariateSample& base,
                                        const MetaDataset& dataset) {
  return build_representers(tilts, base, dataset, nullptr);
}

RepresenterMatrix evaluate_relative_representers(const std::vector<TiltFit>& tilts, const CovariateSample& base,
                                                 const MetaDataset& dataset, const BaselineFn& b) {
  return build_representers(tilts, base, dataset, &b);
}

Matrix representer_eta_derivative(const RepresenterMatrix& reps, std::size_t column, const TiltFit& tilt) {
  const auto c = static_cast<Eigen::Index>(column);
  const auto alpha = reps.values.col(c);
  Matrix d = tilt.design.array().colwise() * alpha.array();
  if (reps.columns[column].normalized) {
    const Eigen::RowVectorXd hbar = d.colwise().mean();
    d -= alpha * hbar;
  }
  return d;
}

}  // namespace agt
