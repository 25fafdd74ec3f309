#include "agt/glm.hpp"

#include <Eigen/Cholesky>

#include <cmath>

namespace agt {

namespace {

double log_likelihood(const Vector& eta, const Vector& y) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    // log(1 + exp(eta)) computed without overflow
    const double softplus = eta(i) > 0 ? eta(i) + std::log1p(std::exp(-eta(i))) : std::log1p(std::exp(eta(i)));
    ll += y(i) * eta(i) - softplus;
  }
  return ll;
}

}  // namespace

LogisticFit fit_logistic(const Matrix& X, const Vector& y, const LogisticOptions& options) {
  if (X.rows() != y.size()) throw InputError("glm", "design and outcome lengths differ");
  if (X.rows() <= X.cols()) throw InputError("glm", "logistic regression needs more rows than coefficients");
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) != 0.0 && y(i) != 1.0) throw InputError("glm", "logistic outcome must be 0 or 1");
  }
  const auto n = static_cast<double>(X.rows());
  Vector beta = Vector::Zero(X.cols());
  Vector eta = X * beta;
  double ll = log_likelihood(eta, y);

  LogisticFit out;
  bool converged = false;
  for (int it = 1; it <= options.max_iterations; ++it) {
    const Vector p = eta.unaryExpr([](double v) { return expit(v); });
    const Vector w = p.cwiseProduct((1.0 - p.array()).matrix()).cwiseMax(1e-12);
    const Matrix info = X.transpose() * w.asDiagonal() * X;
    const Vector score = X.transpose() * (y - p);
    Eigen::LDLT<Matrix> ldlt(info);
    if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-14) {
      throw NumericalError("glm", "logistic information matrix is singular (collinear design or separation)");
    }
    Vector step = ldlt.solve(score);
    // Newton step with halving; the log-likelihood is concave so this terminates.
    double new_ll = log_likelihood(X * (beta + step), y);
    int halvings = 0;
    while (new_ll < ll - 1e-12 * std::abs(ll) && halvings < 30) {
      step *= 0.5;
      new_ll = log_likelihood(X * (beta + step), y);
      ++halvings;
    }
    beta += step;
    eta = X * beta;
    const double change = std::abs(new_ll - ll);
    ll = new_ll;
    out.iterations = it;
    if (beta.cwiseAbs().maxCoeff() > options.separation_limit) {
      throw NumericalError("glm", "logistic coefficients diverge; the outcome appears separated by the covariates");
    }
    if (change <= options.tolerance * (std::abs(ll) + 0.1) && step.cwiseAbs().maxCoeff() < 1e-6) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    throw NumericalError("glm", "IRLS did not converge in " + std::to_string(options.max_iterations) + " iterations");
  }
  // One final Newton step at convergence polishes beta to the score root.
  {
    const Vector p = eta.unaryExpr([](double v) { return expit(v); });
    const Vector w = p.cwiseProduct((1.0 - p.array()).matrix());
    const Matrix info = X.transpose() * w.asDiagonal() * X;
    beta += info.ldlt().solve(X.transpose() * (y - p));
    eta = X * beta;
  }
  out.coef = beta;
  out.fitted = eta.unaryExpr([](double v) { return expit(v); });
  const Vector w = out.fitted.cwiseProduct((1.0 - out.fitted.array()).matrix());
  out.information = X.transpose() * w.asDiagonal() * X / n;
  out.log_likelihood = log_likelihood(eta, y);
  return out;
}

Matrix logistic_scores(const Matrix& X, const Vector& y, const Vector& coef) {
  const Vector p = (X * coef).unaryExpr([](double v) { return expit(v); });
  return X.array().colwise() * (y - p).array();
}

}  // namespace agt
