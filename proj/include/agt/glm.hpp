#pragma once

// Logistic regression by iteratively reweighted least squares.

#include "agt/common.hpp"

namespace agt {

struct LogisticFit {
  Vector coef;
  Matrix information;  // X' diag(p (1 - p)) X / n at the solution
  Vector fitted;       // expit(X coef)
  int iterations = 0;
  double log_likelihood = 0.0;
};

struct LogisticOptions {
  int max_iterations = 100;
  double tolerance = 1e-10;      // relative change in deviance
  double separation_limit = 30.0;  // |coef| beyond which the fit is treated as separated
};

/// Maximum-likelihood logistic regression of y in {0,1} on design X.
/// Throws NumericalError on nonconvergence or separation.
LogisticFit fit_logistic(const Matrix& X, const Vector& y, const LogisticOptions& options = {});

/// Per-row score contributions x_i (y_i - p_i), n x p.
Matrix logistic_scores(const Matrix& X, const Vector& y, const Vector& coef);

}  // namespace agt
