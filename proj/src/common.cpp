#include "agt/common.hpp"

#include <boost/math/distributions/normal.hpp>

namespace agt {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw InputError("common", "normal quantile requires p in (0,1), got " + std::to_string(p));
  }
  static const boost::math::normal_distribution<double> standard;
  return boost::math::quantile(standard, p);
}

Matrix nearest_psd(const Matrix& m, double* clipped) {
  const Matrix sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  Vector values = eig.eigenvalues();
  double mass = 0.0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values(i) < 0.0) {
      mass += -values(i);
      values(i) = 0.0;
    }
  }
  if (clipped != nullptr) *clipped = mass;
  if (mass == 0.0) return sym;
  return eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
}

Matrix spd_inverse(const Matrix& m, double rcond_min, bool* ridged) {
  const Matrix sym = 0.5 * (m + m.transpose());
  const Eigen::Index n = sym.rows();
  if (ridged != nullptr) *ridged = false;
  Eigen::LDLT<Matrix> ldlt(sym);
  const bool usable = ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.rcond() >= rcond_min;
  if (usable) return ldlt.solve(Matrix::Identity(n, n));

  // ridge eps = 1e-8 * trace / dim
  const double ridge = 1e-8 * std::max(sym.trace(), 1e-300) / static_cast<double>(n);
  Matrix reg = sym;
  reg.diagonal().array() += ridge;
  Eigen::LDLT<Matrix> again(reg);
  if (again.info() != Eigen::Success || !again.isPositive()) {
    throw NumericalError("linalg", "matrix is not positive definite even after ridge regularization");
  }
  if (ridged != nullptr) *ridged = true;
  return again.solve(Matrix::Identity(n, n));
}

}  // namespace agt
