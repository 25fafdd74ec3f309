#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace agt {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A covariate row: one value per schema covariate, in schema order.
using Row = std::span<const double>;

// ---------------------------------------------------------------------------
// Errors. Every error carries the module that raised it so front ends can
// print "[module] message". InputError maps to exit code 2, NumericalError
// to exit code 1.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& message)
      : std::runtime_error("[" + module + "] " + message), module_(std::move(module)) {}
  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Small numeric helpers shared across modules.
// ---------------------------------------------------------------------------

inline double expit(double t) {
  if (t >= 0) {
    const double e = std::exp(-t);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline constexpr double kWaldZ = 1.96;

/// splitmix64 finalizer; used to derive independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(master) ^ a) ^ (b * 0xd6e8feb86659fd93ULL));
}

double normal_cdf(double x);
double normal_quantile(double p);

/// Symmetrize and clip negative eigenvalues at zero. Returns the clipped
/// eigenvalue mass (sum of |negative eigenvalues|) through `clipped`.
Matrix nearest_psd(const Matrix& m, double* clipped = nullptr);

/// Inverse of a symmetric positive (semi)definite matrix with an optional ridge
/// when the reciprocal condition number falls below `rcond_min`. Sets
/// `ridged` when regularization was applied.
Matrix spd_inverse(const Matrix& m, double rcond_min = 1e-12, bool* ridged = nullptr);

}  // namespace agt
