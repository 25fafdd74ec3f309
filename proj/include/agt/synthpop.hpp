#pragma once

// Gaussian-copula generation of individual-level covariate samples from
// marginal summaries.

#include "agt/aggdata.hpp"

#include <functional>
#include <optional>
#include <variant>

namespace agt {

struct MarginalSpec {
  enum class Kind { bernoulli, normal, categorical, custom } kind = Kind::normal;
  std::string name;
  double p = 0.5;            // bernoulli: Pr(X = 1)
  double mu = 0.0;           // normal
  double sigma = 1.0;        // normal
  std::vector<double> probs; // categorical: level probabilities, summing to 1
  /// custom: quantile function applied to Phi(Z); not serializable.
  std::function<double(double)> quantile;

  /// Map a latent standard normal draw to the covariate value.
  double transform(double z) const;
};

/// Latent Gaussian copula: Z ~ MVN(0, R), one column per marginal.
/// Binary X = 1{Z > Phi^-1(1 - p)}, normal X = mu + sigma Z, categorical X is
/// the level whose cumulative-probability band contains Phi(Z).
struct CopulaSpec {
  std::vector<MarginalSpec> marginals;
  Matrix correlation;  // K x K latent correlation R
  std::size_t n = 0;
  std::uint64_t seed = 1;

  /// Throws InputError on invalid marginals or a non-positive-definite R.
  void validate() const;

  /// Text format, one `key = value` per line, `#` comments:
  ///   n = 20000
  ///   seed = 7
  ///   marginal lvef = normal(45.4, 10)
  ///   marginal prehhf = bernoulli(0.091)
  ///   marginal region = categorical(0.2, 0.5, 0.3)
  ///   correlation = exchangeable(0.3)     (default identity)
  ///   correlation lvef prehhf = 0.2       (pairwise override)
  static CopulaSpec parse(std::string_view text);
  static CopulaSpec load(const std::filesystem::path& path);
  std::string serialize() const;
};

/// Rows generated per independently seeded chunk. Chunk c draws its latent
/// normals from mt19937_64(derive_seed(seed, c)), so the sample does not
/// depend on the number of worker threads.
inline constexpr std::size_t kCopulaChunk = 4096;

/// Sample in marginal order; columns follow spec.marginals.
CovariateSample sample(const CopulaSpec& spec, SampleRole role = SampleRole::target, unsigned threads = 1);

/// Sample with columns arranged in schema order, matching marginals by name.
/// Binary covariates need bernoulli marginals, continuous need normal or
/// custom, categorical need categorical with the schema's level count.
CovariateSample sample(const CopulaSpec& spec, const CovariateSchema& schema, SampleRole role = SampleRole::target,
                       unsigned threads = 1);

/// Reported summary of one covariate in the population to be synthesized.
struct CovariateSummary {
  std::string name;
  CovariateKind kind = CovariateKind::continuous;
  double mean = 0.0;              // mean, or proportion for binary
  std::optional<double> sd;       // required for continuous
  std::vector<double> probs;      // categorical level proportions
};

/// Exchangeable latent correlation rho, or a full matrix.
using CorrelationChoice = std::variant<double, Matrix>;

CopulaSpec fit_spec_from_summaries(const std::vector<CovariateSummary>& summaries, const CorrelationChoice& correlation,
                                   std::size_t n, std::uint64_t seed);

}  // namespace agt
