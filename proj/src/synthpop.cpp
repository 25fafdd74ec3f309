#include "agt/synthpop.hpp"

#include "agt/csv.hpp"

#include <Eigen/Cholesky>

#include <atomic>
#include <random>
#include <sstream>
#include <thread>

namespace agt {

namespace {

constexpr std::string_view kModule = "synthpop";

// "name(a, b, c)" -> name and the numeric arguments.
std::pair<std::string, std::vector<double>> parse_call(std::string_view text, std::string_view what) {
  const std::string t = csv::trim(text);
  const auto open = t.find('(');
  if (open == std::string::npos || t.back() != ')') {
    throw InputError(std::string(kModule), "expected name(args) for " + std::string(what) + ", got '" + t + "'");
  }
  std::vector<double> args;
  const std::string inner = t.substr(open + 1, t.size() - open - 2);
  if (!csv::trim(inner).empty()) {
    for (const auto& a : csv::split(inner, ',')) args.push_back(csv::to_double(a, kModule, what));
  }
  return {csv::trim(std::string_view(t).substr(0, open)), args};
}

std::string join(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += (out.empty() ? "" : ", ") + csv::format_double(x);
  return out;
}

Matrix exchangeable(std::size_t k, double rho) {
  Matrix r = Matrix::Constant(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k), rho);
  r.diagonal().setOnes();
  return r;
}

}  // namespace

double MarginalSpec::transform(double z) const {
  switch (kind) {
    case Kind::bernoulli: return z > normal_quantile(1.0 - p) ? 1.0 : 0.0;
    case Kind::normal: return mu + sigma * z;
    case Kind::categorical: {
      const double u = normal_cdf(z);
      double acc = 0.0;
      for (std::size_t l = 0; l + 1 < probs.size(); ++l) {
        acc += probs[l];
        if (u < acc) return static_cast<double>(l);
      }
      return static_cast<double>(probs.size() - 1);
    }
    case Kind::custom: return quantile(normal_cdf(z));
  }
  return z;
}

void CopulaSpec::validate() const {
  const std::string mod(kModule);
  if (marginals.empty()) throw InputError(mod, "copula spec has no marginals");
  for (const auto& m : marginals) {
    switch (m.kind) {
      case MarginalSpec::Kind::bernoulli:
        if (!(m.p > 0.0 && m.p < 1.0)) throw InputError(mod, "bernoulli probability for '" + m.name + "' must lie in (0, 1)");
        break;
      case MarginalSpec::Kind::normal:
        if (!(m.sigma > 0.0) || !std::isfinite(m.mu)) {
          throw InputError(mod, "normal marginal '" + m.name + "' needs finite mean and sigma > 0");
        }
        break;
      case MarginalSpec::Kind::categorical: {
        if (m.probs.size() < 2) throw InputError(mod, "categorical marginal '" + m.name + "' needs at least two levels");
        double total = 0.0;
        for (double p : m.probs) {
          if (!(p > 0.0 && p < 1.0)) throw InputError(mod, "level probabilities for '" + m.name + "' must lie in (0, 1)");
          total += p;
        }
        if (std::abs(total - 1.0) > 1e-6) throw InputError(mod, "level probabilities for '" + m.name + "' must sum to 1");
        break;
      }
      case MarginalSpec::Kind::custom:
        if (!m.quantile) throw InputError(mod, "custom marginal '" + m.name + "' has no quantile function");
        break;
    }
  }
  const auto k = static_cast<Eigen::Index>(marginals.size());
  if (correlation.rows() != k || correlation.cols() != k) {
    throw InputError(mod, "correlation matrix must be " + std::to_string(k) + " x " + std::to_string(k));
  }
  if (!correlation.isApprox(correlation.transpose(), 0.0) || (correlation.diagonal().array() != 1.0).any()) {
    throw InputError(mod, "correlation matrix must be symmetric with unit diagonal");
  }
  if (Eigen::LLT<Matrix>(correlation).info() != Eigen::Success) {
    throw InputError(mod, "correlation matrix is not positive definite (Cholesky failed)");
  }
}

CopulaSpec CopulaSpec::parse(std::string_view text) {
  const std::string mod(kModule);
  CopulaSpec spec;
  double rho = 0.0;
  std::vector<std::tuple<std::string, std::string, double>> pairs;
  bool have_n = false;
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = csv::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw InputError(mod, "line " + std::to_string(number) + ": expected key = value");
    const std::string key = csv::trim(std::string_view(t).substr(0, eq));
    const std::string value = csv::trim(std::string_view(t).substr(eq + 1));
    std::istringstream ks(key);
    std::string word;
    std::vector<std::string> words;
    while (ks >> word) words.push_back(word);
    if (words.empty()) throw InputError(mod, "line " + std::to_string(number) + ": empty key");

    if (key == "n") {
      const long n = csv::to_long(value, kModule, "n");
      if (n < 0) throw InputError(mod, "sample size n must be nonnegative");
      spec.n = static_cast<std::size_t>(n);
      have_n = true;
    } else if (key == "seed") {
      spec.seed = std::stoull(value);
    } else if (words[0] == "marginal" && words.size() == 2) {
      const auto [family, args] = parse_call(value, "marginal " + words[1]);
      MarginalSpec m;
      m.name = words[1];
      if (family == "bernoulli" && args.size() == 1) {
        m.kind = MarginalSpec::Kind::bernoulli;
        m.p = args[0];
      } else if (family == "normal" && args.size() == 2) {
        m.kind = MarginalSpec::Kind::normal;
        m.mu = args[0];
        m.sigma = args[1];
      } else if (family == "categorical" && args.size() >= 2) {
        m.kind = MarginalSpec::Kind::categorical;
        m.probs = args;
      } else {
        throw InputError(mod, "line " + std::to_string(number) + ": unsupported marginal '" + value +
                                  "' (use bernoulli(p), normal(mu, sigma) or categorical(p1, ..., pL))");
      }
      for (const auto& other : spec.marginals) {
        if (other.name == m.name) throw InputError(mod, "duplicate marginal '" + m.name + "'");
      }
      spec.marginals.push_back(std::move(m));
    } else if (key == "correlation") {
      const auto [family, args] = parse_call(value, "correlation");
      if (family != "exchangeable" || args.size() != 1) {
        throw InputError(mod, "line " + std::to_string(number) + ": correlation must be exchangeable(rho)");
      }
      rho = args[0];
    } else if (words[0] == "correlation" && words.size() == 3) {
      pairs.emplace_back(words[1], words[2], csv::to_double(value, kModule, "correlation"));
    } else {
      throw InputError(mod, "line " + std::to_string(number) + ": unknown key '" + key + "'");
    }
  }
  if (!have_n) throw InputError(mod, "copula spec is missing n");
  spec.correlation = exchangeable(spec.marginals.size(), rho);
  auto index = [&](const std::string& name) {
    for (std::size_t k = 0; k < spec.marginals.size(); ++k) {
      if (spec.marginals[k].name == name) return static_cast<Eigen::Index>(k);
    }
    throw InputError(mod, "correlation names unknown marginal '" + name + "'");
  };
  for (const auto& [a, b, r] : pairs) {
    const auto i = index(a);
    const auto j = index(b);
    if (i == j) throw InputError(mod, "correlation of '" + a + "' with itself is fixed at 1");
    spec.correlation(i, j) = spec.correlation(j, i) = r;
  }
  spec.validate();
  return spec;
}

CopulaSpec CopulaSpec::load(const std::filesystem::path& path) { return parse(csv::read_text(path, kModule)); }

std::string CopulaSpec::serialize() const {
  std::ostringstream out;
  out << "n = " << n << "\nseed = " << seed << "\n";
  for (const auto& m : marginals) {
    out << "marginal " << m.name << " = ";
    switch (m.kind) {
      case MarginalSpec::Kind::bernoulli: out << "bernoulli(" << csv::format_double(m.p) << ")"; break;
      case MarginalSpec::Kind::normal:
        out << "normal(" << csv::format_double(m.mu) << ", " << csv::format_double(m.sigma) << ")";
        break;
      case MarginalSpec::Kind::categorical: out << "categorical(" << join(m.probs) << ")"; break;
      case MarginalSpec::Kind::custom:
        throw InputError(std::string(kModule), "custom marginal '" + m.name + "' cannot be serialized");
    }
    out << "\n";
  }
  const auto k = correlation.rows();
  const double base = k > 1 ? correlation(1, 0) : 0.0;
  out << "correlation = exchangeable(" << csv::format_double(base) << ")\n";
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = i + 1; j < k; ++j) {
      if (correlation(i, j) != base) {
        out << "correlation " << marginals[static_cast<std::size_t>(i)].name << ' '
            << marginals[static_cast<std::size_t>(j)].name << " = " << csv::format_double(correlation(i, j)) << "\n";
      }
    }
  }
  return out.str();
}

CovariateSample sample(const CopulaSpec& spec, SampleRole role, unsigned threads) {
  spec.validate();
  const auto k = static_cast<Eigen::Index>(spec.marginals.size());
  const Matrix L = Eigen::LLT<Matrix>(spec.correlation).matrixL();
  RowMatrix x(static_cast<Eigen::Index>(spec.n), k);
  const std::size_t chunks = (spec.n + kCopulaChunk - 1) / kCopulaChunk;

  auto fill_chunk = [&](std::size_t c) {
    std::mt19937_64 rng(derive_seed(spec.seed, c));
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector e(k);
    const std::size_t end = std::min(spec.n, (c + 1) * kCopulaChunk);
    for (std::size_t i = c * kCopulaChunk; i < end; ++i) {
      for (Eigen::Index j = 0; j < k; ++j) e(j) = normal(rng);
      const Vector z = L * e;
      for (Eigen::Index j = 0; j < k; ++j) {
        x(static_cast<Eigen::Index>(i), j) = spec.marginals[static_cast<std::size_t>(j)].transform(z(j));
      }
    }
  };

  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(chunks)));
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) fill_chunk(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t c = next++; c < chunks; c = next++) fill_chunk(c);
      });
    }
  }
  return CovariateSample(std::move(x), role);
}

CovariateSample sample(const CopulaSpec& spec, const CovariateSchema& schema, SampleRole role, unsigned threads) {
  const std::string mod(kModule);
  std::vector<Eigen::Index> source;
  for (const Covariate& c : schema.covariates()) {
    Eigen::Index found = -1;
    for (std::size_t m = 0; m < spec.marginals.size(); ++m) {
      if (spec.marginals[m].name == c.name) found = static_cast<Eigen::Index>(m);
    }
    if (found < 0) throw InputError(mod, "copula spec has no marginal for covariate '" + c.name + "'");
    const MarginalSpec& m = spec.marginals[static_cast<std::size_t>(found)];
    const bool ok = (c.kind == CovariateKind::binary && m.kind == MarginalSpec::Kind::bernoulli) ||
                    (c.kind == CovariateKind::continuous &&
                     (m.kind == MarginalSpec::Kind::normal || m.kind == MarginalSpec::Kind::custom)) ||
                    (c.kind == CovariateKind::categorical && m.kind == MarginalSpec::Kind::categorical &&
                     m.probs.size() == c.levels.size());
    if (!ok) {
      throw InputError(mod, "marginal for '" + c.name + "' does not fit its " + std::string(to_string(c.kind)) +
                                " schema entry");
    }
    source.push_back(found);
  }
  const CovariateSample full = sample(spec, role, threads);
  RowMatrix x(full.values().rows(), static_cast<Eigen::Index>(source.size()));
  for (std::size_t k = 0; k < source.size(); ++k) x.col(static_cast<Eigen::Index>(k)) = full.values().col(source[k]);
  return CovariateSample(std::move(x), role);
}

CopulaSpec fit_spec_from_summaries(const std::vector<CovariateSummary>& summaries, const CorrelationChoice& correlation,
                                   std::size_t n, std::uint64_t seed) {
  const std::string mod(kModule);
  CopulaSpec spec;
  spec.n = n;
  spec.seed = seed;
  for (const auto& s : summaries) {
    MarginalSpec m;
    m.name = s.name;
    switch (s.kind) {
      case CovariateKind::binary:
        m.kind = MarginalSpec::Kind::bernoulli;
        m.p = s.mean;
        break;
      case CovariateKind::continuous:
        if (!s.sd) throw InputError(mod, "continuous covariate '" + s.name + "' needs a standard deviation");
        m.kind = MarginalSpec::Kind::normal;
        m.mu = s.mean;
        m.sigma = *s.sd;
        break;
      case CovariateKind::categorical:
        m.kind = MarginalSpec::Kind::categorical;
        m.probs = s.probs;
        break;
    }
    spec.marginals.push_back(std::move(m));
  }
  if (const auto* rho = std::get_if<double>(&correlation)) {
    spec.correlation = exchangeable(spec.marginals.size(), *rho);
  } else {
    spec.correlation = std::get<Matrix>(correlation);
  }
  spec.validate();
  return spec;
}

}  // namespace agt
