#include "agt/simulate.hpp"

#include "agt/csv.hpp"
#include "agt/pipeline.hpp"
#include "agt/synthpop.hpp"

#include <boost/math/tools/roots.hpp>
#include <json.hpp>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <atomic>
#include <random>
#include <sstream>
#include <thread>

namespace agt::sim {

namespace {

constexpr std::string_view kModule = "simulate";

InputError input(const std::string& msg) { return InputError(std::string(kModule), msg); }

double number(const nlohmann::json& j, const std::string& what) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = csv::trim(j.get<std::string>());
    if (s.rfind("log(", 0) == 0 && s.back() == ')') {
      const double v = csv::to_double(s.substr(4, s.size() - 5), kModule, what);
      if (!(v > 0.0)) throw input(what + ": log of a nonpositive value");
      return std::log(v);
    }
    return csv::to_double(s, kModule, what);
  }
  throw input(what + " must be a number or \"log(v)\"");
}

Coef coef(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 4) throw input(what + " needs 4 coefficients (intercept, x1, x2, x3)");
  Coef c{};
  for (std::size_t i = 0; i < 4; ++i) c[i] = number(j[i], what);
  return c;
}

double linear(const Coef& c, Row x) { return c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[2]; }

// Distinct seed stream per (set, id) so the two grids never share draws.
std::uint64_t scenario_key(const Scenario& s) {
  const std::uint64_t set = s.set == "5trial" ? 0 : s.set == "1trial" ? 1 : 2;
  return set * 1000 + static_cast<std::uint64_t>(s.id);
}

// Per-arm event counts within one reporting cell.
struct Cell {
  long e1 = 0, n1 = 0, e0 = 0, n0 = 0;
  void add(double a, double y) {
    if (a == 1.0) {
      ++n1;
      e1 += y == 1.0;
    } else {
      ++n0;
      e0 += y == 1.0;
    }
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

void Scenario::validate() const {
  const std::string who = "scenario " + set + "/" + std::to_string(id);
  if (m < 1) throw input(who + ": needs at least one trial");
  if (gamma.size() != m - 1) throw input(who + ": needs allocation coefficients for trials 2.." + std::to_string(m));
  if (n_total < 20) throw input(who + ": overall population too small");
  if (!(p1 > 0.0 && p1 < 1.0) || !(p2 > 0.0 && p2 < 1.0)) throw input(who + ": proportions must lie in (0, 1)");
  if (!(rho > -0.5 && rho < 1.0)) throw input(who + ": exchangeable correlation must lie in (-0.5, 1)");
  if (!(sigma > 0.0)) throw input(who + ": x3 sd must be positive");
}

std::vector<Scenario> parse_catalog(std::string_view json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw input(std::string("scenario catalog is not valid JSON: ") + e.what());
  }
  if (!doc.contains("scenarios") || !doc["scenarios"].is_array()) throw input("catalog needs a \"scenarios\" array");
  const double sd = doc.contains("x3_sd") ? number(doc["x3_sd"], "x3_sd") : 1.0;
  std::vector<Scenario> out;
  for (const auto& j : doc["scenarios"]) {
    try {
      Scenario s;
      s.set = j.at("set").get<std::string>();
      s.id = j.at("id").get<int>();
      s.n_total = j.at("n_total").get<std::size_t>();
      s.m = j.at("m").get<std::size_t>();
      const auto& eta = j.at("eta");
      if (!eta.is_array() || eta.size() != 4) throw input("eta needs (p1, p2, mu, rho)");
      s.p1 = number(eta[0], "p1");
      s.p2 = number(eta[1], "p2");
      s.mu = number(eta[2], "mu");
      s.rho = number(eta[3], "rho");
      s.sigma = j.contains("x3_sd") ? number(j["x3_sd"], "x3_sd") : sd;
      s.beta = coef(j.at("beta"), "beta");
      for (const auto& g : j.at("gamma")) s.gamma.push_back(coef(g, "gamma"));
      s.theta1 = coef(j.at("theta1"), "theta1");
      s.theta0 = coef(j.at("theta0"), "theta0");
      if (j.contains("x3_cut")) s.x3_cut = number(j["x3_cut"], "x3_cut");
      s.validate();
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw input(std::string("malformed scenario entry: ") + e.what());
    }
  }
  return out;
}

std::vector<Scenario> load_catalog(const std::filesystem::path& path) {
  return parse_catalog(csv::read_text(path, kModule));
}

std::vector<Scenario> select_set(const std::vector<Scenario>& catalog, std::string_view set) {
  if (set != "5trial" && set != "1trial" && set != "all") {
    throw input("unknown scenario set '" + std::string(set) + "' (use 5trial, 1trial or all)");
  }
  std::vector<Scenario> out;
  for (const auto& s : catalog) {
    if (set == "all" || s.set == set) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data generation
// ---------------------------------------------------------------------------

CovariateSchema simulation_schema(double cut) {
  CovariateSchema schema;
  schema.add_covariate(Covariate{"x1", CovariateKind::binary, {"0", "1"}});
  schema.add_covariate(Covariate{"x2", CovariateKind::binary, {"0", "1"}});
  schema.add_covariate(Covariate{"x3", CovariateKind::continuous, {}});
  const std::string c = csv::format_double(cut);
  Interval low;
  low.hi = cut;
  low.hi_closed = true;
  Interval high;
  high.lo = cut;
  schema.set_strata("*", 2, {Stratum{"<=" + c, 2, low}, Stratum{">" + c, 2, high}});
  return schema;
}

Replicate run_dgp(const Scenario& scenario, std::uint64_t rep_seed) {
  scenario.validate();
  const CovariateSchema schema = simulation_schema(scenario.cut());
  const std::size_t m = scenario.m;
  std::vector<std::string> warnings;
  constexpr int kMaxAttempts = 50;

  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const std::uint64_t seed = derive_seed(rep_seed, static_cast<std::uint64_t>(attempt));
    const CopulaSpec spec = fit_spec_from_summaries(
        {{"x1", CovariateKind::binary, scenario.p1, {}, {}},
         {"x2", CovariateKind::binary, scenario.p2, {}, {}},
         {"x3", CovariateKind::continuous, scenario.mu, scenario.sigma, {}}},
        scenario.rho, scenario.n_total, derive_seed(seed, 1));
    const CovariateSample population = sample(spec, SampleRole::base);

    std::mt19937_64 rng(derive_seed(seed, 2));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<int> member(scenario.n_total, -1);
    Vector a = Vector::Zero(static_cast<Eigen::Index>(scenario.n_total));
    Vector y = Vector::Zero(a.size());
    std::vector<double> logits(m);
    for (std::size_t i = 0; i < scenario.n_total; ++i) {
      const Row x = population.row(i);
      if (unif(rng) >= expit(linear(scenario.beta, x))) continue;
      // Multinomial logistic allocation with trial 1 as the reference.
      logits[0] = 0.0;
      for (std::size_t s = 1; s < m; ++s) logits[s] = linear(scenario.gamma[s - 1], x);
      const double top = *std::max_element(logits.begin(), logits.end());
      double total = 0.0;
      for (double& l : logits) total += (l = std::exp(l - top));
      const double u = unif(rng) * total;
      std::size_t s = 0;
      for (double acc = logits[0]; s + 1 < m && u >= acc; acc += logits[++s]) {}
      member[i] = static_cast<int>(s);
      const auto k = static_cast<Eigen::Index>(i);
      a(k) = unif(rng) < 0.5 ? 1.0 : 0.0;
      const double y1 = unif(rng) < expit(linear(scenario.theta1, x)) ? 1.0 : 0.0;
      const double y0 = unif(rng) < expit(linear(scenario.theta0, x)) ? 1.0 : 0.0;
      y(k) = a(k) == 1.0 ? y1 : y0;
    }

    // Cells: marginal, x1 = 0/1, x2 = 0/1, x3 low/high.
    std::vector<std::array<Cell, 7>> cells(m);
    std::vector<std::size_t> sizes(m, 0);
    std::vector<std::array<double, 4>> sums(m, {0.0, 0.0, 0.0, 0.0});  // x1, x2, x3, x3^2
    std::size_t n_target = 0;
    for (std::size_t i = 0; i < scenario.n_total; ++i) {
      if (member[i] < 0) {
        ++n_target;
        continue;
      }
      const auto s = static_cast<std::size_t>(member[i]);
      const Row x = population.row(i);
      const auto k = static_cast<Eigen::Index>(i);
      auto& c = cells[s];
      c[0].add(a(k), y(k));
      c[1 + (x[0] == 1.0)].add(a(k), y(k));
      c[3 + (x[1] == 1.0)].add(a(k), y(k));
      c[5 + (x[2] > scenario.cut())].add(a(k), y(k));
      ++sizes[s];
      sums[s][0] += x[0];
      sums[s][1] += x[1];
      sums[s][2] += x[2];
      sums[s][3] += x[2] * x[2];
    }

    std::string problem;
    if (n_target == 0) problem = "no target rows";
    for (std::size_t s = 0; s < m && problem.empty(); ++s) {
      if (sizes[s] < 2) {
        problem = "trial " + std::to_string(s + 1) + " has fewer than two participants";
        break;
      }
      for (std::size_t c = 0; c < 7; ++c) {
        const Cell& cell = cells[s][c];
        if (cell.n1 == 0 || cell.n0 == 0) {
          problem = "empty arm in trial " + std::to_string(s + 1) + " cell " + std::to_string(c);
          break;
        }
        if (risk_difference_from_counts(cell.e1, cell.n1, cell.e0, cell.n0).se == 0.0) {
          problem = "zero-SE effect in trial " + std::to_string(s + 1) + " cell " + std::to_string(c);
          break;
        }
      }
    }
    if (!problem.empty()) {
      warnings.push_back("replicate redrawn after attempt " + std::to_string(attempt + 1) + ": " + problem);
      continue;
    }

    std::vector<Trial> trials(m);
    for (std::size_t s = 0; s < m; ++s) {
      Trial& t = trials[s];
      t.id = "trial" + std::to_string(s + 1);
      t.n = static_cast<double>(sizes[s]);
      const std::array<std::pair<std::size_t, std::size_t>, 7> index{
          {{0, 0}, {1, 1}, {1, 2}, {2, 1}, {2, 2}, {3, 1}, {3, 2}}};
      for (std::size_t c = 0; c < 7; ++c) {
        const Cell& cell = cells[s][c];
        const RiskDifference rd = risk_difference_from_counts(cell.e1, cell.n1, cell.e0, cell.n0);
        EffectEstimate e;
        e.trial = t.id;
        e.covariate = index[c].first;
        e.level = index[c].second;
        if (e.covariate > 0) e.stratum_label = schema.strata_for(t.id, e.covariate - 1)[e.level - 1].label;
        e.estimate = rd.estimate;
        e.se = rd.se;
        e.counts = ArmCounts{cell.e1, cell.n1, cell.e0, cell.n0};
        t.effects.push_back(std::move(e));
      }
      const double n = t.n;
      const double mean3 = sums[s][2] / n;
      const double var3 = std::max(0.0, (sums[s][3] - n * mean3 * mean3) / (n - 1.0));
      const double sd3 = std::sqrt(var3);
      t.moments.push_back(MomentSummary{t.id, MomentSpec{MomentKind::proportion, 0, 1}, sums[s][0] / n, n, {}});
      t.moments.push_back(MomentSummary{t.id, MomentSpec{MomentKind::proportion, 1, 1}, sums[s][1] / n, n, {}});
      t.moments.push_back(MomentSummary{t.id, MomentSpec{MomentKind::mean, 2, 1}, mean3, n, {}});
      t.moments.push_back(MomentSummary{t.id, MomentSpec{MomentKind::second_moment, 2, 1},
                                        second_moment_from_sd(mean3, sd3, n), n, sd3});
    }

    Replicate rep;
    rep.attempts = attempt + 1;
    rep.warnings = warnings;
    rep.dataset = MetaDataset(schema, std::move(trials));
    const std::size_t n_trial = scenario.n_total - n_target;
    rep.ipd.x.resize(static_cast<Eigen::Index>(n_trial), 3);
    rep.ipd.a.resize(static_cast<Eigen::Index>(n_trial));
    rep.ipd.y.resize(static_cast<Eigen::Index>(n_trial));
    RowMatrix tx(static_cast<Eigen::Index>(n_target), 3);
    Eigen::Index ti = 0, ii = 0;
    double truth = 0.0;
    for (std::size_t i = 0; i < scenario.n_total; ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      if (member[i] < 0) {
        tx.row(ti++) = population.values().row(k);
        const Row x = population.row(i);
        truth += expit(linear(scenario.theta1, x)) - expit(linear(scenario.theta0, x));
      } else {
        rep.ipd.x.row(ii) = population.values().row(k);
        rep.ipd.trial.push_back(member[i]);
        rep.ipd.a(ii) = a(k);
        rep.ipd.y(ii) = y(k);
        ++ii;
      }
    }
    rep.truth = truth / static_cast<double>(n_target);
    rep.target = CovariateSample(std::move(tx), SampleRole::target);
    return rep;
  }
  throw NumericalError(std::string(kModule), "could not draw a usable replicate in " + std::to_string(kMaxAttempts) +
                                                 " attempts: " + warnings.back());
}

// ---------------------------------------------------------------------------
// IPD g-formula
// ---------------------------------------------------------------------------

namespace {

Eigen::RowVectorXd outcome_design(Row x, double a) {
  Eigen::RowVectorXd z(8);
  z << 1.0, x[0], x[1], x[2], a, a * x[0], a * x[1], a * x[2];
  return z;
}

}  // namespace

Estimate ipd_gformula(const TrialIpd& ipd, const CovariateSample& target) {
  if (ipd.rows() == 0) throw InputError(std::string(kModule), "no trial participants for the g-formula");
  if (target.rows() == 0) throw InputError(std::string(kModule), "empty target sample");
  Matrix Z(static_cast<Eigen::Index>(ipd.rows()), 8);
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    const Row x(ipd.x.data() + i * 3, 3);
    Z.row(i) = outcome_design(x, ipd.a(i));
  }
  const LogisticFit lf = fit_logistic(Z, ipd.y);
  const double n = static_cast<double>(ipd.rows());

  // HC0 sandwich: bread^-1 meat bread^-1 with bread = Z' diag(p(1-p)) Z.
  const Matrix scores = logistic_scores(Z, ipd.y, lf.coef);
  const Matrix bread_inv = (lf.information * n).inverse();
  const Matrix var_theta = bread_inv * (scores.transpose() * scores) * bread_inv;

  const double n0 = static_cast<double>(target.rows());
  std::vector<double> d(target.rows());
  Vector j = Vector::Zero(8);
  double psi = 0.0;
  for (std::size_t i = 0; i < target.rows(); ++i) {
    const Row x = target.row(i);
    const Eigen::RowVectorXd z1 = outcome_design(x, 1.0);
    const Eigen::RowVectorXd z0 = outcome_design(x, 0.0);
    const double m1 = expit(z1.dot(lf.coef));
    const double m0 = expit(z0.dot(lf.coef));
    d[i] = m1 - m0;
    psi += d[i];
    j += (m1 * (1.0 - m1) * z1 - m0 * (1.0 - m0) * z0).transpose();
  }
  psi /= n0;
  j /= n0;
  double ss = 0.0;
  for (double v : d) ss += (v - psi) * (v - psi);
  const double var = ss / (n0 * n0) + j.dot(var_theta * j);
  return Estimate{psi, std::sqrt(var)};
}

// ---------------------------------------------------------------------------
// REML meta-analysis and meta-regression
// ---------------------------------------------------------------------------

GlsFit gls(const Vector& y, const Vector& v, const Matrix& X, double tau2) {
  const Vector w = (v.array() + tau2).inverse();
  const Matrix xtwx = X.transpose() * w.asDiagonal() * X;
  Eigen::LDLT<Matrix> ldlt(xtwx);
  GlsFit g;
  g.cov = ldlt.solve(Matrix::Identity(X.cols(), X.cols()));
  g.coef = ldlt.solve(X.transpose() * w.asDiagonal() * y);
  return g;
}

double reml_loglik(const Vector& y, const Vector& v, const Matrix& X, double tau2) {
  const Vector w = (v.array() + tau2).inverse();
  const GlsFit g = gls(y, v, X, tau2);
  const Vector r = y - X * g.coef;
  const Matrix xtwx = X.transpose() * w.asDiagonal() * X;
  const double logdet = xtwx.ldlt().vectorD().array().log().sum();
  return -0.5 * ((v.array() + tau2).log().sum() + logdet + r.dot(w.asDiagonal() * r));
}

namespace {

// d loglik / d tau2 = (y' P P y - tr P) / 2 with P = W - W X (X' W X)^-1 X' W.
double reml_score(const Vector& y, const Vector& v, const Matrix& X, double tau2) {
  const Vector w = (v.array() + tau2).inverse();
  const Matrix W = w.asDiagonal();
  const Matrix WX = W * X;
  const Matrix P = W - WX * (X.transpose() * WX).ldlt().solve(WX.transpose());
  const Vector Py = P * y;
  return 0.5 * (Py.squaredNorm() - P.trace());
}

}  // namespace

double reml_tau2(const Vector& y, const Vector& v, const Matrix& X) {
  if (y.size() <= X.cols()) throw InputError(std::string(kModule), "REML needs more trials than regressors");
  if (reml_score(y, v, X, 0.0) <= 0.0) return 0.0;
  double hi = std::max(1e-4, (y.array() - y.mean()).square().sum());
  for (int i = 0; i < 60 && reml_score(y, v, X, hi) > 0.0; ++i) hi *= 2.0;
  std::uintmax_t iterations = 200;
  const auto [lo_root, hi_root] = boost::math::tools::toms748_solve(
      [&](double t) { return reml_score(y, v, X, t); }, 0.0, hi, boost::math::tools::eps_tolerance<double>(48),
      iterations);
  return 0.5 * (lo_root + hi_root);
}

MetaResult meta_random_effects(const Vector& estimates, const Vector& se) {
  if (estimates.size() < 2) throw InputError(std::string(kModule), "random-effects meta-analysis needs at least 2 trials");
  if (se.size() != estimates.size()) throw InputError(std::string(kModule), "estimate and SE lengths differ");
  const Vector v = se.array().square();
  const Matrix X = Matrix::Ones(estimates.size(), 1);
  MetaResult r;
  r.tau2 = reml_tau2(estimates, v, X);
  const GlsFit g = gls(estimates, v, X, r.tau2);
  r.pooled = g.coef(0);
  r.se = std::sqrt(g.cov(0, 0));
  return r;
}

Estimate meta_regression(const Vector& estimates, const Vector& se, const Matrix& trial_means,
                         const Vector& target_means) {
  const auto m = estimates.size();
  if (trial_means.rows() != m || trial_means.cols() != target_means.size()) {
    throw InputError(std::string(kModule), "meta-regression inputs have inconsistent dimensions");
  }
  std::vector<Eigen::Index> keep;
  for (Eigen::Index k = 0; k < trial_means.cols(); ++k) {
    const double spread = trial_means.col(k).maxCoeff() - trial_means.col(k).minCoeff();
    if (spread > 1e-12 * (1.0 + trial_means.col(k).cwiseAbs().maxCoeff())) keep.push_back(k);
  }
  const auto p = static_cast<Eigen::Index>(keep.size()) + 1;
  if (m <= p) {
    throw InputError(std::string(kModule), "meta-regression needs more trials (" + std::to_string(m) +
                                               ") than regressors (" + std::to_string(p) + ")");
  }
  Matrix X(m, p);
  Vector x0(p);
  X.col(0).setOnes();
  x0(0) = 1.0;
  for (std::size_t c = 0; c < keep.size(); ++c) {
    X.col(static_cast<Eigen::Index>(c) + 1) = trial_means.col(keep[c]);
    x0(static_cast<Eigen::Index>(c) + 1) = target_means(keep[c]);
  }
  Matrix scaled = X;
  for (Eigen::Index c = 0; c < p; ++c) scaled.col(c) /= scaled.col(c).norm();
  const Vector sv = Eigen::JacobiSVD<Matrix>(scaled).singularValues();
  if (sv(sv.size() - 1) < 1e-10 * sv(0)) {
    throw NumericalError(std::string(kModule), "meta-regression design is rank deficient (trial mean covariates are collinear)");
  }
  const Vector v = se.array().square();
  const double tau2 = reml_tau2(estimates, v, X);
  const GlsFit g = gls(estimates, v, X, tau2);
  return Estimate{x0.dot(g.coef), std::sqrt(x0.dot(g.cov * x0))};
}

// ---------------------------------------------------------------------------
// CATE transport
// ---------------------------------------------------------------------------

Estimate cima(const Replicate& rep, Weighting weighting) {
  const CateBasis basis = CateBasis::parse("~ 1 + x1 + x2 + x3", rep.dataset.schema());
  PipelineOptions options;
  options.fit.weighting = weighting;
  const PipelineResult p =
      run_pipeline(rep.dataset, rep.target.with_role(SampleRole::base), basis, options,
                   static_cast<double>(rep.target.rows()));
  const TransportResult r = transport_ate(p.fit, rep.target);
  return Estimate{r.psi_hat, r.se};
}

// ---------------------------------------------------------------------------
// Study runner
// ---------------------------------------------------------------------------

std::string to_string(Method m) {
  switch (m) {
    case Method::cima: return "cima";
    case Method::meta: return "meta";
    case Method::metareg: return "metareg";
    case Method::ipd: return "ipd";
  }
  return "?";
}

Method parse_method(std::string_view text) {
  for (Method m : {Method::cima, Method::meta, Method::metareg, Method::ipd}) {
    if (text == to_string(m)) return m;
  }
  throw input("unknown method '" + std::string(text) + "' (use cima, meta, metareg or ipd)");
}

std::vector<Method> applicable(const Scenario& s, const std::vector<Method>& requested) {
  std::vector<Method> out;
  for (Method m : requested) {
    if ((m == Method::meta || m == Method::metareg) && s.m < 2) continue;
    out.push_back(m);
  }
  return out;
}

namespace {

struct Outcome {
  bool ok = false;
  double psi = 0.0;
  double se = 0.0;
};

struct RepResult {
  bool drawn = false;
  double truth = 0.0;
  std::vector<Outcome> methods;
};

RepResult run_replicate(const Scenario& s, const std::vector<Method>& methods, std::uint64_t seed,
                        Weighting weighting) {
  RepResult out;
  out.methods.resize(methods.size());
  Replicate rep;
  try {
    rep = run_dgp(s, seed);
  } catch (const Error&) {
    return out;
  }
  out.drawn = true;
  out.truth = rep.truth;

  const auto& trials = rep.dataset.trials();
  Vector est(static_cast<Eigen::Index>(trials.size()));
  Vector se(est.size());
  Matrix means(est.size(), 3);
  for (std::size_t t = 0; t < trials.size(); ++t) {
    const auto k = static_cast<Eigen::Index>(t);
    est(k) = trials[t].effects.front().estimate;
    se(k) = trials[t].effects.front().se;
    for (const MomentSummary& mo : trials[t].moments) {
      if (mo.spec.kind != MomentKind::second_moment) means(k, static_cast<Eigen::Index>(mo.spec.covariate)) = mo.value;
    }
  }
  const Vector target_means = rep.target.values().colwise().mean().transpose();

  for (std::size_t i = 0; i < methods.size(); ++i) {
    try {
      Estimate e;
      switch (methods[i]) {
        case Method::cima: e = cima(rep, weighting); break;
        case Method::meta: {
          const MetaResult mr = meta_random_effects(est, se);
          e = Estimate{mr.pooled, mr.se};
          break;
        }
        case Method::metareg: e = meta_regression(est, se, means, target_means); break;
        case Method::ipd: e = ipd_gformula(rep.ipd, rep.target); break;
      }
      if (std::isfinite(e.psi) && std::isfinite(e.se)) out.methods[i] = Outcome{true, e.psi, e.se};
    } catch (const Error&) {
      // counted as a failure for this method
    }
  }
  return out;
}

}  // namespace

std::vector<MetricsRow> run_study(const std::vector<Scenario>& scenarios, const StudyOptions& options) {
  std::vector<MetricsRow> rows;
  if (options.replications == 0) return rows;
  const std::size_t reps = options.replications;
  std::vector<std::vector<Method>> methods;
  for (const auto& s : scenarios) methods.push_back(applicable(s, options.methods));

  const std::size_t tasks = scenarios.size() * reps;
  std::vector<RepResult> results(tasks);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t t = next++; t < tasks; t = next++) {
      const std::size_t si = t / reps;
      const std::size_t r = t % reps;
      const std::uint64_t seed = derive_seed(options.seed, scenario_key(scenarios[si]), r);
      results[t] = run_replicate(scenarios[si], methods[si], seed, options.weighting);
    }
  };
  const unsigned jobs = std::max(1u, options.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }

  for (std::size_t si = 0; si < scenarios.size(); ++si) {
    for (std::size_t mi = 0; mi < methods[si].size(); ++mi) {
      MetricsRow row;
      row.scenario = scenarios[si].id;
      row.set = scenarios[si].set;
      row.method = methods[si][mi];
      std::vector<double> psi, err, truth;
      std::size_t covered = 0;
      for (std::size_t r = 0; r < reps; ++r) {
        const RepResult& res = results[si * reps + r];
        const Outcome& o = res.methods[mi];
        if (!res.drawn || !o.ok) {
          ++row.failures;
          continue;
        }
        psi.push_back(o.psi);
        err.push_back(o.psi - res.truth);
        truth.push_back(res.truth);
        covered += std::abs(o.psi - res.truth) <= kWaldZ * o.se;
      }
      row.replications = psi.size();
      row.flagged = static_cast<double>(row.failures) >= 0.02 * static_cast<double>(reps);
      const double n = static_cast<double>(psi.size());
      if (psi.empty()) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        row.truth = row.bias = row.variance = row.mse = row.mae = row.coverage = nan;
        row.mcse_bias = row.mcse_coverage = row.mcse_mse = nan;
        rows.push_back(row);
        continue;
      }
      double psi_mean = 0.0, sq = 0.0, sq2 = 0.0;
      for (std::size_t i = 0; i < psi.size(); ++i) {
        psi_mean += psi[i];
        row.truth += truth[i];
        row.bias += err[i];
        row.mse += err[i] * err[i];
        row.mae += std::abs(err[i]);
      }
      psi_mean /= n;
      row.truth /= n;
      row.bias /= n;
      row.mse /= n;
      row.mae /= n;
      for (std::size_t i = 0; i < psi.size(); ++i) {
        row.variance += (psi[i] - psi_mean) * (psi[i] - psi_mean);
        sq += (err[i] - row.bias) * (err[i] - row.bias);
        sq2 += (err[i] * err[i] - row.mse) * (err[i] * err[i] - row.mse);
      }
      const double denom = std::max(1.0, n - 1.0);
      row.variance /= denom;
      row.coverage = static_cast<double>(covered) / n;
      row.mcse_bias = std::sqrt(sq / denom / n);
      row.mcse_coverage = std::sqrt(row.coverage * (1.0 - row.coverage) / n);
      row.mcse_mse = std::sqrt(sq2 / denom / n);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out << "scenario,set,method,replications,failures,flagged,truth,bias,variance,mse,mae,coverage,"
         "mcse_bias,mcse_coverage,mcse_mse\n";
  for (const MetricsRow& r : rows) {
    out << r.scenario << ',' << r.set << ',' << to_string(r.method) << ',' << r.replications << ',' << r.failures
        << ',' << (r.flagged ? "yes" : "no");
    for (double v : {r.truth, r.bias, r.variance, r.mse, r.mae, r.coverage, r.mcse_bias, r.mcse_coverage, r.mcse_mse}) {
      out << ',' << (std::isnan(v) ? std::string("NA") : csv::format_double(v));
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace agt::sim
