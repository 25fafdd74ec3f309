#include "agt/estimands.hpp"

#include "agt/csv.hpp"
#include "agt/glm.hpp"

#include <algorithm>
#include <array>
#include <set>
#include <sstream>

namespace agt {

namespace {

const CateModel& model_of(const CateFit& fit) {
  if (!fit.model) throw InputError("estimands", "fit carries no CATE model");
  if (static_cast<std::size_t>(fit.theta.size()) != fit.model->dim()) {
    throw InputError("estimands", "fit theta length does not match its model");
  }
  return *fit.model;
}

double theta_variance(const CateFit& fit, const Vector& j_psi) {
  if (fit.V_theta.size() == 0 || fit.n_total <= 0.0) return 0.0;
  return j_psi.dot(fit.V_theta * j_psi) / fit.n_total;
}

// Mean of a per-row value over kept rows, its target-sample variance term,
// and the mean gradient for each fit involved.
struct Marginal {
  double psi = 0.0;
  double var_target = 0.0;
  std::size_t n = 0;
};

template <typename ValueFn>
Marginal marginalize(const CovariateSample& target, const std::vector<bool>* keep, ValueFn&& value) {
  std::vector<double> v;
  v.reserve(target.rows());
  for (std::size_t i = 0; i < target.rows(); ++i) {
    if (keep && !(*keep)[i]) continue;
    v.push_back(value(target.row(i)));
  }
  Marginal m;
  m.n = v.size();
  if (m.n == 0) return m;
  const double n = static_cast<double>(m.n);
  for (double x : v) m.psi += x;
  m.psi /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - m.psi) * (x - m.psi);
  m.var_target = ss / (n * n);
  return m;
}

Vector mean_gradient(const CateModel& model, const Vector& theta, const CovariateSample& target,
                     const std::vector<bool>* keep, std::size_t stratum, const BaselineFn* weight = nullptr) {
  Vector j = Vector::Zero(theta.size());
  std::size_t n = 0;
  for (std::size_t i = 0; i < target.rows(); ++i) {
    if (keep && !(*keep)[i]) continue;
    const Row x = target.row(i);
    const double w = weight ? (*weight)(x) : 1.0;
    j += w * model.gradient(x, theta, stratum);
    ++n;
  }
  return n ? Vector(j / static_cast<double>(n)) : j;
}

TransportResult finish(std::string label, const Marginal& m, double var_theta) {
  TransportResult r;
  r.label = std::move(label);
  r.psi_hat = m.psi;
  r.var_target = m.var_target;
  r.var_theta = var_theta;
  r.se = std::sqrt(m.var_target + var_theta);
  r.ci = wald_interval(r.psi_hat, r.se);
  r.n_effective = m.n;
  return r;
}

TransportResult transport_masked(const CateFit& fit, const CovariateSample& target, const std::vector<bool>* keep,
                                 const TransportOptions& options) {
  const CateModel& model = model_of(fit);
  if (target.rows() == 0) throw InputError("estimands", "target sample is empty");
  if (options.stratum >= model.stratum_count()) throw InputError("estimands", "time stratum out of range");
  const Marginal m = marginalize(target, keep, [&](Row x) { return model.evaluate(x, fit.theta, options.stratum); });
  if (m.n == 0) throw InputError("estimands", "subgroup '" + options.label + "' matches no target rows");
  const Vector j = mean_gradient(model, fit.theta, target, keep, options.stratum);
  return finish(options.label, m, theta_variance(fit, j));
}

}  // namespace

// ---------------------------------------------------------------------------
// SubgroupFilter
// ---------------------------------------------------------------------------

SubgroupFilter SubgroupFilter::parse(std::string_view text, const CovariateSchema& schema) {
  SubgroupFilter f;
  if (csv::trim(text).empty()) return f;
  static constexpr std::array<std::string_view, 6> kOps{"<=", ">=", "!=", "<", ">", "="};
  for (const std::string& piece : csv::split(text, ',')) {
    if (piece.empty()) throw InputError("estimands", "empty clause in subgroup filter '" + std::string(text) + "'");
    std::size_t pos = piece.find_first_of("<>=!");
    if (pos == std::string::npos) {
      throw InputError("estimands", "subgroup clause '" + piece + "' has no comparison operator");
    }
    std::string op;
    for (std::string_view candidate : kOps) {
      if (piece.compare(pos, candidate.size(), candidate) == 0) {
        op = std::string(candidate);
        break;
      }
    }
    if (op.empty()) throw InputError("estimands", "bad operator in subgroup clause '" + piece + "'");
    Clause c;
    const std::string name = csv::trim(std::string_view(piece).substr(0, pos));
    const std::string value = csv::trim(std::string_view(piece).substr(pos + op.size()));
    c.covariate = schema.index_of(name);
    c.op = op;
    const Covariate& cov = schema.covariate(c.covariate);
    if (cov.kind != CovariateKind::continuous && op != "=" && op != "!=") {
      throw InputError("estimands", "covariate '" + name + "' is discrete; only = and != apply");
    }
    c.value = schema.parse_value(c.covariate, value);
    c.text = name + op + value;
    f.clauses_.push_back(std::move(c));
  }
  return f;
}

bool SubgroupFilter::matches(Row x) const {
  for (const Clause& c : clauses_) {
    const double v = x[c.covariate];
    bool ok = false;
    if (c.op == "=") ok = v == c.value;
    else if (c.op == "!=") ok = v != c.value;
    else if (c.op == "<") ok = v < c.value;
    else if (c.op == "<=") ok = v <= c.value;
    else if (c.op == ">") ok = v > c.value;
    else if (c.op == ">=") ok = v >= c.value;
    if (!ok) return false;
  }
  return true;
}

std::vector<bool> SubgroupFilter::mask(const CovariateSample& sample) const {
  std::vector<bool> keep(sample.rows());
  for (std::size_t i = 0; i < sample.rows(); ++i) keep[i] = matches(sample.row(i));
  return keep;
}

std::string SubgroupFilter::describe() const {
  std::string out;
  for (const Clause& c : clauses_) {
    if (!out.empty()) out += ',';
    out += c.text;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Estimands
// ---------------------------------------------------------------------------

TransportResult transport_ate(const CateFit& fit, const CovariateSample& target, const TransportOptions& options) {
  return transport_masked(fit, target, nullptr, options);
}

TransportResult subgroup_ate(const CateFit& fit, const CovariateSample& target, const SubgroupFilter& filter,
                             TransportOptions options) {
  if (filter.empty()) return transport_masked(fit, target, nullptr, options);
  if (options.label == "overall") options.label = filter.describe();
  const std::vector<bool> keep = filter.mask(target);
  return transport_masked(fit, target, &keep, options);
}

TransportResult indirect_comparison(const CateFit& fit1, const CateFit& fit2, const CovariateSample& target,
                                    const TransportOptions& options) {
  const CateModel& m1 = model_of(fit1);
  const CateModel& m2 = model_of(fit2);
  if (target.rows() == 0) throw InputError("estimands", "target sample is empty");
  const std::string label = options.label == "overall" ? "indirect" : options.label;

  const std::set<std::string> s1(fit1.trials.begin(), fit1.trials.end());
  const std::set<std::string> s2(fit2.trials.begin(), fit2.trials.end());
  const bool same_fit = s1 == s2 && m1.describe() == m2.describe() && fit1.theta == fit2.theta;
  if (same_fit) {
    // g2 - g1 vanishes identically, so both variance terms are zero.
    Marginal zero;
    zero.n = target.rows();
    return finish(label, zero, 0.0);
  }
  std::vector<std::string> shared;
  std::set_intersection(s1.begin(), s1.end(), s2.begin(), s2.end(), std::back_inserter(shared));
  if (!shared.empty()) {
    std::string list;
    for (const auto& id : shared) list += (list.empty() ? "" : ", ") + id;
    throw InputError("estimands", "indirect comparison needs independent fits, but trials " + list +
                                      " contribute to both; refit on disjoint trial sets");
  }
  if (options.stratum >= m1.stratum_count() || options.stratum >= m2.stratum_count()) {
    throw InputError("estimands", "time stratum out of range");
  }
  const Marginal m = marginalize(target, nullptr, [&](Row x) {
    return m2.evaluate(x, fit2.theta, options.stratum) - m1.evaluate(x, fit1.theta, options.stratum);
  });
  // J_psi is -mean(dg1) for fit 1 and +mean(dg2) for fit 2; the sign drops out of the quadratic form.
  const Vector j1 = mean_gradient(m1, fit1.theta, target, nullptr, options.stratum);
  const Vector j2 = mean_gradient(m2, fit2.theta, target, nullptr, options.stratum);
  return finish(label, m, theta_variance(fit1, j1) + theta_variance(fit2, j2));
}

BaselineFn fit_baseline(const CovariateSample& target, const CovariateSchema& schema) {
  if (!target.outcome()) throw InputError("estimands", "relative-scale transport needs an outcome column in the target");
  if (target.covariates() != schema.size()) throw InputError("estimands", "target does not match the schema");
  auto design = std::make_shared<CateBasis>(CateBasis::default_for(schema));
  Matrix X(static_cast<Eigen::Index>(target.rows()), static_cast<Eigen::Index>(design->dim()));
  for (std::size_t i = 0; i < target.rows(); ++i) X.row(static_cast<Eigen::Index>(i)) = design->features(target.row(i));
  const LogisticFit lf = fit_logistic(X, *target.outcome());
  const Vector coef = lf.coef;
  return [design, coef](Row x) { return expit(coef.dot(design->features(x))); };
}

TransportResult transport_relative(const CateFit& fit, const CovariateSample& target, const CovariateSchema& schema,
                                   const std::optional<BaselineFn>& baseline, const TransportOptions& options) {
  const CateModel& model = model_of(fit);
  if (target.rows() == 0) throw InputError("estimands", "target sample is empty");
  if (!target.outcome()) throw InputError("estimands", "relative-scale transport needs an outcome column in the target");
  if (options.stratum >= model.stratum_count()) throw InputError("estimands", "time stratum out of range");
  const BaselineFn b = baseline ? *baseline : fit_baseline(target, schema);
  const Vector& y = *target.outcome();
  std::size_t i = 0;
  // Rows are visited in order, so the running index pairs each row with its outcome.
  const Marginal m = marginalize(target, nullptr, [&](Row x) {
    return model.evaluate(x, fit.theta, options.stratum) * b(x) - y(static_cast<Eigen::Index>(i++));
  });
  const Vector j = mean_gradient(model, fit.theta, target, nullptr, options.stratum, &b);
  return finish(options.label, m, theta_variance(fit, j));
}

std::string results_csv(const std::vector<TransportResult>& results) {
  std::ostringstream out;
  out << "label,estimate,se,ci_lo,ci_hi,n_effective\n";
  for (const TransportResult& r : results) {
    out << csv::escape(r.label) << ',' << csv::format_double(r.psi_hat) << ',' << csv::format_double(r.se) << ','
        << csv::format_double(r.ci.lo) << ',' << csv::format_double(r.ci.hi) << ',' << r.n_effective << '\n';
  }
  return out.str();
}

}  // namespace agt
