#include "agt/cate.hpp"
#include "agt/csv.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace agt {

namespace {

constexpr std::string_view kModule = "cate";

struct Token {
  bool negative = false;
  std::string text;
};

// Split a formula right-hand side at top-level '+' and '-' signs.
std::vector<Token> tokenize(std::string_view rhs) {
  std::vector<Token> out;
  Token current;
  int depth = 0;
  auto flush = [&](bool next_negative) {
    current.text = csv::trim(current.text);
    if (!current.text.empty()) out.push_back(current);
    else if (current.negative) throw InputError(std::string(kModule), "dangling '-' in formula");
    current = Token{next_negative, {}};
  };
  for (char c : rhs) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (depth < 0) throw InputError(std::string(kModule), "unbalanced parentheses in formula");
    if (depth == 0 && (c == '+' || c == '-')) {
      flush(c == '-');
      continue;
    }
    current.text += c;
  }
  if (depth != 0) throw InputError(std::string(kModule), "unbalanced parentheses in formula");
  flush(false);
  return out;
}

// Each factor token expands into one or more alternatives (categorical
// covariates expand to one indicator per non-reference level).
std::vector<std::pair<std::string, Factor>> expand_factor(std::string_view token, const CovariateSchema& schema) {
  const std::string t = csv::trim(token);
  if (t.rfind("cut(", 0) == 0) {
    if (t.back() != ')') throw InputError(std::string(kModule), "malformed cut term '" + t + "'");
    const auto args = csv::split(t.substr(4, t.size() - 5), ',');
    if (args.size() != 2) throw InputError(std::string(kModule), "cut() takes a covariate and a cutpoint");
    const std::size_t k = schema.index_of(args[0]);
    if (schema.covariate(k).kind != CovariateKind::continuous) {
      throw InputError(std::string(kModule), "cut() applies to continuous covariates only");
    }
    Factor f{Factor::Kind::cut, k, 0, csv::to_double(args[1], kModule, "cutpoint")};
    return {{"cut(" + args[0] + "," + csv::format_double(f.cut) + ")", f}};
  }
  const std::size_t k = schema.index_of(t);
  const Covariate& c = schema.covariate(k);
  switch (c.kind) {
    case CovariateKind::continuous:
    case CovariateKind::binary:
      return {{c.name, Factor{Factor::Kind::value, k, 0, 0.0}}};
    case CovariateKind::categorical: {
      std::vector<std::pair<std::string, Factor>> out;
      for (std::size_t l = 1; l < c.levels.size(); ++l) {
        out.push_back({c.name + "[" + c.levels[l] + "]", Factor{Factor::Kind::level, k, l, 0.0}});
      }
      return out;
    }
  }
  return {};
}

std::string stratum_suffix(const std::string& label) { return "@t=" + label; }

}  // namespace

void CateModel::check_theta(const Vector& theta) const {
  if (static_cast<std::size_t>(theta.size()) != dim()) {
    throw InputError(std::string(kModule), "theta has length " + std::to_string(theta.size()) + ", model dimension is " +
                                               std::to_string(dim()));
  }
}

double Factor::evaluate(Row x) const {
  if (covariate >= x.size()) throw InputError(std::string(kModule), "covariate row is shorter than the basis expects");
  const double v = x[covariate];
  switch (kind) {
    case Kind::value: return v;
    case Kind::level: return v == static_cast<double>(level) ? 1.0 : 0.0;
    case Kind::cut: return v > cut ? 1.0 : 0.0;
  }
  return v;
}

double Term::evaluate(Row x) const {
  double out = 1.0;
  for (const auto& f : factors) out *= f.evaluate(x);
  return out;
}

CateBasis::CateBasis(std::vector<Term> terms, CateScale scale) : terms_(std::move(terms)), scale_(scale) {
  if (terms_.empty()) throw InputError(std::string(kModule), "CATE basis needs at least one term");
  std::set<std::string> names;
  for (const auto& t : terms_) {
    if (!names.insert(t.name).second) throw InputError(std::string(kModule), "duplicate basis term '" + t.name + "'");
  }
  const bool has_intercept = std::any_of(terms_.begin(), terms_.end(), [](const Term& t) { return t.is_intercept(); });
  std::ostringstream f;
  f << "~ " << (has_intercept ? "1" : "0");
  for (const auto& t : terms_) {
    if (!t.is_intercept()) f << " + " << t.name;
  }
  formula_ = f.str();
}

CateBasis CateBasis::parse(std::string_view formula, const CovariateSchema& schema, CateScale scale) {
  std::string rhs = csv::trim(formula);
  if (!rhs.empty() && rhs.front() == '~') rhs = csv::trim(rhs.substr(1));
  if (rhs.empty()) throw InputError(std::string(kModule), "empty formula");

  bool intercept = true;
  std::vector<Term> terms;
  std::set<std::string> seen;
  for (const Token& tok : tokenize(rhs)) {
    if (tok.text == "1" || tok.text == "0") {
      intercept = tok.text == "1" && !tok.negative;
      continue;
    }
    if (tok.negative) throw InputError(std::string(kModule), "only the intercept can be removed with '-'");
    // Expand a:b:c into the product of its factors' alternatives.
    std::vector<std::pair<std::string, std::vector<Factor>>> partial{{"", {}}};
    for (const auto& piece : csv::split(tok.text, ':')) {
      const auto alternatives = expand_factor(piece, schema);
      std::vector<std::pair<std::string, std::vector<Factor>>> next;
      for (const auto& [name, factors] : partial) {
        for (const auto& [alt_name, factor] : alternatives) {
          auto f = factors;
          f.push_back(factor);
          next.push_back({name.empty() ? alt_name : name + ":" + alt_name, std::move(f)});
        }
      }
      partial = std::move(next);
    }
    for (auto& [name, factors] : partial) {
      if (seen.insert(name).second) terms.push_back(Term{name, std::move(factors)});
    }
  }
  if (intercept) terms.insert(terms.begin(), Term{"(Intercept)", {}});
  return CateBasis(std::move(terms), scale);
}

CateBasis CateBasis::default_for(const CovariateSchema& schema, CateScale scale) {
  std::string formula = "~ 1";
  for (const auto& c : schema.covariates()) formula += " + " + c.name;
  return parse(formula, schema, scale);
}

std::size_t CateBasis::dim() const {
  const std::size_t T = stratum_count();
  switch (mode_) {
    case TimeStratification::none: return terms_.size();
    case TimeStratification::partial: return T + terms_.size() - 1;
    case TimeStratification::full: return T * terms_.size();
  }
  return terms_.size();
}

Vector CateBasis::features(Row x, std::size_t stratum) const {
  const std::size_t T = stratum_count();
  if (stratum >= T) throw InputError(std::string(kModule), "time stratum out of range");
  Vector phi = Vector::Zero(static_cast<Eigen::Index>(dim()));
  switch (mode_) {
    case TimeStratification::none:
      for (std::size_t j = 0; j < terms_.size(); ++j) phi(static_cast<Eigen::Index>(j)) = terms_[j].evaluate(x);
      break;
    case TimeStratification::partial: {
      phi(static_cast<Eigen::Index>(stratum)) = 1.0;
      Eigen::Index pos = static_cast<Eigen::Index>(T);
      for (const auto& t : terms_) {
        if (!t.is_intercept()) phi(pos++) = t.evaluate(x);
      }
      break;
    }
    case TimeStratification::full: {
      const auto offset = static_cast<Eigen::Index>(stratum * terms_.size());
      for (std::size_t j = 0; j < terms_.size(); ++j) phi(offset + static_cast<Eigen::Index>(j)) = terms_[j].evaluate(x);
      break;
    }
  }
  return phi;
}

double CateBasis::evaluate(Row x, const Vector& theta, std::size_t stratum) const {
  check_theta(theta);
  const double lin = features(x, stratum).dot(theta);
  return scale_ == CateScale::additive ? lin : std::exp(lin);
}

Vector CateBasis::gradient(Row x, const Vector& theta, std::size_t stratum) const {
  check_theta(theta);
  Vector phi = features(x, stratum);
  if (scale_ == CateScale::relative) phi *= std::exp(phi.dot(theta));
  return phi;
}

std::vector<std::string> CateBasis::parameter_names() const {
  std::vector<std::string> names;
  switch (mode_) {
    case TimeStratification::none:
      for (const auto& t : terms_) names.push_back(t.name);
      break;
    case TimeStratification::partial:
      for (const auto& label : strata_labels_) names.push_back("(Intercept)" + stratum_suffix(label));
      for (const auto& t : terms_) {
        if (!t.is_intercept()) names.push_back(t.name);
      }
      break;
    case TimeStratification::full:
      for (const auto& label : strata_labels_)
        for (const auto& t : terms_) names.push_back(t.name + stratum_suffix(label));
      break;
  }
  return names;
}

std::string CateBasis::describe() const {
  std::string out = formula_;
  if (scale_ == CateScale::relative) out += " [relative scale]";
  if (mode_ != TimeStratification::none) {
    out += mode_ == TimeStratification::partial ? " [time strata: intercepts]" : " [time strata: full]";
  }
  return out;
}

std::size_t CateBasis::stratum_of(std::string_view trial) const {
  if (mode_ == TimeStratification::none) return 0;
  const auto it = trial_stratum_.find(trial);
  if (it == trial_stratum_.end()) {
    throw InputError(std::string(kModule), "trial '" + std::string(trial) + "' has no follow-up stratum");
  }
  return it->second;
}

CateBasis build_time_stratified(const CateBasis& basis, const std::map<std::string, double>& followups,
                                TimeStratification mode) {
  if (basis.stratification() != TimeStratification::none) {
    throw InputError(std::string(kModule), "basis is already time-stratified");
  }
  CateBasis out = basis;
  if (mode == TimeStratification::none) return out;
  const bool has_intercept =
      std::any_of(basis.terms().begin(), basis.terms().end(), [](const Term& t) { return t.is_intercept(); });
  if (mode == TimeStratification::partial && !has_intercept) {
    throw InputError(std::string(kModule), "intercept-only stratification needs a basis with an intercept");
  }
  if (followups.empty()) throw InputError(std::string(kModule), "no follow-up times supplied");
  std::set<double> times;
  for (const auto& [trial, time] : followups) times.insert(time);
  std::vector<double> ordered(times.begin(), times.end());
  out.mode_ = mode;
  out.strata_labels_.clear();
  for (double t : ordered) out.strata_labels_.push_back(csv::format_double(t));
  for (const auto& [trial, time] : followups) {
    const auto pos = std::lower_bound(ordered.begin(), ordered.end(), time) - ordered.begin();
    out.trial_stratum_[trial] = static_cast<std::size_t>(pos);
  }
  return out;
}

ExpitContrastModel::ExpitContrastModel(CateBasis features) : features_(std::move(features)) {
  if (features_.scale() != CateScale::additive || features_.stratification() != TimeStratification::none) {
    throw InputError(std::string(kModule), "expit contrast needs a plain additive feature basis");
  }
}

double ExpitContrastModel::evaluate(Row x, const Vector& theta, std::size_t) const {
  check_theta(theta);
  const Vector phi = features_.features(x);
  const auto p = static_cast<Eigen::Index>(features_.dim());
  return expit(phi.dot(theta.head(p))) - expit(phi.dot(theta.tail(p)));
}

Vector ExpitContrastModel::gradient(Row x, const Vector& theta, std::size_t) const {
  check_theta(theta);
  const Vector phi = features_.features(x);
  const auto p = static_cast<Eigen::Index>(features_.dim());
  const double e1 = expit(phi.dot(theta.head(p)));
  const double e0 = expit(phi.dot(theta.tail(p)));
  Vector g(2 * p);
  g.head(p) = e1 * (1.0 - e1) * phi;
  g.tail(p) = -e0 * (1.0 - e0) * phi;
  return g;
}

std::vector<std::string> ExpitContrastModel::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& n : features_.parameter_names()) names.push_back("treated:" + n);
  for (const auto& n : features_.parameter_names()) names.push_back("control:" + n);
  return names;
}

std::string ExpitContrastModel::describe() const {
  return "expit contrast over " + features_.formula();
}

}  // namespace agt
