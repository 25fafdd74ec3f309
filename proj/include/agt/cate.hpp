#pragma once

// Parametric CATE models g(x; theta): feature bases built from the covariate
// schema, optional follow-up-time strata, additive or relative scale.

#include "agt/aggdata.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace agt {

enum class CateScale { additive, relative };

class CateModel {
 public:
  virtual ~CateModel() = default;

  virtual std::size_t dim() const = 0;
  virtual bool linear_in_parameters() const = 0;
  virtual CateScale scale() const { return CateScale::additive; }

  /// g(x; theta) for a unit in time stratum `stratum` (0 when unstratified).
  virtual double evaluate(Row x, const Vector& theta, std::size_t stratum = 0) const = 0;
  /// d g(x; theta) / d theta.
  virtual Vector gradient(Row x, const Vector& theta, std::size_t stratum = 0) const = 0;

  virtual std::vector<std::string> parameter_names() const = 0;
  virtual std::string describe() const = 0;

  virtual std::size_t stratum_count() const { return 1; }
  /// Time stratum a trial belongs to; unstratified models return 0.
  virtual std::size_t stratum_of(std::string_view /*trial*/) const { return 0; }

  virtual std::unique_ptr<CateModel> clone() const = 0;

 protected:
  void check_theta(const Vector& theta) const;
};

/// One factor of a basis term.
struct Factor {
  enum class Kind { value, level, cut } kind = Kind::value;
  std::size_t covariate = 0;
  std::size_t level = 0;  // Kind::level: the level code
  double cut = 0.0;       // Kind::cut: indicator x > cut

  double evaluate(Row x) const;
  bool operator==(const Factor&) const = default;
};

/// A product of factors; no factors means the intercept.
struct Term {
  std::string name;
  std::vector<Factor> factors;

  double evaluate(Row x) const;
  bool is_intercept() const { return factors.empty(); }
  bool operator==(const Term&) const = default;
};

enum class TimeStratification { none, partial, full };

/// Feature basis phi(x) with g = theta' phi (additive) or exp(theta' phi)
/// (relative). With time strata, `partial` gives each stratum its own
/// intercept and shares the remaining terms, `full` repeats every term per
/// stratum.
class CateBasis final : public CateModel {
 public:
  CateBasis(std::vector<Term> terms, CateScale scale = CateScale::additive);

  /// Formula mini-language: `~ 1 + lvef + prehhf + lvef:prehhf + cut(lvef, 40)`.
  /// The intercept is implicit unless removed with `0` or `- 1`. Categorical
  /// covariates expand to indicators for every level but the first;
  /// `cut(x, c)` is the indicator x > c.
  static CateBasis parse(std::string_view formula, const CovariateSchema& schema,
                         CateScale scale = CateScale::additive);
  /// Intercept plus main effects of every schema covariate.
  static CateBasis default_for(const CovariateSchema& schema, CateScale scale = CateScale::additive);

  std::size_t dim() const override;
  bool linear_in_parameters() const override { return scale_ == CateScale::additive; }
  CateScale scale() const override { return scale_; }
  double evaluate(Row x, const Vector& theta, std::size_t stratum = 0) const override;
  Vector gradient(Row x, const Vector& theta, std::size_t stratum = 0) const override;
  std::vector<std::string> parameter_names() const override;
  std::string describe() const override;
  std::size_t stratum_count() const override { return strata_labels_.empty() ? 1 : strata_labels_.size(); }
  std::size_t stratum_of(std::string_view trial) const override;
  std::unique_ptr<CateModel> clone() const override { return std::make_unique<CateBasis>(*this); }

  /// phi(x) for the given stratum, length dim().
  Vector features(Row x, std::size_t stratum = 0) const;

  const std::vector<Term>& terms() const { return terms_; }
  TimeStratification stratification() const { return mode_; }
  const std::vector<std::string>& strata_labels() const { return strata_labels_; }
  const std::string& formula() const { return formula_; }

 private:
  friend CateBasis build_time_stratified(const CateBasis&, const std::map<std::string, double>&,
                                         TimeStratification);

  std::vector<Term> terms_;
  CateScale scale_;
  std::string formula_;
  TimeStratification mode_ = TimeStratification::none;
  std::vector<std::string> strata_labels_;
  std::map<std::string, std::size_t, std::less<>> trial_stratum_;
};

/// Stratify a basis by follow-up time; trials with equal times share a stratum.
CateBasis build_time_stratified(const CateBasis& basis, const std::map<std::string, double>& followups,
                                TimeStratification mode);

/// Nonlinear contrast expit(theta1' phi(x)) - expit(theta0' phi(x)), with
/// theta = (theta1, theta0). Used for risk-difference CATEs implied by
/// logistic potential-outcome models.
class ExpitContrastModel final : public CateModel {
 public:
  explicit ExpitContrastModel(CateBasis features);

  std::size_t dim() const override { return 2 * features_.dim(); }
  bool linear_in_parameters() const override { return false; }
  double evaluate(Row x, const Vector& theta, std::size_t stratum = 0) const override;
  Vector gradient(Row x, const Vector& theta, std::size_t stratum = 0) const override;
  std::vector<std::string> parameter_names() const override;
  std::string describe() const override;
  std::unique_ptr<CateModel> clone() const override { return std::make_unique<ExpitContrastModel>(*this); }

 private:
  CateBasis features_;
};

}  // namespace agt
