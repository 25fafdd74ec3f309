#include "agt/aggdata.hpp"
#include "agt/csv.hpp"

#include <sstream>

namespace agt {

namespace {
constexpr std::string_view kModule = "aggdata";
}

CovariateSample::CovariateSample(RowMatrix values, SampleRole role, std::optional<Vector> outcome)
    : values_(std::move(values)), role_(role), outcome_(std::move(outcome)) {
  if (outcome_ && outcome_->size() != values_.rows()) {
    throw InputError(std::string(kModule), "outcome length does not match the number of sample rows");
  }
}

CovariateSample CovariateSample::with_role(SampleRole role) const {
  CovariateSample out = *this;
  out.role_ = role;
  return out;
}

CovariateSample CovariateSample::filter(const std::vector<bool>& keep) const {
  if (keep.size() != rows()) throw InputError(std::string(kModule), "filter mask length mismatch");
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) idx.push_back(static_cast<Eigen::Index>(i));
  }
  RowMatrix v(static_cast<Eigen::Index>(idx.size()), values_.cols());
  std::optional<Vector> y;
  if (outcome_) y = Vector(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    v.row(static_cast<Eigen::Index>(r)) = values_.row(idx[r]);
    if (y) (*y)(static_cast<Eigen::Index>(r)) = (*outcome_)(idx[r]);
  }
  return CovariateSample(std::move(v), role_, std::move(y));
}

void validate_sample(const CovariateSample& sample, const CovariateSchema& schema) {
  if (sample.covariates() != schema.size()) {
    throw InputError(std::string(kModule), "sample has " + std::to_string(sample.covariates()) +
                                               " covariates, schema declares " + std::to_string(schema.size()));
  }
  for (std::size_t i = 0; i < sample.rows(); ++i) {
    const Row row = sample.row(i);
    for (std::size_t k = 0; k < schema.size(); ++k) {
      const double v = row[k];
      const Covariate& c = schema.covariate(k);
      if (!std::isfinite(v)) {
        throw InputError(std::string(kModule), "non-finite value in row " + std::to_string(i + 1) + " of '" + c.name + "'");
      }
      if (c.kind != CovariateKind::continuous) {
        if (v != std::floor(v) || v < 0.0 || v >= static_cast<double>(c.levels.size())) {
          throw InputError(std::string(kModule),
                           "row " + std::to_string(i + 1) + ": value is not a declared level of '" + c.name + "'");
        }
      }
    }
  }
  if (sample.outcome()) {
    for (Eigen::Index i = 0; i < sample.outcome()->size(); ++i) {
      if (!std::isfinite((*sample.outcome())(i))) throw InputError(std::string(kModule), "non-finite outcome value");
    }
  }
}

CovariateSample parse_covariate_sample(std::string_view csv_text, const CovariateSchema& schema, SampleRole role) {
  const csv::Table t = csv::parse(csv_text, kModule);
  std::vector<std::size_t> col(schema.size());
  for (std::size_t k = 0; k < schema.size(); ++k) col[k] = t.require_column(schema.covariate(k).name, kModule);
  const auto y_col = t.column("Y");
  for (const auto& h : t.header) {
    if (h != "Y" && !schema.find(h)) throw InputError(std::string(kModule), "sample column '" + h + "' is not in the schema");
  }
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  RowMatrix x(n, static_cast<Eigen::Index>(schema.size()));
  std::optional<Vector> y;
  if (y_col) y = Vector(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = t.rows[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < schema.size(); ++k) {
      try {
        x(i, static_cast<Eigen::Index>(k)) = schema.parse_value(k, row[col[k]]);
      } catch (const InputError& e) {
        throw InputError(std::string(kModule),
                         "sample line " + std::to_string(t.line_numbers[static_cast<std::size_t>(i)]) + ": " +
                             e.what());
      }
    }
    if (y) {
      if (csv::trim(row[*y_col]).empty()) throw InputError(std::string(kModule), "missing value in column 'Y'");
      (*y)(i) = csv::to_double(row[*y_col], kModule, "outcome");
    }
  }
  CovariateSample sample(std::move(x), role, std::move(y));
  validate_sample(sample, schema);
  return sample;
}

CovariateSample load_covariate_sample(const std::filesystem::path& path, const CovariateSchema& schema,
                                      SampleRole role) {
  return parse_covariate_sample(csv::read_text(path, kModule), schema, role);
}

std::string serialize_covariate_sample(const CovariateSample& sample, const CovariateSchema& schema) {
  std::ostringstream out;
  for (std::size_t k = 0; k < schema.size(); ++k) out << (k ? "," : "") << csv::escape(schema.covariate(k).name);
  if (sample.outcome()) out << ",Y";
  out << "\n";
  for (std::size_t i = 0; i < sample.rows(); ++i) {
    const Row row = sample.row(i);
    for (std::size_t k = 0; k < schema.size(); ++k) out << (k ? "," : "") << csv::escape(schema.format_value(k, row[k]));
    if (sample.outcome()) out << "," << csv::format_double((*sample.outcome())(static_cast<Eigen::Index>(i)));
    out << "\n";
  }
  return out.str();
}

}  // namespace agt
