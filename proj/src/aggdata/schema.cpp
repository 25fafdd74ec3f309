#include "agt/aggdata.hpp"
#include "agt/csv.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace agt {

namespace {

constexpr std::string_view kModule = "aggdata";

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

double parse_bound(std::string_view text) {
  const std::string t = csv::trim(text);
  return csv::to_double(t, kModule, "interval bound");
}

}  // namespace

std::string_view to_string(CovariateKind kind) {
  switch (kind) {
    case CovariateKind::binary: return "binary";
    case CovariateKind::categorical: return "categorical";
    case CovariateKind::continuous: return "continuous";
  }
  return "continuous";
}

std::optional<std::size_t> Covariate::level_index(std::string_view label) const {
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i] == label) return i;
  }
  return std::nullopt;
}

Interval Interval::parse(std::string_view text) {
  const std::string t = csv::trim(text);
  Interval iv;
  auto starts = [&](std::string_view p) { return t.rfind(p, 0) == 0; };
  if (starts("<=")) {
    iv.hi = parse_bound(t.substr(2));
    iv.hi_closed = true;
    return iv;
  }
  if (starts(">=")) {
    iv.lo = parse_bound(t.substr(2));
    iv.lo_closed = true;
    return iv;
  }
  if (starts("<")) {
    iv.hi = parse_bound(t.substr(1));
    return iv;
  }
  if (starts(">")) {
    iv.lo = parse_bound(t.substr(1));
    return iv;
  }
  if (t.size() < 5 || (t.front() != '[' && t.front() != '(') || (t.back() != ']' && t.back() != ')')) {
    throw InputError(std::string(kModule), "cannot parse interval '" + t + "'");
  }
  const auto comma = t.find(',');
  if (comma == std::string::npos) throw InputError(std::string(kModule), "interval without comma: '" + t + "'");
  iv.lo = parse_bound(t.substr(1, comma - 1));
  iv.hi = parse_bound(t.substr(comma + 1, t.size() - comma - 2));
  iv.lo_closed = t.front() == '[' && std::isfinite(iv.lo);
  iv.hi_closed = t.back() == ']' && std::isfinite(iv.hi);
  if (!(iv.lo < iv.hi)) throw InputError(std::string(kModule), "empty interval '" + t + "'");
  return iv;
}

std::string Interval::str() const {
  return std::string(lo_closed ? "[" : "(") + csv::format_double(lo) + "," + csv::format_double(hi) +
         (hi_closed ? "]" : ")");
}

bool Stratum::contains(double value) const {
  if (const auto* level = std::get_if<std::size_t>(&rule)) return value == static_cast<double>(*level);
  return std::get<Interval>(rule).contains(value);
}

void CovariateSchema::add_covariate(Covariate c) {
  if (c.name.empty()) throw InputError(std::string(kModule), "covariate with empty name");
  if (find(c.name)) throw InputError(std::string(kModule), "duplicate covariate name '" + c.name + "'");
  std::set<std::string> seen;
  for (const auto& l : c.levels) {
    if (!seen.insert(l).second) {
      throw InputError(std::string(kModule), "duplicate level '" + l + "' in covariate '" + c.name + "'");
    }
  }
  if (c.kind == CovariateKind::binary) {
    if (c.levels.empty()) c.levels = {"0", "1"};
    if (c.levels.size() != 2) {
      throw InputError(std::string(kModule), "binary covariate '" + c.name + "' needs exactly two levels");
    }
  } else if (c.kind == CovariateKind::categorical && c.levels.size() < 2) {
    throw InputError(std::string(kModule), "categorical covariate '" + c.name + "' needs at least two levels");
  } else if (c.kind == CovariateKind::continuous && !c.levels.empty()) {
    throw InputError(std::string(kModule), "continuous covariate '" + c.name + "' cannot declare levels");
  }
  covariates_.push_back(std::move(c));
}

void CovariateSchema::set_strata(const std::string& trial, std::size_t covariate, std::vector<Stratum> strata) {
  if (covariate >= covariates_.size()) throw InputError(std::string(kModule), "strata for unknown covariate");
  std::set<std::string> labels;
  for (auto& s : strata) {
    s.covariate = covariate;
    if (!labels.insert(s.label).second) {
      throw InputError(std::string(kModule), "duplicate stratum label '" + s.label + "' for covariate '" +
                                                 covariates_[covariate].name + "'");
    }
  }
  strata_[{trial, covariate}] = std::move(strata);
}

std::optional<std::size_t> CovariateSchema::find(std::string_view name) const {
  for (std::size_t k = 0; k < covariates_.size(); ++k) {
    if (covariates_[k].name == name) return k;
  }
  return std::nullopt;
}

std::size_t CovariateSchema::index_of(std::string_view name) const {
  if (auto k = find(name)) return *k;
  throw InputError(std::string(kModule), "unknown covariate '" + std::string(name) + "'");
}

std::vector<Stratum> CovariateSchema::strata_for(std::string_view trial, std::size_t k) const {
  if (auto it = strata_.find({std::string(trial), k}); it != strata_.end()) return it->second;
  if (auto it = strata_.find({"*", k}); it != strata_.end()) return it->second;
  const Covariate& c = covariates_.at(k);
  std::vector<Stratum> out;
  for (std::size_t l = 0; l < c.levels.size(); ++l) out.push_back(Stratum{c.levels[l], k, l});
  return out;
}

std::pair<std::size_t, Stratum> CovariateSchema::resolve(std::string_view trial, std::size_t k,
                                                         std::string_view label) const {
  const auto strata = strata_for(trial, k);
  for (std::size_t l = 0; l < strata.size(); ++l) {
    if (strata[l].label == label) return {l + 1, strata[l]};
  }
  throw InputError(std::string(kModule), "unknown level '" + std::string(label) + "' of covariate '" +
                                             covariates_.at(k).name + "' for trial '" + std::string(trial) + "'");
}

double CovariateSchema::parse_value(std::size_t k, std::string_view text) const {
  const Covariate& c = covariates_.at(k);
  const std::string t = csv::trim(text);
  if (t.empty()) throw InputError(std::string(kModule), "missing value for covariate '" + c.name + "'");
  if (c.kind == CovariateKind::continuous) return csv::to_double(t, kModule, "value of '" + c.name + "'");
  if (auto idx = c.level_index(t)) return static_cast<double>(*idx);
  long code = -1;
  try {
    code = csv::to_long(t, kModule, "level");
  } catch (const InputError&) {
    code = -1;
  }
  if (code >= 0 && static_cast<std::size_t>(code) < c.levels.size()) return static_cast<double>(code);
  throw InputError(std::string(kModule), "level '" + t + "' is not declared for covariate '" + c.name + "'");
}

std::string CovariateSchema::format_value(std::size_t k, double value) const {
  const Covariate& c = covariates_.at(k);
  if (c.kind == CovariateKind::continuous) return csv::format_double(value);
  return c.levels.at(static_cast<std::size_t>(value));
}

// Schema text format:
//
//   [covariate lvef]
//   kind = continuous
//
//   [covariate prehhf]
//   kind = binary
//   levels = no, yes
//
//   [strata EMPEROR-Preserved lvef]
//   40-49 = [40,50)
//   >=60 = >=60
//
// Lines starting with '#' are comments. A strata entry is split at the first
// " = "; the right side is a level label for discrete covariates and an
// interval for continuous ones. Trial "*" declares the default strata.
CovariateSchema CovariateSchema::parse(std::string_view text) {
  CovariateSchema schema;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;

  enum class Section { none, covariate, strata } section = Section::none;
  std::optional<Covariate> pending;
  std::string strata_trial;
  std::size_t strata_cov = 0;
  std::vector<Stratum> strata;
  auto fail = [&](const std::string& msg) {
    throw InputError(std::string(kModule), "schema line " + std::to_string(lineno) + ": " + msg);
  };
  auto flush = [&] {
    if (section == Section::covariate && pending) schema.add_covariate(std::move(*pending));
    if (section == Section::strata) schema.set_strata(strata_trial, strata_cov, std::move(strata));
    pending.reset();
    strata.clear();
    section = Section::none;
  };

  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = csv::trim(line);
    if (t.empty() || t.front() == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') fail("unterminated section header");
      flush();
      std::istringstream hs(t.substr(1, t.size() - 2));
      std::string kind;
      hs >> kind;
      if (kind == "covariate") {
        std::string name;
        hs >> name;
        if (name.empty()) fail("covariate section without a name");
        pending = Covariate{name, CovariateKind::continuous, {}};
        section = Section::covariate;
      } else if (kind == "strata") {
        std::string cov;
        hs >> strata_trial >> cov;
        if (strata_trial.empty() || cov.empty()) fail("strata section needs a trial and a covariate");
        strata_cov = schema.index_of(cov);
        section = Section::strata;
      } else {
        fail("unknown section '" + kind + "'");
      }
      continue;
    }
    if (section == Section::covariate) {
      const auto eq = t.find('=');
      if (eq == std::string::npos) fail("expected key = value");
      const std::string key = csv::trim(t.substr(0, eq));
      const std::string value = csv::trim(t.substr(eq + 1));
      if (key == "kind") {
        const std::string v = lower(value);
        if (v == "binary") pending->kind = CovariateKind::binary;
        else if (v == "categorical") pending->kind = CovariateKind::categorical;
        else if (v == "continuous") pending->kind = CovariateKind::continuous;
        else fail("unknown covariate kind '" + value + "'");
      } else if (key == "levels") {
        pending->levels = csv::split(value, ',');
      } else {
        fail("unknown covariate key '" + key + "'");
      }
    } else if (section == Section::strata) {
      const auto eq = t.find(" = ");
      if (eq == std::string::npos) fail("expected 'label = rule'");
      Stratum s;
      s.label = csv::trim(t.substr(0, eq));
      s.covariate = strata_cov;
      const std::string rule = csv::trim(t.substr(eq + 3));
      const Covariate& c = schema.covariate(strata_cov);
      if (c.kind == CovariateKind::continuous) {
        s.rule = Interval::parse(rule);
      } else {
        const auto idx = c.level_index(rule);
        if (!idx) fail("unknown level '" + rule + "' of covariate '" + c.name + "'");
        s.rule = *idx;
      }
      strata.push_back(std::move(s));
    } else {
      fail("entry outside of any section");
    }
  }
  flush();
  if (schema.size() == 0) throw InputError(std::string(kModule), "schema declares no covariates");
  return schema;
}

CovariateSchema CovariateSchema::load(const std::filesystem::path& path) {
  return parse(csv::read_text(path, kModule));
}

std::string CovariateSchema::serialize() const {
  std::ostringstream out;
  for (const auto& c : covariates_) {
    out << "[covariate " << c.name << "]\n";
    out << "kind = " << to_string(c.kind) << "\n";
    if (!c.levels.empty()) {
      out << "levels = ";
      for (std::size_t i = 0; i < c.levels.size(); ++i) out << (i ? ", " : "") << c.levels[i];
      out << "\n";
    }
    out << "\n";
  }
  for (const auto& [key, strata] : strata_) {
    const Covariate& c = covariates_.at(key.second);
    out << "[strata " << key.first << " " << c.name << "]\n";
    for (const auto& s : strata) {
      out << s.label << " = ";
      if (const auto* level = std::get_if<std::size_t>(&s.rule)) out << c.levels.at(*level);
      else out << std::get<Interval>(s.rule).str();
      out << "\n";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace agt
