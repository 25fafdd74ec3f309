#include "agt/aggdata.hpp"
#include "agt/csv.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

namespace agt {

namespace {

constexpr std::string_view kModule = "aggdata";

[[noreturn]] void fail(const std::string& msg) { throw InputError(std::string(kModule), msg); }

std::string field(const csv::Table& t, std::size_t row, std::optional<std::size_t> col) {
  if (!col) return {};
  return t.rows[row][*col];
}

std::string where(const csv::Table& t, std::size_t row) { return "line " + std::to_string(t.line_numbers[row]); }

}  // namespace

RiskDifference risk_difference_from_counts(long events1, long n1, long events0, long n0) {
  if (n1 < 1 || n0 < 1) fail("invalid counts: arm sizes must be at least 1");
  if (events1 < 0 || events1 > n1 || events0 < 0 || events0 > n0) {
    fail("invalid counts: events must lie between 0 and the arm size");
  }
  const double p1 = static_cast<double>(events1) / static_cast<double>(n1);
  const double p0 = static_cast<double>(events0) / static_cast<double>(n0);
  const double var = p1 * (1.0 - p1) / static_cast<double>(n1) + p0 * (1.0 - p0) / static_cast<double>(n0);
  return {p1 - p0, std::sqrt(var)};
}

std::string MomentSpec::describe(const CovariateSchema& schema) const {
  const Covariate& c = schema.covariate(covariate);
  switch (kind) {
    case MomentKind::mean: return "mean(" + c.name + ")";
    case MomentKind::proportion: return "P(" + c.name + "=" + c.levels.at(level) + ")";
    case MomentKind::second_moment: return "E[" + c.name + "^2]";
  }
  return c.name;
}

std::vector<MomentSpec> Trial::moment_specs() const {
  std::vector<MomentSpec> out;
  out.reserve(moments.size());
  for (const auto& m : moments) out.push_back(m.spec);
  return out;
}

Vector Trial::moment_targets_plus() const {
  Vector mu(static_cast<Eigen::Index>(moments.size() + 1));
  mu(0) = 1.0;
  for (std::size_t r = 0; r < moments.size(); ++r) mu(static_cast<Eigen::Index>(r + 1)) = moments[r].value;
  return mu;
}

MetaDataset::MetaDataset(CovariateSchema schema, std::vector<Trial> trials)
    : schema_(std::move(schema)), trials_(std::move(trials)) {
  for (auto& t : trials_) {
    std::stable_sort(t.effects.begin(), t.effects.end(), [](const EffectEstimate& a, const EffectEstimate& b) {
      return std::pair(a.covariate, a.level) < std::pair(b.covariate, b.level);
    });
  }
  validate();
}

void MetaDataset::validate() const {
  if (trials_.empty()) fail("dataset contains no trials");
  std::set<std::string> ids;
  for (const auto& t : trials_) {
    if (!ids.insert(t.id).second) fail("duplicate trial id '" + t.id + "'");
    if (t.effects.empty() || !t.effects.front().is_marginal()) fail("trial has no marginal effect: '" + t.id + "'");
    if (!(t.n > 0.0)) fail("trial '" + t.id + "' has no positive sample size");
    std::set<std::pair<std::size_t, std::size_t>> keys;
    for (const auto& e : t.effects) {
      if (!keys.insert({e.covariate, e.level}).second) {
        fail("duplicate effect row for trial '" + t.id + "' (" + std::to_string(e.covariate) + ", " +
             std::to_string(e.level) + ")");
      }
      if ((e.covariate == 0) != (e.level == 0)) fail("effect row mixes marginal and subgroup indices");
      if (e.covariate > schema_.size()) fail("effect row references an unknown covariate");
      if (!std::isfinite(e.estimate) || !std::isfinite(e.se) || e.se < 0.0) {
        fail("effect for trial '" + t.id + "' has an invalid estimate or standard error");
      }
      if (e.se == 0.0) {
        const bool degenerate = e.counts && (e.counts->events1 == 0 || e.counts->events1 == e.counts->n1) &&
                                (e.counts->events0 == 0 || e.counts->events0 == e.counts->n0);
        if (!degenerate) fail("effect for trial '" + t.id + "' has zero standard error without degenerate counts");
      }
    }
    std::map<std::size_t, double> means;
    std::set<std::tuple<int, std::size_t, std::size_t>> specs;
    for (const auto& m : t.moments) {
      if (m.spec.covariate >= schema_.size()) fail("moment references an unknown covariate");
      if (!specs.insert({static_cast<int>(m.spec.kind), m.spec.covariate, m.spec.level}).second) {
        fail("duplicate moment for trial '" + t.id + "'");
      }
      if (!std::isfinite(m.value)) fail("non-finite moment value for trial '" + t.id + "'");
      if (m.spec.kind == MomentKind::proportion && (m.value < 0.0 || m.value > 1.0)) {
        fail("proportion " + csv::format_double(m.value) + " for trial '" + t.id + "' is outside [0, 1]");
      }
      if (m.spec.kind == MomentKind::mean) means[m.spec.covariate] = m.value;
    }
    for (const auto& m : t.moments) {
      if (m.spec.kind != MomentKind::second_moment) continue;
      if (auto it = means.find(m.spec.covariate); it != means.end()) {
        const double mean2 = it->second * it->second;
        if (m.value < mean2 - 1e-9 * std::max(1.0, mean2)) {
          fail("second moment below squared mean for trial '" + t.id + "'");
        }
      }
    }
  }
}

const Trial& MetaDataset::trial(std::string_view id) const {
  if (auto i = trial_index(id)) return trials_[*i];
  fail("unknown trial '" + std::string(id) + "'");
}

std::optional<std::size_t> MetaDataset::trial_index(std::string_view id) const {
  for (std::size_t s = 0; s < trials_.size(); ++s) {
    if (trials_[s].id == id) return s;
  }
  return std::nullopt;
}

std::size_t MetaDataset::moment_count() const {
  std::size_t j = 0;
  for (const auto& t : trials_) j += t.effects.size();
  return j;
}

Vector MetaDataset::stacked_estimates() const {
  Vector v(static_cast<Eigen::Index>(moment_count()));
  Eigen::Index j = 0;
  for (const auto& t : trials_)
    for (const auto& e : t.effects) v(j++) = e.estimate;
  return v;
}

Vector MetaDataset::stacked_standard_errors() const {
  Vector v(static_cast<Eigen::Index>(moment_count()));
  Eigen::Index j = 0;
  for (const auto& t : trials_)
    for (const auto& e : t.effects) v(j++) = e.se;
  return v;
}

MetaDataset MetaDataset::subset(const std::vector<std::string>& ids) const {
  std::vector<Trial> chosen;
  for (const auto& id : ids) chosen.push_back(trial(id));
  MetaDataset out(schema_, std::move(chosen));
  out.warnings_ = warnings_;
  return out;
}

MetaDataset parse_meta_dataset(std::string_view effects_csv, std::string_view moments_csv, CovariateSchema schema) {
  std::vector<Trial> trials;
  std::map<std::string, std::size_t> index;
  std::vector<std::string> warnings;
  auto trial_for = [&](const std::string& id) -> Trial& {
    auto [it, inserted] = index.emplace(id, trials.size());
    if (inserted) trials.push_back(Trial{id, {}, {}, 0.0, std::nullopt});
    return trials[it->second];
  };

  if (!csv::trim(effects_csv).empty()) {
    const csv::Table t = csv::parse(effects_csv, kModule);
    const std::size_t c_trial = t.require_column("trial", kModule);
    const std::size_t c_cov = t.require_column("covariate", kModule);
    const std::size_t c_level = t.require_column("level", kModule);
    const auto c_est = t.column("estimate");
    const auto c_se = t.column("se");
    const auto c_e1 = t.column("events1");
    const auto c_n1 = t.column("n1");
    const auto c_e0 = t.column("events0");
    const auto c_n0 = t.column("n0");
    for (const auto& h : t.header) {
      static const std::set<std::string> known{"trial", "covariate", "level", "estimate", "se",
                                               "events1", "n1", "events0", "n0"};
      if (!known.contains(h)) fail("unknown effects column '" + h + "'");
    }

    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const std::string id = t.rows[r][c_trial];
      if (id.empty()) fail("effects " + where(t, r) + ": empty trial id");
      EffectEstimate e;
      e.trial = id;
      const std::string cov = t.rows[r][c_cov];
      const std::string level = t.rows[r][c_level];
      if (cov.empty()) {
        if (!level.empty()) fail("effects " + where(t, r) + ": level given without covariate");
      } else {
        const std::size_t k = schema.index_of(cov);
        const auto [l, stratum] = schema.resolve(id, k, level);
        e.covariate = k + 1;
        e.level = l;
        e.stratum_label = stratum.label;
      }

      const std::string est = field(t, r, c_est);
      const std::string se = field(t, r, c_se);
      const std::string e1 = field(t, r, c_e1), n1 = field(t, r, c_n1);
      const std::string e0 = field(t, r, c_e0), n0 = field(t, r, c_n0);
      const bool any_counts = !e1.empty() || !n1.empty() || !e0.empty() || !n0.empty();
      if (any_counts) {
        if (e1.empty() || n1.empty() || e0.empty() || n0.empty()) fail("effects " + where(t, r) + ": partial counts");
        e.counts = ArmCounts{csv::to_long(e1, kModule, "events1"), csv::to_long(n1, kModule, "n1"),
                             csv::to_long(e0, kModule, "events0"), csv::to_long(n0, kModule, "n0")};
      }
      if (est.empty() != se.empty()) fail("effects " + where(t, r) + ": estimate and se must be given together");
      if (!est.empty()) {
        e.estimate = csv::to_double(est, kModule, "estimate");
        e.se = csv::to_double(se, kModule, "se");
        if (e.counts) {
          const auto rd = risk_difference_from_counts(e.counts->events1, e.counts->n1, e.counts->events0, e.counts->n0);
          const double unit_est = std::pow(10.0, -csv::decimals(est));
          const double unit_se = std::pow(10.0, -csv::decimals(se));
          if (std::abs(rd.estimate - e.estimate) > 2.0 * unit_est || std::abs(rd.se - e.se) > 2.0 * unit_se) {
            warnings.push_back("effects " + where(t, r) + ": reported estimate/se disagree with counts for trial '" +
                               id + "'");
          }
        }
      } else if (e.counts) {
        const auto rd = risk_difference_from_counts(e.counts->events1, e.counts->n1, e.counts->events0, e.counts->n0);
        e.estimate = rd.estimate;
        e.se = rd.se;
      } else {
        fail("effects " + where(t, r) + ": neither estimate/se nor counts given");
      }

      Trial& trial = trial_for(id);
      for (const auto& prev : trial.effects) {
        if (prev.covariate == e.covariate && prev.level == e.level) {
          fail("duplicate effect row for trial '" + id + "' at " + where(t, r));
        }
      }
      trial.effects.push_back(std::move(e));
    }
  }

  if (!csv::trim(moments_csv).empty()) {
    const csv::Table t = csv::parse(moments_csv, kModule);
    const std::size_t c_trial = t.require_column("trial", kModule);
    const std::size_t c_cov = t.require_column("covariate", kModule);
    const std::size_t c_stat = t.require_column("statistic", kModule);
    const std::size_t c_value = t.require_column("value", kModule);
    const std::size_t c_n = t.require_column("n", kModule);

    struct PendingSd {
      std::size_t trial;
      std::size_t position;
      double sd;
    };
    std::vector<PendingSd> sds;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const auto& row = t.rows[r];
      const std::string id = row[c_trial];
      if (id.empty()) fail("moments " + where(t, r) + ": empty trial id");
      const std::string stat = row[c_stat];
      const double value = csv::to_double(row[c_value], kModule, "moment value");
      const double n = csv::to_double(row[c_n], kModule, "n");
      if (!(n >= 1.0)) fail("moments " + where(t, r) + ": n must be positive");

      std::string cov = row[c_cov];
      std::string level;
      if (const auto eq = cov.find('='); eq != std::string::npos) {
        level = csv::trim(cov.substr(eq + 1));
        cov = csv::trim(cov.substr(0, eq));
      }
      const std::size_t k = schema.index_of(cov);
      const Covariate& c = schema.covariate(k);

      MomentSummary m;
      m.trial = id;
      m.value = value;
      m.n = n;
      m.spec.covariate = k;
      if (stat == "mean" || stat == "sd" || stat == "second_moment") {
        if (!level.empty()) fail("moments " + where(t, r) + ": level given for a '" + stat + "' row");
        if (c.kind == CovariateKind::categorical) fail("moments " + where(t, r) + ": '" + stat + "' of a categorical");
        m.spec.kind = stat == "mean" ? MomentKind::mean : MomentKind::second_moment;
        m.spec.level = 0;
      } else if (stat == "proportion") {
        if (c.kind == CovariateKind::continuous) fail("moments " + where(t, r) + ": proportion of a continuous");
        m.spec.kind = MomentKind::proportion;
        if (level.empty()) {
          if (c.kind != CovariateKind::binary) fail("moments " + where(t, r) + ": categorical proportion needs cov=level");
          m.spec.level = 1;
        } else {
          const auto idx = c.level_index(level);
          if (!idx) fail("moments " + where(t, r) + ": unknown level '" + level + "' of '" + c.name + "'");
          m.spec.level = *idx;
        }
      } else {
        fail("moments " + where(t, r) + ": unknown statistic '" + stat + "'");
      }

      Trial& trial = trial_for(id);
      if (trial.n == 0.0) trial.n = n;
      else if (trial.n != n) fail("moments " + where(t, r) + ": inconsistent n for trial '" + id + "'");
      if (stat == "sd") {
        if (value < 0.0) fail("moments " + where(t, r) + ": negative sd");
        sds.push_back({index.at(id), trial.moments.size(), value});
      }
      trial.moments.push_back(std::move(m));
    }
    for (const auto& p : sds) {
      Trial& trial = trials[p.trial];
      MomentSummary& m = trial.moments[p.position];
      const auto mean = std::find_if(trial.moments.begin(), trial.moments.end(), [&](const MomentSummary& o) {
        return o.spec.kind == MomentKind::mean && o.spec.covariate == m.spec.covariate;
      });
      if (mean == trial.moments.end()) {
        fail("sd for '" + schema.covariate(m.spec.covariate).name + "' in trial '" + trial.id + "' has no mean row");
      }
      m.reported_sd = p.sd;
      m.value = second_moment_from_sd(mean->value, p.sd, m.n);
    }
  }

  for (auto& trial : trials) {
    if (trial.n == 0.0 && !trial.effects.empty() && trial.effects.front().counts) {
      const auto& c = *trial.effects.front().counts;
      trial.n = static_cast<double>(c.n1 + c.n0);
    }
  }
  for (const auto& trial : trials) {
    const bool has_marginal = std::any_of(trial.effects.begin(), trial.effects.end(),
                                          [](const EffectEstimate& e) { return e.is_marginal(); });
    if (!has_marginal) fail("trial has no marginal effect: '" + trial.id + "'");
  }
  if (trials.empty()) fail("trial has no marginal effect: effects input is empty");

  MetaDataset ds(std::move(schema), std::move(trials));
  for (auto& w : warnings) ds.add_warning(std::move(w));
  return ds;
}

MetaDataset load_meta_dataset(const std::filesystem::path& effects_path, const std::filesystem::path& moments_path,
                              const std::filesystem::path& schema_path) {
  CovariateSchema schema = CovariateSchema::load(schema_path);
  return parse_meta_dataset(csv::read_text(effects_path, kModule), csv::read_text(moments_path, kModule),
                            std::move(schema));
}

void attach_followups(MetaDataset& dataset, std::string_view followup_csv) {
  const csv::Table t = csv::parse(followup_csv, kModule);
  const std::size_t c_trial = t.require_column("trial", kModule);
  const std::size_t c_time = t.require_column("time", kModule);
  std::vector<Trial> trials = dataset.trials();
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string id = t.rows[r][c_trial];
    const auto s = dataset.trial_index(id);
    if (!s) fail("follow-up for unknown trial '" + id + "'");
    trials[*s].followup = csv::to_double(t.rows[r][c_time], kModule, "follow-up time");
  }
  MetaDataset updated(dataset.schema(), std::move(trials));
  for (const auto& w : dataset.warnings()) updated.add_warning(w);
  dataset = std::move(updated);
}

std::string serialize_effects(const MetaDataset& dataset) {
  std::ostringstream out;
  out << "trial,covariate,level,estimate,se,events1,n1,events0,n0\n";
  const auto& schema = dataset.schema();
  for (const auto& t : dataset.trials()) {
    for (const auto& e : t.effects) {
      out << csv::escape(t.id) << ",";
      if (!e.is_marginal()) {
        out << csv::escape(schema.covariate(e.covariate - 1).name) << "," << csv::escape(e.stratum_label);
      } else {
        out << ",";
      }
      out << "," << csv::format_double(e.estimate) << "," << csv::format_double(e.se);
      if (e.counts) {
        out << "," << e.counts->events1 << "," << e.counts->n1 << "," << e.counts->events0 << "," << e.counts->n0;
      } else {
        out << ",,,,";
      }
      out << "\n";
    }
  }
  return out.str();
}

std::string serialize_moments(const MetaDataset& dataset) {
  std::ostringstream out;
  out << "trial,covariate,statistic,value,n\n";
  const auto& schema = dataset.schema();
  for (const auto& t : dataset.trials()) {
    for (const auto& m : t.moments) {
      const Covariate& c = schema.covariate(m.spec.covariate);
      out << csv::escape(t.id) << ",";
      switch (m.spec.kind) {
        case MomentKind::mean:
          out << csv::escape(c.name) << ",mean," << csv::format_double(m.value);
          break;
        case MomentKind::proportion:
          if (c.kind == CovariateKind::binary && m.spec.level == 1) out << csv::escape(c.name);
          else out << csv::escape(c.name + "=" + c.levels.at(m.spec.level));
          out << ",proportion," << csv::format_double(m.value);
          break;
        case MomentKind::second_moment:
          if (m.reported_sd) out << csv::escape(c.name) << ",sd," << csv::format_double(*m.reported_sd);
          else out << csv::escape(c.name) << ",second_moment," << csv::format_double(m.value);
          break;
      }
      out << "," << csv::format_double(m.n) << "\n";
    }
  }
  return out.str();
}

}  // namespace agt
