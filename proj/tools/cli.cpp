#include "cli.hpp"

#include "agt/csv.hpp"
#include "agt/estimands.hpp"
#include "agt/pipeline.hpp"
#include "agt/simulate.hpp"
#include "agt/synthpop.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

namespace agt::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kModule = "cli";

[[noreturn]] void fail(const std::string& message) { throw InputError(kModule, message); }

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw NumericalError(kModule, "SHA-256 digest failed");
  }
  std::ostringstream hex;
  hex << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) hex << std::setw(2) << static_cast<int>(digest[i]);
  return hex.str();
}

/// A file read once: its bytes are hashed and parsed from the same buffer.
struct Input {
  std::string role;
  fs::path path;
  std::string text;
  std::string sha256;
};

Input read_input(std::string role, const fs::path& path) {
  Input in;
  in.role = std::move(role);
  in.text = csv::read_text(path, kModule);
  in.path = fs::weakly_canonical(fs::absolute(path));
  in.sha256 = sha256_hex(in.text);
  return in;
}

json input_record(const Input& in) { return {{"role", in.role}, {"path", in.path.string()}, {"sha256", in.sha256}}; }

json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(to_json(Vector(m.row(i).transpose())));
  return rows;
}

Vector vector_from(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

Matrix matrix_from(const json& j) {
  const auto n = static_cast<Eigen::Index>(j.size());
  if (n == 0) return Matrix(0, 0);
  Matrix m(n, static_cast<Eigen::Index>(j[0].size()));
  for (Eigen::Index i = 0; i < n; ++i) m.row(i) = vector_from(j[static_cast<std::size_t>(i)]).transpose();
  return m;
}

/// Writes the files of one run and a manifest.json describing them.
class OutputSet {
 public:
  void add(std::string name, std::string content) { files_.emplace_back(std::move(name), std::move(content)); }

  void write(const fs::path& dir, const std::string& command, const std::vector<std::string>& args,
             std::optional<std::uint64_t> seed, const std::vector<Input>& inputs) const {
    fs::create_directories(dir);
    json manifest{{"tool", "agt"},       {"version", AGT_VERSION}, {"command", command},
                  {"arguments", args},   {"seed", nullptr},        {"inputs", json::array()},
                  {"outputs", json::array()}};
    if (seed) manifest["seed"] = *seed;
    for (const auto& in : inputs) manifest["inputs"].push_back(input_record(in));
    for (const auto& [name, content] : files_) {
      std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
      if (!out) fail("cannot write '" + (dir / name).string() + "'");
      out << content;
      manifest["outputs"].push_back({{"path", name}, {"sha256", sha256_hex(content)}, {"bytes", content.size()}});
    }
    std::ofstream(dir / "manifest.json", std::ios::binary | std::ios::trunc) << manifest.dump(2) << '\n';
  }

 private:
  std::vector<std::pair<std::string, std::string>> files_;
};

// ---------------------------------------------------------------------------
// Settings bound to the command line
// ---------------------------------------------------------------------------

struct DataSource {
  fs::path dir, effects, moments, schema, followup;
  std::vector<std::string> trials;
};

struct SampleSource {
  fs::path csv, copula;
  bool given() const { return !csv.empty() || !copula.empty(); }
};

struct Settings {
  std::optional<std::uint64_t> seed;
  fs::path out = ".";

  DataSource data;
  SampleSource target, base;
  unsigned threads = 1;

  std::string formula;
  std::string scale = "additive";
  std::string strata = "none";
  std::string weighting = "inverse-se2";
  double tolerance = 1e-12;
  int max_iterations = 500;
  int multistarts = 5;
  bool dry_run = false;
  bool base_exact = false;

  fs::path fit, fit1, fit2;
  std::vector<std::string> subgroups;
  std::size_t stratum = 0;

  fs::path spec, synth_schema;
  std::optional<std::size_t> n;

  std::string scenario_set = "5trial";
  std::vector<int> scenarios;
  std::size_t reps = 300;
  unsigned jobs = 1;
  std::vector<std::string> methods;
  fs::path catalog = fs::path(AGT_DATA_DIR) / "scenarios" / "catalog.json";
};

void add_data_options(CLI::App* sub, DataSource& d) {
  sub->add_option("--data-dir", d.dir, "Directory holding effects.csv, moments.csv and schema.txt");
  sub->add_option("--effects", d.effects, "Effect estimates CSV (overrides --data-dir)");
  sub->add_option("--moments", d.moments, "Covariate moment summaries CSV (overrides --data-dir)");
  sub->add_option("--schema", d.schema, "Covariate schema file (overrides --data-dir)");
  sub->add_option("--followup", d.followup, "Follow-up times CSV with columns trial,time");
  sub->add_option("--trials", d.trials, "Comma-separated trial ids to keep (default: all)")->delimiter(',');
}

void add_sample_options(CLI::App* sub, SampleSource& target, SampleSource& base, unsigned& threads) {
  sub->add_option("--target", target.csv, "Target covariate sample CSV (optional Y column)");
  sub->add_option("--target-copula", target.copula, "Copula spec generating the target sample");
  sub->add_option("--base", base.csv, "Base covariate sample CSV for tilting (default: the target sample)");
  sub->add_option("--base-copula", base.copula, "Copula spec generating the base sample");
  sub->add_option("--threads", threads, "Worker threads for copula sampling")->check(CLI::PositiveNumber);
}

struct Tool {
  Settings s;
  CLI::App app{"Transport treatment effects from aggregate trial data to a target population", "agt"};
  CLI::App* fit = nullptr;
  CLI::App* transport = nullptr;
  CLI::App* indirect = nullptr;
  CLI::App* synth = nullptr;
  CLI::App* simulate = nullptr;
  CLI::App* validate = nullptr;

  Tool() {
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "TOML or INI file with option values; [fit]-style sections for subcommands")
        ->envname("AGT_CONFIG");
    app.add_option("--seed", s.seed, "Random seed; overrides the seeds recorded in copula specs")
        ->envname("AGT_SEED");
    app.add_option("--out", s.out, "Output directory")->capture_default_str()->envname("AGT_OUT");

    fit = app.add_subcommand("fit", "Fit a CATE model to aggregate trial effects");
    add_data_options(fit, s.data);
    add_sample_options(fit, s.target, s.base, s.threads);
    fit->add_option("--formula", s.formula, "CATE basis, e.g. '~ 1 + lvef + prehhf' (default: all main effects)");
    fit->add_option("--scale", s.scale, "Effect scale")->check(CLI::IsMember({"additive", "relative"}));
    fit->add_option("--time-strata", s.strata, "Follow-up time stratification")
        ->check(CLI::IsMember({"none", "partial", "full"}));
    fit->add_option("--weighting", s.weighting, "GMM weighting: identity, inverse-se2 or two-step");
    fit->add_option("--tolerance", s.tolerance, "Relative objective change for iterative convergence");
    fit->add_option("--max-iterations", s.max_iterations, "Iteration cap of the iterative solver");
    fit->add_option("--multistarts", s.multistarts, "Random restarts of the iterative solver");
    fit->add_flag("--base-exact", s.base_exact, "Ignore sampling variation of the base sample in the variance");
    fit->add_flag("--dry-run", s.dry_run, "Print problem dimensions and stop");

    transport = app.add_subcommand("transport", "Target-population ATEs from a saved fit");
    transport->add_option("--fit", s.fit, "fit.json written by the fit subcommand")->required();
    transport->add_option("--subgroups", s.subgroups, "Subgroup filter such as 'lvef<=40,diabetes=yes'; repeatable")
        ->allow_extra_args(false);
    transport->add_option("--stratum", s.stratum, "Time stratum to evaluate (0-based)");
    transport->add_option("--target", s.target.csv, "Target sample CSV (default: the target recorded in the fit)");
    transport->add_option("--target-copula", s.target.copula, "Copula spec generating the target sample");
    transport->add_option("--threads", s.threads, "Worker threads for copula sampling")->check(CLI::PositiveNumber);

    indirect = app.add_subcommand("indirect", "Indirect comparison of two fits on disjoint trial sets");
    indirect->add_option("--fit1", s.fit1, "fit.json of the reference comparison")->required();
    indirect->add_option("--fit2", s.fit2, "fit.json of the second comparison")->required();
    indirect->add_option("--stratum", s.stratum, "Time stratum to evaluate (0-based)");
    indirect->add_option("--target", s.target.csv, "Target sample CSV (default: the target recorded in --fit1)");
    indirect->add_option("--target-copula", s.target.copula, "Copula spec generating the target sample");
    indirect->add_option("--threads", s.threads, "Worker threads for copula sampling")->check(CLI::PositiveNumber);

    synth = app.add_subcommand("synth", "Generate a synthetic covariate sample from a copula spec");
    synth->add_option("--spec", s.spec, "Copula spec file")->required();
    synth->add_option("--n", s.n, "Number of rows (overrides the copula spec)");
    synth->add_option("--schema", s.synth_schema, "Schema fixing column order and level labels");
    synth->add_option("--threads", s.threads, "Worker threads")->check(CLI::PositiveNumber);

    simulate = app.add_subcommand("simulate", "Monte Carlo comparison of estimators over scenarios");
    simulate->add_option("--scenario-set", s.scenario_set, "Scenario set: 5trial, 1trial or all");
    simulate->add_option("--scenarios", s.scenarios, "Comma-separated scenario ids within the set")->delimiter(',');
    simulate->add_option("--reps", s.reps, "Replications per scenario");
    simulate->add_option("--jobs", s.jobs, "Worker threads")->check(CLI::PositiveNumber);
    simulate->add_option("--methods", s.methods, "Comma-separated methods: cima, meta, metareg, ipd")->delimiter(',');
    simulate->add_option("--catalog", s.catalog, "Scenario catalog JSON");
    simulate->add_option("--weighting", s.weighting, "GMM weighting used by the CATE-transport estimator");

    validate = app.add_subcommand("validate", "Check inputs and tilting feasibility without fitting");
    add_data_options(validate, s.data);
    add_sample_options(validate, s.target, s.base, s.threads);
  }
};

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

struct LoadedData {
  MetaDataset dataset;
  std::string schema_text;
  std::vector<Input> inputs;
};

fs::path resolve(const fs::path& explicit_path, const fs::path& dir, const char* file, const char* flag) {
  if (!explicit_path.empty()) return explicit_path;
  if (dir.empty()) fail(std::string(flag) + " or --data-dir is required");
  return dir / file;
}

LoadedData load_data(const DataSource& d) {
  LoadedData out;
  const Input effects = read_input("effects", resolve(d.effects, d.dir, "effects.csv", "--effects"));
  const Input moments = read_input("moments", resolve(d.moments, d.dir, "moments.csv", "--moments"));
  const Input schema = read_input("schema", resolve(d.schema, d.dir, "schema.txt", "--schema"));
  out.schema_text = schema.text;
  out.dataset = parse_meta_dataset(effects.text, moments.text, CovariateSchema::parse(schema.text));
  out.inputs = {effects, moments, schema};
  if (!d.followup.empty()) {
    const Input followup = read_input("followup", d.followup);
    attach_followups(out.dataset, followup.text);
    out.inputs.push_back(followup);
  }
  if (!d.trials.empty()) {
    if (std::set<std::string>(d.trials.begin(), d.trials.end()).size() != d.trials.size()) {
      fail("--trials lists a trial twice");
    }
    out.dataset = out.dataset.subset(d.trials);
  }
  return out;
}

struct LoadedSample {
  CovariateSample sample;
  json record;
  std::vector<Input> inputs;
};

LoadedSample sample_from_copula(const Input& in, const CovariateSchema& schema, SampleRole role,
                                std::optional<std::uint64_t> seed, unsigned threads) {
  CopulaSpec spec = CopulaSpec::parse(in.text);
  if (seed) spec.seed = *seed;
  LoadedSample out{sample(spec, schema, role, threads), json::object(), {in}};
  out.record = {{"kind", "copula"}, {"path", in.path.string()}, {"seed", spec.seed}, {"n", spec.n}};
  return out;
}

LoadedSample load_sample(const SampleSource& src, const std::string& role_name, const CovariateSchema& schema,
                         SampleRole role, std::optional<std::uint64_t> seed, unsigned threads) {
  if (!src.csv.empty() && !src.copula.empty()) {
    fail("give either a " + role_name + " CSV or a " + role_name + " copula spec, not both");
  }
  if (!src.csv.empty()) {
    const Input in = read_input(role_name, src.csv);
    LoadedSample out{parse_covariate_sample(in.text, schema, role), json::object(), {in}};
    out.record = {{"kind", "csv"}, {"path", in.path.string()}};
    return out;
  }
  if (!src.copula.empty()) {
    return sample_from_copula(read_input(role_name, src.copula), schema, role, seed, threads);
  }
  fail("a " + role_name + " sample is required: pass --" + role_name + " or --" + role_name + "-copula");
}

/// Rebuild a sample from the record a fit wrote. Inputs were already checked
/// against their digests, so the result matches the sample used at fit time.
LoadedSample sample_from_record(const json& record, const CovariateSchema& schema, unsigned threads) {
  const fs::path path = record.at("path").get<std::string>();
  if (record.at("kind") == "csv") {
    const Input in = read_input("target", path);
    return {parse_covariate_sample(in.text, schema, SampleRole::target), record, {in}};
  }
  return sample_from_copula(read_input("target", path), schema, SampleRole::target,
                            record.at("seed").get<std::uint64_t>(), threads);
}

std::map<std::string, double> followups_of(const MetaDataset& dataset) {
  std::map<std::string, double> out;
  for (const auto& t : dataset.trials()) {
    if (t.followup) out[t.id] = *t.followup;
  }
  return out;
}

TimeStratification parse_strata(std::string_view text) {
  if (text == "none") return TimeStratification::none;
  if (text == "partial") return TimeStratification::partial;
  if (text == "full") return TimeStratification::full;
  fail("unknown time stratification '" + std::string(text) + "'");
}

CateScale parse_scale(std::string_view text) {
  if (text == "additive") return CateScale::additive;
  if (text == "relative") return CateScale::relative;
  fail("unknown scale '" + std::string(text) + "'");
}

CateBasis build_model(const std::string& formula, CateScale scale, TimeStratification strata,
                      const CovariateSchema& schema, const std::map<std::string, double>& followups,
                      const std::vector<std::string>& trials) {
  CateBasis basis = formula.empty() ? CateBasis::default_for(schema, scale) : CateBasis::parse(formula, schema, scale);
  if (strata == TimeStratification::none) return basis;
  for (const auto& id : trials) {
    if (!followups.count(id)) fail("time stratification needs a follow-up time for trial '" + id + "' (--followup)");
  }
  return build_time_stratified(basis, followups, strata);
}

void print_warnings(std::ostream& err, const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) err << "warning: " << w << '\n';
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// Saved fits
// ---------------------------------------------------------------------------

struct SavedFit {
  json doc;
  Input file;
  CovariateSchema schema;
  CateFit fit;
};

SavedFit load_fit(const fs::path& path) {
  SavedFit saved;
  saved.file = read_input("fit", path);
  saved.doc = json::parse(saved.file.text);

  const fs::path manifest = saved.file.path.parent_path() / "manifest.json";
  if (fs::exists(manifest)) {
    const json m = json::parse(csv::read_text(manifest, kModule));
    for (const auto& o : m.value("outputs", json::array())) {
      if (o.at("path") == saved.file.path.filename().string() && o.at("sha256") != saved.file.sha256) {
        fail("stale fit: '" + saved.file.path.string() + "' was modified after it was written; rerun fit");
      }
    }
  }
  for (const auto& in : saved.doc.at("inputs")) {
    const fs::path p = in.at("path").get<std::string>();
    std::ifstream probe(p, std::ios::binary);
    if (!probe) fail("stale fit: input '" + p.string() + "' no longer exists; rerun fit");
    std::ostringstream bytes;
    bytes << probe.rdbuf();
    if (sha256_hex(bytes.str()) != in.at("sha256")) {
      fail("stale fit: input '" + p.string() + "' changed since the fit was written; rerun fit");
    }
  }

  const json& d = saved.doc;
  saved.schema = CovariateSchema::parse(d.at("schema_text").get<std::string>());
  const auto trials = d.at("trials").get<std::vector<std::string>>();
  const CateBasis basis = build_model(d.at("formula").get<std::string>(), parse_scale(d.at("scale").get<std::string>()),
                                      parse_strata(d.at("time_strata").get<std::string>()), saved.schema,
                                      d.at("followups").get<std::map<std::string, double>>(), trials);
  CateFit& f = saved.fit;
  f.model = std::make_shared<CateBasis>(basis);
  f.trials = trials;
  f.theta = vector_from(d.at("theta"));
  f.parameter_names = basis.parameter_names();
  f.V_theta = matrix_from(d.at("V_theta"));
  f.n_total = d.at("n_total").get<double>();
  f.weighting = parse_weighting(d.at("weighting").get<std::string>());
  if (f.theta.size() != static_cast<Eigen::Index>(basis.dim()) || f.V_theta.rows() != f.theta.size()) {
    fail("fit '" + saved.file.path.string() + "' has inconsistent dimensions");
  }
  return saved;
}

json results_json(const std::vector<TransportResult>& results) {
  json out = json::array();
  for (const auto& r : results) {
    out.push_back({{"label", r.label},
                   {"estimate", r.psi_hat},
                   {"se", r.se},
                   {"ci", {r.ci.lo, r.ci.hi}},
                   {"n_effective", r.n_effective},
                   {"var_target", r.var_target},
                   {"var_theta", r.var_theta}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

std::string fit_report(const json& doc, const CateFit& f, bool with_warnings) {
  std::ostringstream s;
  s << "CATE fit: " << doc.at("formula_described").get<std::string>() << " (" << doc.at("scale").get<std::string>()
    << " scale, " << to_string(f.weighting) << " weighting)\n";
  s << "trials: " << f.trials.size() << ", moments J = " << doc["dimensions"]["J"] << ", parameters d = "
    << doc["dimensions"]["d"] << ", n = " << fixed(f.n_total, 0) << "\n\n";
  std::size_t width = 9;
  for (const auto& name : f.parameter_names) width = std::max(width, name.size());
  s << std::left << std::setw(static_cast<int>(width)) << "parameter" << std::right << std::setw(12) << "estimate"
    << std::setw(12) << "se" << std::setw(12) << "ci_lo" << std::setw(12) << "ci_hi" << '\n';
  const Vector se = f.standard_errors();
  for (Eigen::Index i = 0; i < f.theta.size(); ++i) {
    const Interval95 ci = wald_interval(f.theta(i), se(i));
    s << std::left << std::setw(static_cast<int>(width)) << f.parameter_names[static_cast<std::size_t>(i)]
      << std::right << std::setw(12) << fixed(f.theta(i), 5) << std::setw(12) << fixed(se(i), 5) << std::setw(12)
      << fixed(ci.lo, 5) << std::setw(12) << fixed(ci.hi, 5) << '\n';
  }
  s << "\nobjective " << f.objective << ", first-order norm " << f.foc_norm;
  if (f.j_statistic) s << ", J statistic " << fixed(*f.j_statistic, 3) << " on " << f.degrees_of_freedom << " df";
  s << '\n';
  if (with_warnings) {
    for (const auto& w : doc.at("warnings")) s << "warning: " << w.get<std::string>() << '\n';
  }
  return s.str();
}

int cmd_fit(const Settings& s, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  LoadedData data = load_data(s.data);
  const MetaDataset& dataset = data.dataset;
  const CovariateSchema& schema = dataset.schema();
  const CateScale scale = parse_scale(s.scale);
  const auto followups = followups_of(dataset);
  std::vector<std::string> trial_ids;
  for (const auto& t : dataset.trials()) trial_ids.push_back(t.id);
  const CateBasis model = build_model(s.formula, scale, parse_strata(s.strata), schema, followups, trial_ids);

  const LoadedSample target = load_sample(s.target, "target", schema, SampleRole::target, s.seed, s.threads);
  std::optional<LoadedSample> base;
  if (s.base.given()) {
    const auto base_seed = s.seed ? std::optional(derive_seed(*s.seed, 1)) : std::nullopt;
    base = load_sample(s.base, "base", schema, SampleRole::base, base_seed, s.threads);
  }
  const CovariateSample base_sample = base ? base->sample : target.sample.with_role(SampleRole::base);

  if (s.dry_run) {
    out << "trials = " << dataset.trial_count() << '\n'
        << "J = " << dataset.moment_count() << '\n'
        << "d = " << model.dim() << '\n'
        << "n_q = " << base_sample.rows() << '\n'
        << "n_0 = " << target.sample.rows() << '\n';
    if (dataset.moment_count() < model.dim()) err << "warning: fewer moments than parameters\n";
    return 0;
  }

  PipelineOptions options;
  options.fit.weighting = parse_weighting(s.weighting);
  options.fit.tolerance = s.tolerance;
  options.fit.max_iterations = s.max_iterations;
  options.fit.multistarts = s.multistarts;
  options.fit.seed = s.seed.value_or(1);
  options.variance.treat_q_exact = s.base_exact;
  if (scale == CateScale::relative) options.baseline = fit_baseline(target.sample, schema);

  const PipelineResult result =
      run_pipeline(dataset, base_sample, model, options, static_cast<double>(target.sample.rows()));
  const CateFit& f = result.fit;

  std::vector<Input> inputs = data.inputs;
  inputs.insert(inputs.end(), target.inputs.begin(), target.inputs.end());
  if (base) inputs.insert(inputs.end(), base->inputs.begin(), base->inputs.end());

  json doc;
  doc["formula"] = s.formula;
  doc["formula_described"] = model.describe();
  doc["scale"] = s.scale;
  doc["time_strata"] = s.strata;
  doc["followups"] = followups;
  doc["schema_text"] = data.schema_text;
  doc["inputs"] = json::array();
  for (const auto& in : inputs) doc["inputs"].push_back(input_record(in));
  doc["target"] = target.record;
  doc["base"] = base ? base->record : json{{"kind", "target"}};
  doc["dimensions"] = {{"J", dataset.moment_count()},
                       {"d", model.dim()},
                       {"n_q", base_sample.rows()},
                       {"n_0", target.sample.rows()}};
  const Vector se = f.standard_errors();
  doc["parameters"] = json::array();
  for (Eigen::Index i = 0; i < f.theta.size(); ++i) {
    doc["parameters"].push_back(
        {{"name", f.parameter_names[static_cast<std::size_t>(i)]}, {"estimate", f.theta(i)}, {"se", se(i)}});
  }
  doc["theta"] = to_json(f.theta);
  doc["V_theta"] = to_json(f.V_theta);
  doc["n_total"] = f.n_total;
  doc["weighting"] = to_string(f.weighting);
  doc["trials"] = f.trials;

  json tilts = json::array();
  for (const auto& t : result.tilts) {
    tilts.push_back({{"trial", t.trial}, {"iterations", t.iterations}, {"residual", t.residual_norm}});
  }
  doc["diagnostics"] = {{"objective", f.objective},
                        {"foc_norm", f.foc_norm},
                        {"j_statistic", f.j_statistic ? json(*f.j_statistic) : json(nullptr)},
                        {"df", f.degrees_of_freedom},
                        {"singular_values", to_json(f.singular_values)},
                        {"residuals", to_json(f.residuals)},
                        {"iterations", f.iterations},
                        {"closed_form", f.closed_form},
                        {"tilts", tilts},
                        {"variance_share_base", result.variance.share_q},
                        {"variance_share_trials", result.variance.share_s},
                        {"psd_repair", result.variance.psd_repair}};
  std::vector<std::string> warnings = dataset.warnings();
  warnings.insert(warnings.end(), result.warnings.begin(), result.warnings.end());
  doc["warnings"] = warnings;

  OutputSet files;
  files.add("fit.json", doc.dump(2) + "\n");
  files.add("fit.txt", fit_report(doc, f, true));
  files.write(s.out, "fit", args, s.seed, inputs);
  out << fit_report(doc, f, false);
  print_warnings(err, warnings);
  return 0;
}

int cmd_transport(const Settings& s, const std::vector<std::string>& args, std::ostream& out) {
  const SavedFit saved = load_fit(s.fit);
  const LoadedSample target = s.target.given()
                                  ? load_sample(s.target, "target", saved.schema, SampleRole::target, s.seed, s.threads)
                                  : sample_from_record(saved.doc.at("target"), saved.schema, s.threads);
  TransportOptions options;
  options.stratum = s.stratum;

  std::vector<TransportResult> results;
  if (saved.fit.model->scale() == CateScale::relative) {
    const BaselineFn baseline = fit_baseline(target.sample, saved.schema);
    results.push_back(transport_relative(saved.fit, target.sample, saved.schema, baseline, options));
    for (const auto& text : s.subgroups) {
      const SubgroupFilter filter = SubgroupFilter::parse(text, saved.schema);
      const CovariateSample sub = target.sample.filter(filter.mask(target.sample));
      if (sub.rows() == 0) fail("subgroup '" + text + "' has no target rows");
      TransportOptions o = options;
      o.label = filter.describe();
      results.push_back(transport_relative(saved.fit, sub, saved.schema, baseline, o));
    }
  } else {
    results.push_back(transport_ate(saved.fit, target.sample, options));
    for (const auto& text : s.subgroups) {
      results.push_back(subgroup_ate(saved.fit, target.sample, SubgroupFilter::parse(text, saved.schema), options));
    }
  }

  std::vector<Input> inputs{saved.file};
  inputs.insert(inputs.end(), target.inputs.begin(), target.inputs.end());
  const std::string table = results_csv(results);
  OutputSet files;
  files.add("results.csv", table);
  files.add("results.json", results_json(results).dump(2) + "\n");
  files.write(s.out, "transport", args, s.seed, inputs);
  out << table;
  return 0;
}

int cmd_indirect(const Settings& s, const std::vector<std::string>& args, std::ostream& out) {
  const SavedFit first = load_fit(s.fit1);
  const SavedFit second = load_fit(s.fit2);
  if (first.fit.model->scale() != second.fit.model->scale()) fail("the two fits use different effect scales");
  if (first.schema.covariates() != second.schema.covariates()) fail("the two fits use different covariates");
  const LoadedSample target = s.target.given()
                                  ? load_sample(s.target, "target", first.schema, SampleRole::target, s.seed, s.threads)
                                  : sample_from_record(first.doc.at("target"), first.schema, s.threads);
  TransportOptions options;
  options.stratum = s.stratum;
  const std::vector<TransportResult> results{indirect_comparison(first.fit, second.fit, target.sample, options)};

  std::vector<Input> inputs{first.file, second.file};
  inputs.insert(inputs.end(), target.inputs.begin(), target.inputs.end());
  const std::string table = results_csv(results);
  OutputSet files;
  files.add("results.csv", table);
  files.add("results.json", results_json(results).dump(2) + "\n");
  files.write(s.out, "indirect", args, s.seed, inputs);
  out << table;
  return 0;
}

CovariateSchema schema_from_spec(const CopulaSpec& spec) {
  CovariateSchema schema;
  for (const auto& m : spec.marginals) {
    Covariate c{m.name, CovariateKind::continuous, {}};
    if (m.kind == MarginalSpec::Kind::bernoulli) {
      c.kind = CovariateKind::binary;
      c.levels = {"0", "1"};
    } else if (m.kind == MarginalSpec::Kind::categorical) {
      c.kind = CovariateKind::categorical;
      for (std::size_t l = 0; l < m.probs.size(); ++l) c.levels.push_back(std::to_string(l));
    }
    schema.add_covariate(std::move(c));
  }
  return schema;
}

int cmd_synth(const Settings& s, const std::vector<std::string>& args, std::ostream& out) {
  const Input spec_file = read_input("spec", s.spec);
  CopulaSpec spec = CopulaSpec::parse(spec_file.text);
  if (s.seed) spec.seed = *s.seed;
  if (s.n) spec.n = *s.n;
  std::vector<Input> inputs{spec_file};
  CovariateSchema schema;
  if (!s.synth_schema.empty()) {
    inputs.push_back(read_input("schema", s.synth_schema));
    schema = CovariateSchema::parse(inputs.back().text);
  } else {
    schema = schema_from_spec(spec);
  }
  const CovariateSample draw = sample(spec, schema, SampleRole::target, s.threads);

  OutputSet files;
  files.add("sample.csv", serialize_covariate_sample(draw, schema));
  files.add("spec.txt", spec.serialize());
  files.write(s.out, "synth", args, spec.seed, inputs);
  out << "wrote " << draw.rows() << " rows to " << (s.out / "sample.csv").string() << " (seed " << spec.seed << ")\n";
  return 0;
}

int cmd_simulate(const Settings& s, const std::vector<std::string>& args, std::ostream& out) {
  const Input catalog_file = read_input("catalog", s.catalog);
  std::vector<sim::Scenario> scenarios = sim::select_set(sim::parse_catalog(catalog_file.text), s.scenario_set);
  if (!s.scenarios.empty()) {
    std::vector<sim::Scenario> chosen;
    for (int id : s.scenarios) {
      const auto it = std::find_if(scenarios.begin(), scenarios.end(), [&](const auto& sc) { return sc.id == id; });
      if (it == scenarios.end()) fail("no scenario " + std::to_string(id) + " in set '" + s.scenario_set + "'");
      chosen.push_back(*it);
    }
    scenarios = std::move(chosen);
  }
  sim::StudyOptions options;
  options.replications = s.reps;
  options.jobs = s.jobs;
  options.seed = s.seed.value_or(42);
  options.weighting = parse_weighting(s.weighting);
  if (!s.methods.empty()) {
    options.methods.clear();
    for (const auto& m : s.methods) options.methods.push_back(sim::parse_method(m));
  }
  const std::string table = sim::metrics_csv(sim::run_study(scenarios, options));

  OutputSet files;
  files.add("metrics.csv", table);
  files.write(s.out, "simulate", args, options.seed, {catalog_file});
  out << table;
  return 0;
}

int cmd_validate(const Settings& s, std::ostream& out, std::ostream& err) {
  const LoadedData data = load_data(s.data);
  const MetaDataset& dataset = data.dataset;
  out << "trials: " << dataset.trial_count() << '\n' << "moments: " << dataset.moment_count() << '\n';
  for (const auto& t : dataset.trials()) {
    out << "  " << t.id << ": n = " << fixed(t.n, 0) << ", effects = " << t.effect_count()
        << ", covariate summaries = " << t.moments.size();
    if (t.followup) out << ", follow-up = " << *t.followup;
    out << '\n';
  }
  print_warnings(err, dataset.warnings());
  if (!s.target.given() && !s.base.given()) return 0;

  const SampleSource& src = s.base.given() ? s.base : s.target;
  const LoadedSample base = load_sample(src, s.base.given() ? "base" : "target", dataset.schema(), SampleRole::base,
                                        s.seed, s.threads);
  try {
    const auto tilts = solve_tilts(dataset, base.sample);
    double worst = 0.0;
    for (const auto& t : tilts) worst = std::max(worst, t.residual_norm);
    out << "tilting: feasible (max standardized residual " << worst << ")\n";
  } catch (const InfeasibleMoments& e) {
    out << "tilting: infeasible\n";
    for (const auto& h : e.hull()) {
      if (!h.inside) {
        out << "  " << h.moment << ": target " << h.target << " outside base range [" << h.base_min << ", "
            << h.base_max << "]\n";
      }
    }
    throw;
  }
  return 0;
}

int dispatch(const Tool& tool, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Settings& s = tool.s;
  if (tool.fit->parsed()) return cmd_fit(s, args, out, err);
  if (tool.transport->parsed()) return cmd_transport(s, args, out);
  if (tool.indirect->parsed()) return cmd_indirect(s, args, out);
  if (tool.synth->parsed()) return cmd_synth(s, args, out);
  if (tool.simulate->parsed()) return cmd_simulate(s, args, out);
  return cmd_validate(s, out, err);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Tool tool;
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    tool.app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      tool.app.exit(e, out, err);
      return 0;
    }
    err << "[" << kModule << "] " << e.what() << "\nRun with --help for more information.\n";
    return 2;
  }
  try {
    return dispatch(tool, args, out, err);
  } catch (const InputError& e) {
    err << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    err << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "[" << kModule << "] " << e.what() << '\n';
    return 2;
  } catch (const json::exception& e) {
    err << "[" << kModule << "] malformed JSON: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "[" << kModule << "] " << e.what() << '\n';
    return 1;
  }
}

std::vector<OptionDoc> option_inventory() {
  Tool tool;
  std::vector<OptionDoc> docs;
  auto collect = [&](const CLI::App* app, const std::string& command) {
    for (const CLI::Option* o : app->get_options()) {
      docs.push_back({command, o->get_name(), o->get_description()});
    }
  };
  collect(&tool.app, "");
  for (const CLI::App* sub : tool.app.get_subcommands({})) collect(sub, sub->get_name());
  return docs;
}

std::string help_text(std::string_view command) {
  Tool tool;
  if (command.empty()) return tool.app.help();
  return tool.app.get_subcommand(std::string(command))->help();
}

}  // namespace agt::cli
