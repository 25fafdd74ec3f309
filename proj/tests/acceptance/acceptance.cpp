// Acceptance gate. Prints one PASS/FAIL line per criterion (AC1 to AC10)
// after the supporting detail, and exits nonzero when any criterion fails.

#include "agt/estimands.hpp"
#include "agt/pipeline.hpp"
#include "agt/simulate.hpp"
#include "agt/synthpop.hpp"
#include "cli.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <thread>

using namespace agt;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string summary;
};

std::string num(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << v;
  return s.str();
}

const std::string kApp = std::string(AGT_DATA_DIR) + "/application";

// ---------------------------------------------------------------------------
// AC1: risk differences from the published event counts
// ---------------------------------------------------------------------------

struct CountRow {
  const char* label;
  long e1, n1, e0, n0;
  double estimate, se;
};

// Event counts with the published risk difference and SE, three decimals.
const CountRow kTable1[] = {
    {"EMPEROR-Preserved overall", 415, 2997, 511, 2991, -0.032, 0.009},
    {"EMPEROR-Preserved LVEF 40-49", 145, 995, 193, 988, -0.050, 0.017},
    {"EMPEROR-Preserved LVEF 50-59", 138, 1028, 173, 1030, -0.034, 0.016},
    {"EMPEROR-Preserved LVEF >=60", 132, 974, 145, 973, -0.014, 0.016},
    {"EMPEROR-Preserved preHHF yes", 157, 699, 192, 670, -0.062, 0.023},
    {"EMPEROR-Preserved preHHF no", 258, 2298, 319, 2321, -0.025, 0.009},
    {"EMPEROR-Preserved diabetes yes", 239, 1466, 291, 1472, -0.035, 0.014},
    {"EMPEROR-Preserved diabetes no", 176, 1531, 220, 1519, -0.030, 0.012},
    {"DELIVER overall", 475, 3131, 577, 3132, -0.033, 0.009},
    {"DELIVER LVEF 40-49", 193, 1067, 220, 1049, -0.029, 0.017},
    {"DELIVER LVEF 50-59", 161, 1133, 196, 1123, -0.032, 0.015},
    {"DELIVER LVEF >=60", 121, 931, 161, 960, -0.038, 0.016},
    {"DELIVER preHHF yes", 184, 829, 230, 805, -0.064, 0.021},
    {"DELIVER preHHF no", 291, 2302, 347, 2327, -0.023, 0.010},
    {"DELIVER diabetes yes", 248, 1401, 298, 1405, -0.035, 0.015},
    {"DELIVER diabetes no", 227, 1730, 279, 1727, -0.030, 0.012},
    {"DAPA-HF overall", 382, 2373, 495, 2371, -0.048, 0.011},
    {"DAPA-HF preHHF yes", 117, 638, 181, 663, -0.089, 0.023},
    {"DAPA-HF preHHF no", 265, 1735, 314, 1708, -0.031, 0.013},
    {"DAPA-HF diabetes yes", 213, 1075, 268, 1064, -0.054, 0.018},
    {"DAPA-HF diabetes no", 169, 1298, 227, 1307, -0.043, 0.014},
    {"EMPEROR-Reduced overall", 361, 1863, 462, 1867, -0.054, 0.014},
    {"EMPEROR-Reduced preHHF yes", 153, 577, 177, 574, -0.043, 0.027},
    {"EMPEROR-Reduced preHHF no", 208, 1286, 285, 1293, -0.058, 0.015},
    {"EMPEROR-Reduced diabetes yes", 200, 927, 265, 929, -0.070, 0.020},
    {"EMPEROR-Reduced diabetes no", 161, 936, 197, 938, -0.038, 0.018},
};

double round3(double v) { return std::round(v * 1000.0) / 1000.0; }
double trunc3(double v) { return std::trunc(v * 1000.0) / 1000.0; }

Verdict ac1() {
  int matched = 0, by_truncation = 0, cells = 0;
  for (const auto& r : kTable1) {
    const RiskDifference rd = risk_difference_from_counts(r.e1, r.n1, r.e0, r.n0);
    for (auto [computed, published, what] :
         {std::tuple{rd.estimate, r.estimate, "estimate"}, std::tuple{rd.se, r.se, "se"}}) {
      ++cells;
      const bool rounded = std::abs(round3(computed) - published) <= 0.0005 + 1e-12;
      const bool truncated = std::abs(trunc3(computed) - published) <= 0.0005 + 1e-12;
      if (rounded || truncated) ++matched;
      if (!rounded && truncated) {
        ++by_truncation;
        std::cout << "  AC1 " << r.label << " " << what << ": computed " << num(computed, 5)
                  << " matches published " << num(published, 3) << " by truncation\n";
      }
      if (!rounded && !truncated) {
        std::cout << "  AC1 MISMATCH " << r.label << " " << what << ": computed " << num(computed, 5)
                  << ", published " << num(published, 3) << "\n";
      }
    }
  }
  return {matched == cells, std::to_string(matched) + "/" + std::to_string(cells) +
                                " cells reproduced to 3 dp (" + std::to_string(by_truncation) +
                                " only under truncation)"};
}

// ---------------------------------------------------------------------------
// AC2: tilting exactness and infeasibility detection
// ---------------------------------------------------------------------------

Verdict ac2() {
  std::mt19937_64 rng(2024);
  int feasible_ok = 0;
  double worst_residual = 0.0, worst_mean = 0.0;
  for (int c = 0; c < 50; ++c) {
    const auto base = oracle::random_mixed_sample(10000, 3, 3, rng);
    std::vector<MomentSpec> candidates;
    for (std::size_t k = 0; k < 3; ++k) candidates.push_back({MomentKind::proportion, k, 1});
    for (std::size_t k = 3; k < 6; ++k) {
      candidates.push_back({MomentKind::mean, k, 0});
      candidates.push_back({MomentKind::second_moment, k, 0});
    }
    std::shuffle(candidates.begin(), candidates.end(), rng);
    const std::size_t R = 1 + static_cast<std::size_t>(c % 6);
    const std::vector<MomentSpec> specs(candidates.begin(), candidates.begin() + static_cast<long>(R));

    const Matrix h = moment_design(base, specs);
    std::normal_distribution<double> z(0.0, 0.4);
    Vector eta(h.cols());
    for (Eigen::Index r = 0; r < eta.size(); ++r) eta(r) = z(rng) / std::max(1.0, h.col(r).cwiseAbs().mean());
    Vector w = (h * eta).array().exp();
    w /= w.mean();
    const Vector mu = h.transpose() * w / static_cast<double>(h.rows());

    const TiltFit fit = solve_tilt(base, specs, mu);
    const double residual = fit.raw_residual.cwiseAbs().maxCoeff();
    const double mean_dev = std::abs(fit.weights.mean() - 1.0);
    worst_residual = std::max(worst_residual, residual);
    worst_mean = std::max(worst_mean, mean_dev);
    if (residual <= 1e-9 && mean_dev <= 1e-10) ++feasible_ok;
  }

  // Infeasible constructions.
  const auto column_sample = [](std::vector<std::vector<double>> cols) {
    RowMatrix x(static_cast<Eigen::Index>(cols[0].size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k)
      for (std::size_t i = 0; i < cols[k].size(); ++i) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = cols[k][i];
    return CovariateSample(std::move(x), SampleRole::base);
  };
  const auto targets = [](std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size() + 1));
    out(0) = 1.0;
    Eigen::Index i = 1;
    for (double x : v) out(i++) = x;
    return out;
  };
  std::vector<double> bin(2000), bin2(2000), cont(2000), cat(2000), implied(2000);
  {
    std::mt19937_64 g(99);
    std::normal_distribution<double> n01;
    std::bernoulli_distribution coin(0.4);
    std::uniform_int_distribution<int> level(0, 2);
    for (std::size_t i = 0; i < bin.size(); ++i) {
      bin[i] = coin(g);
      bin2[i] = coin(g);
      cont[i] = n01(g);
      cat[i] = level(g);
      implied[i] = std::max(bin[i], bin2[i]);  // bin = 1 implies implied = 1
    }
  }
  const double cmax = *std::max_element(cont.begin(), cont.end());
  const double cmin = *std::min_element(cont.begin(), cont.end());
  const MomentSpec p0{MomentKind::proportion, 0, 1}, p1{MomentKind::proportion, 1, 1};
  const MomentSpec m1{MomentKind::mean, 1, 0}, s1{MomentKind::second_moment, 1, 0};
  struct Case {
    const char* name;
    CovariateSample base;
    std::vector<MomentSpec> specs;
    Vector mu;
  };
  const std::vector<Case> cases{
      {"proportion at one", column_sample({bin}), {p0}, targets({1.0})},
      {"negative proportion", column_sample({bin}), {p0}, targets({-0.05})},
      {"mean above the sample maximum", column_sample({bin, cont}), {p0, m1}, targets({0.4, cmax + 0.1})},
      {"mean below the sample minimum", column_sample({bin, cont}), {p0, m1}, targets({0.4, cmin - 0.1})},
      {"mean at the sample maximum", column_sample({bin, cont}), {m1}, targets({cmax})},
      {"second moment below squared mean", column_sample({bin, cont}), {m1, s1}, targets({1.0, 0.5})},
      {"second moment above its maximum", column_sample({bin, cont}), {m1, s1}, targets({0.0, cmax * cmax + cmin * cmin + 1.0})},
      {"duplicated binary with inconsistent targets", column_sample({bin, bin}), {p0, p1}, targets({0.3, 0.6})},
      {"categorical level shares above one", column_sample({bin, cat}),
       {MomentSpec{MomentKind::proportion, 1, 1}, MomentSpec{MomentKind::proportion, 1, 2}}, targets({0.6, 0.6})},
      {"implication violated", column_sample({bin, implied}), {p0, p1}, targets({0.7, 0.4})},
  };
  int infeasible_ok = 0;
  for (const auto& c : cases) {
    try {
      solve_tilt(c.base, c.specs, c.mu);
      std::cout << "  AC2 infeasible case not detected: " << c.name << "\n";
    } catch (const InfeasibleMoments&) {
      ++infeasible_ok;
    } catch (const std::exception& e) {
      std::cout << "  AC2 infeasible case raised a different error: " << c.name << ": " << e.what() << "\n";
    }
  }
  std::cout << "  AC2 worst residual " << sci(worst_residual) << ", worst |mean w - 1| " << sci(worst_mean) << "\n";
  return {feasible_ok == 50 && infeasible_ok == 10,
          std::to_string(feasible_ok) + "/50 feasible cases exact (max residual " + sci(worst_residual) +
              "), " + std::to_string(infeasible_ok) + "/10 infeasible cases reported"};
}

// ---------------------------------------------------------------------------
// AC3: enumeration oracle recovers theta_0
// ---------------------------------------------------------------------------

struct System {
  std::vector<TiltFit> tilts;
  std::shared_ptr<MomentSystem> system;
  std::vector<TrialCovariance> covs;
  SampleSizes sizes;
};

System build_system(const MetaDataset& ds, const CovariateSample& base, const CateModel& model) {
  System s;
  s.tilts = solve_tilts(ds, base);
  s.system = std::make_shared<MomentSystem>(ds, base, evaluate_representers(s.tilts, base, ds), model);
  s.covs = approximate_covariances(ds, s.tilts, base);
  s.sizes = SampleSizes::from(ds, base);
  return s;
}

Verdict ac3() {
  const auto world = oracle::make_discrete_world(3, 21);
  struct Setup {
    const char* name;
    std::function<double(Row)> truth;
    std::string formula;
    Vector theta0;
    oracle::Reporting reporting;
  };
  Vector over(5), just(3);
  over << -0.05, 0.03, -0.02, 0.04, -0.015;
  just << -0.04, 0.05, -0.02;
  const std::vector<Setup> setups{
      {"overidentified", [&](Row r) {
         return over(0) + over(1) * r[0] + over(2) * (r[1] == 1.0) + over(3) * (r[1] == 2.0) + over(4) * r[2];
       }, "~ 1 + x1 + x2 + x3", over, oracle::Reporting::with_subgroups},
      {"just-identified", [&](Row r) { return just(0) + just(1) * r[0] + just(2) * r[2]; }, "~ 1 + x1 + x3", just,
       oracle::Reporting::marginal_only},
  };
  bool ok = true;
  double worst = 0.0;
  for (const auto& setup : setups) {
    const MetaDataset ds = oracle::enumerate_dataset(world, setup.truth, setup.reporting);
    const CateBasis basis = CateBasis::parse(setup.formula, world.schema);
    const System s = build_system(ds, world.grid, basis);
    for (Weighting w : {Weighting::identity, Weighting::inverse_se2, Weighting::two_step}) {
      FitOptions opt;
      opt.weighting = w;
      opt.n_total = s.sizes.total();
      const CateFit f = fit(*s.system, opt, make_omega_fn(*s.system, s.tilts, s.covs, s.sizes));
      const double err = (f.theta - setup.theta0).cwiseAbs().maxCoeff();
      worst = std::max(worst, err);
      std::cout << "  AC3 " << setup.name << " (J = " << s.system->moments() << ", d = " << s.system->dim() << ") "
                << to_string(w) << ": max |theta - theta_0| " << sci(err) << "\n";
      ok = ok && err <= 1e-6;
    }
  }
  return {ok, "max |theta_hat - theta_0| = " + sci(worst) + " over 2 designs x 3 weightings"};
}

// ---------------------------------------------------------------------------
// AC4: Jacobian blocks against central finite differences
// ---------------------------------------------------------------------------

double block_error(const Matrix& analytic, const Matrix& fd) {
  const double scale = std::max(1e-12, fd.cwiseAbs().maxCoeff());
  return (analytic - fd).cwiseAbs().maxCoeff() / scale;
}

// Central differences with one Richardson step, for maps that go through an
// iterative solve and need a step well above the solver tolerance.
Matrix richardson_difference(const std::function<Vector(const Vector&)>& f, const Vector& x, double h) {
  return (4.0 * oracle::finite_difference(f, x, h / 2.0) - oracle::finite_difference(f, x, h)) / 3.0;
}

MetaDataset with_estimates(const MetaDataset& ds, const Vector& tau) {
  std::vector<Trial> trials = ds.trials();
  Eigen::Index j = 0;
  for (auto& t : trials)
    for (auto& e : t.effects) e.estimate = tau(j++);
  return MetaDataset(ds.schema(), std::move(trials));
}

Verdict ac4() {
  double worst = 0.0;
  int passed = 0;
  for (int c = 0; c < 20; ++c) {
    const auto world = oracle::make_discrete_world(3, 100 + static_cast<std::uint64_t>(c));
    std::mt19937_64 rng(500 + static_cast<std::uint64_t>(c));
    std::normal_distribution<double> z(0.0, 0.2);
    const auto truth = [](Row r) { return -0.05 + 0.03 * r[0] - 0.02 * (r[1] == 2.0) + 0.01 * r[2]; };
    const MetaDataset ds = oracle::enumerate_dataset(world, truth, oracle::Reporting::with_subgroups);

    // Base: the grid itself, or a resample of it.
    CovariateSample base = world.grid;
    if (c % 2 == 1) {
      std::uniform_int_distribution<std::size_t> pick(0, world.grid.rows() - 1);
      RowMatrix x(300, 3);
      for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) = world.grid.values().row(static_cast<Eigen::Index>(pick(rng)));
      base = CovariateSample(std::move(x), SampleRole::base);
    }
    std::unique_ptr<CateModel> model;
    std::string kind;
    switch (c % 3) {
      case 0: model = CateBasis::parse("~ 1 + x1 + x2 + x3", world.schema).clone(); kind = "additive"; break;
      case 1: model = CateBasis::parse("~ x1 + x3", world.schema, CateScale::relative).clone(); kind = "relative"; break;
      default: model = std::make_unique<ExpitContrastModel>(CateBasis::parse("~ x1 + x3", world.schema)); kind = "expit"; break;
    }
    Vector theta(static_cast<Eigen::Index>(model->dim()));
    for (Eigen::Index k = 0; k < theta.size(); ++k) theta(k) = z(rng);

    const System s = build_system(ds, base, *model);
    const Matrix W = ds.stacked_standard_errors().array().square().inverse().matrix().asDiagonal();
    const JacobianSet jac = compute_jacobians(*s.system, theta, W, s.tilts);
    double err = 0.0;
    std::string worst_block;
    const auto note = [&](const std::string& block, double e) {
      if (e > err) {
        err = e;
        worst_block = block;
      }
    };
    note("J_m_theta", block_error(jac.J_m_theta, oracle::finite_difference(
                                                     [&](const Vector& t) { return s.system->stack(t); }, theta)));

    const Matrix& J = jac.J_m_theta;
    const Matrix theta_m = -(J.transpose() * W * J).inverse() * J.transpose() * W;
    note("J_theta_m", block_error(jac.J_theta_m, theta_m));
    if (kind == "additive") {
      // Closed-form refits as a function of the reported effects: d theta_hat / d tau = -J^theta_m.
      const auto refit = [&](const Vector& tau) {
        const MetaDataset moved = with_estimates(ds, tau);
        const MomentSystem sys(moved, base, evaluate_representers(s.tilts, base, moved), *model);
        return fit(sys).theta;
      };
      note("J_theta_m refit", block_error(-jac.J_theta_m, richardson_difference(refit, ds.stacked_estimates(), 1e-4)));
    }
    for (std::size_t t = 0; t < ds.trial_count(); ++t) {
      const auto [first, count] = s.system->trial_block(t);
      Matrix expected = Matrix::Zero(static_cast<Eigen::Index>(s.system->moments()), static_cast<Eigen::Index>(count));
      expected.block(static_cast<Eigen::Index>(first), 0, static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(count)) =
          -Matrix::Identity(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(count));
      const std::string tag = " trial " + std::to_string(t + 1);
      note("J_m_tau" + tag, block_error(jac.J_m_tau[t], expected));

      const auto moved_stack = [&](const Vector& eta) {
        auto tilts = s.tilts;
        tilts[t] = tilts[t].with_eta(eta);
        return MomentSystem(ds, base, evaluate_representers(tilts, base, ds), *model).stack(theta);
      };
      note("J_m_eta" + tag, block_error(jac.J_m_eta[t], oracle::finite_difference(moved_stack, s.tilts[t].eta)));

      TiltOptions tight;
      tight.tolerance = 1e-13;
      const auto eta_of_mu = [&](const Vector& mu) { return solve_tilt(base, s.tilts[t].specs, mu, tight).eta; };
      note("J_eta_mu" + tag, block_error(-jac.J_eta_mu[t], richardson_difference(eta_of_mu, s.tilts[t].mu_plus, 1e-4)));
      note("A" + tag, block_error(jac.A[t], jac.J_m_eta[t] * jac.J_eta_mu[t]));
    }
    worst = std::max(worst, err);
    if (err <= 1e-5) ++passed;
    else std::cout << "  AC4 configuration " << c << " (" << kind << "): relative error " << sci(err) << " in "
                   << worst_block << "\n";
  }
  return {passed == 20, std::to_string(passed) + "/20 configurations within 1e-5 (worst block error " + sci(worst) + ")"};
}

// ---------------------------------------------------------------------------
// AC5: variance calibration by Monte Carlo
// ---------------------------------------------------------------------------

Verdict ac5() {
  const auto world = oracle::make_discrete_world(3, 61);
  const CateBasis basis = CateBasis::parse("~ x1 + x3", world.schema);
  const auto g = [](Row r) { return -0.3 + 0.4 * r[0] - 0.2 * r[2]; };
  const std::size_t n_s = 1500, n_0 = 2000;
  const int reps = 500;
  std::mt19937_64 rng(20240601);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<std::size_t> pick(0, world.grid.rows() - 1);

  double psi_true = 0.0;
  for (std::size_t i = 0; i < world.grid.rows(); ++i) psi_true += g(world.grid.row(i));
  psi_true /= static_cast<double>(world.grid.rows());

  std::vector<Vector> thetas;
  std::vector<double> psis;
  Matrix var_theta_sum = Matrix::Zero(3, 3);
  double var_psi_sum = 0.0;
  int covered = 0;
  for (int r = 0; r < reps; ++r) {
    std::vector<Trial> trials;
    for (std::size_t s = 0; s < 3; ++s) {
      const Vector& p = world.trial_probs[s];
      std::discrete_distribution<std::size_t> draw(p.data(), p.data() + p.size());
      std::vector<std::size_t> rows(n_s);
      std::vector<int> arm(n_s);
      std::vector<double> y(n_s);
      for (std::size_t i = 0; i < n_s; ++i) {
        rows[i] = draw(rng);
        arm[i] = coin(rng) ? 1 : 0;
        const Row x = world.grid.row(rows[i]);
        y[i] = 0.5 * x[2] + 0.3 * x[0] + arm[i] * g(x) + noise(rng);
      }
      Trial t;
      t.id = world.trial_ids[s];
      t.n = static_cast<double>(n_s);
      const auto diff = [&](const std::function<bool(Row)>& in, std::size_t cov, std::size_t level,
                            std::string label) {
        double s1 = 0, s0 = 0, q1 = 0, q0 = 0, c1 = 0, c0 = 0;
        for (std::size_t i = 0; i < n_s; ++i) {
          if (!in(world.grid.row(rows[i]))) continue;
          if (arm[i] == 1) {
            s1 += y[i]; q1 += y[i] * y[i]; ++c1;
          } else {
            s0 += y[i]; q0 += y[i] * y[i]; ++c0;
          }
        }
        const double mean1 = s1 / c1, mean0 = s0 / c0;
        const double v1 = (q1 - c1 * mean1 * mean1) / (c1 - 1), v0 = (q0 - c0 * mean0 * mean0) / (c0 - 1);
        EffectEstimate e;
        e.trial = t.id;
        e.covariate = cov;
        e.level = level;
        e.stratum_label = std::move(label);
        e.estimate = mean1 - mean0;
        e.se = std::sqrt(v1 / c1 + v0 / c0);
        return e;
      };
      t.effects.push_back(diff([](Row) { return true; }, 0, 0, ""));
      for (std::size_t k = 0; k < world.schema.size(); ++k) {
        const auto strata = world.schema.strata_for(t.id, k);
        for (std::size_t l = 0; l < strata.size(); ++l) {
          const Stratum st = strata[l];
          t.effects.push_back(diff([st](Row x) { return st.contains_row(x); }, k + 1, l + 1, st.label));
        }
      }
      for (const auto& spec : world.specs) {
        MomentSummary m;
        m.trial = t.id;
        m.spec = spec;
        m.n = static_cast<double>(n_s);
        for (std::size_t i : rows) m.value += spec.evaluate(world.grid.row(i));
        m.value /= static_cast<double>(n_s);
        t.moments.push_back(m);
      }
      trials.push_back(std::move(t));
    }
    const MetaDataset ds(world.schema, std::move(trials));

    RowMatrix tx(static_cast<Eigen::Index>(n_0), 3);
    for (Eigen::Index i = 0; i < tx.rows(); ++i) tx.row(i) = world.grid.values().row(static_cast<Eigen::Index>(pick(rng)));
    const CovariateSample target(std::move(tx), SampleRole::target);

    PipelineOptions options;
    options.variance.treat_q_exact = true;  // the grid is the exact base law
    const PipelineResult p = run_pipeline(ds, world.grid, basis, options, static_cast<double>(n_0));
    const TransportResult psi = transport_ate(p.fit, target);
    thetas.push_back(p.fit.theta);
    psis.push_back(psi.psi_hat);
    var_theta_sum += p.variance.var_theta;
    var_psi_sum += psi.se * psi.se;
    if (psi.ci.lo <= psi_true && psi_true <= psi.ci.hi) ++covered;
  }

  Vector mean = Vector::Zero(3);
  for (const auto& t : thetas) mean += t;
  mean /= reps;
  Matrix empirical = Matrix::Zero(3, 3);
  for (const auto& t : thetas) empirical += (t - mean) * (t - mean).transpose();
  empirical /= reps - 1;
  double psi_mean = 0.0;
  for (double v : psis) psi_mean += v;
  psi_mean /= reps;
  double psi_var = 0.0;
  for (double v : psis) psi_var += (v - psi_mean) * (v - psi_mean);
  psi_var /= reps - 1;

  bool ok = true;
  for (Eigen::Index k = 0; k < 3; ++k) {
    const double ratio = var_theta_sum(k, k) / reps / empirical(k, k);
    std::cout << "  AC5 Var(theta[" << k << "]): plug-in " << sci(var_theta_sum(k, k) / reps) << ", empirical "
              << sci(empirical(k, k)) << ", ratio " << num(ratio, 3) << "\n";
    ok = ok && std::abs(ratio - 1.0) <= 0.15;
  }
  const double psi_ratio = var_psi_sum / reps / psi_var;
  const double coverage = static_cast<double>(covered) / reps;
  const double half = 2.5758 * std::sqrt(0.95 * 0.05 / reps);
  std::cout << "  AC5 Var(psi): plug-in " << sci(var_psi_sum / reps) << ", empirical " << sci(psi_var) << ", ratio "
            << num(psi_ratio, 3) << "; coverage " << num(coverage, 3) << " (band " << num(0.95 - half, 3) << " to "
            << num(0.95 + half, 3) << ")\n";
  ok = ok && std::abs(psi_ratio - 1.0) <= 0.15 && std::abs(coverage - 0.95) <= half;
  return {ok, "variance ratios within 15% and psi coverage " + num(coverage, 3) + " over " + std::to_string(reps) +
                  " replications (psi ratio " + num(psi_ratio, 3) + ")"};
}

// ---------------------------------------------------------------------------
// AC6 and AC7: simulation grids against the published tables
// ---------------------------------------------------------------------------

// Published 5-trial rows: bias, variance and coverage for meta, metareg, CIMA, IPD.
struct FiveTrialRow {
  double bias[4];
  double var[4];
  double cov[4];
};
enum { kMeta = 0, kMetareg = 1, kCima = 2, kIpd = 3 };

const FiveTrialRow kFiveTrial[16] = {
    {{-0.0506, -0.0464, -0.0018, 3e-4}, {3e-4, 0.9126, 9e-4, 5e-4}, {0.591, 0.973, 0.971, 0.942}},
    {{-0.0486, 0.0521, -0.0037, -5e-4}, {4e-4, 1.7992, 0.001, 6e-4}, {0.717, 0.956, 0.972, 0.94}},
    {{0.0597, 0.0207, 0.0018, -0.0012}, {4e-4, 0.9024, 8e-4, 5e-4}, {0.573, 0.971, 0.941, 0.948}},
    {{0.0607, 0.0152, 0.0041, 9e-4}, {3e-4, 1.1977, 7e-4, 5e-4}, {0.59, 0.967, 0.958, 0.948}},
    {{-0.0587, 0.0057, 1e-4, 0.0014}, {3e-4, 0.5147, 8e-4, 5e-4}, {0.474, 0.963, 0.968, 0.944}},
    {{-0.0598, 0.0399, -0.0025, -7e-4}, {4e-4, 0.4928, 9e-4, 6e-4}, {0.592, 0.971, 0.952, 0.939}},
    {{0.0522, 0.0088, 0.0033, 0.0012}, {3e-4, 0.6461, 9e-4, 5e-4}, {0.625, 0.959, 0.959, 0.96}},
    {{0.0502, -0.0186, 0.0033, 0.001}, {3e-4, 1.1994, 9e-4, 5e-4}, {0.668, 0.96, 0.962, 0.947}},
    {{-0.0244, -0.0409, 6e-4, 0.0011}, {3e-4, 1.2614, 9e-4, 5e-4}, {0.795, 0.953, 0.973, 0.956}},
    {{-0.0248, 0.0302, 1e-4, 3e-4}, {4e-4, 1.1647, 0.001, 5e-4}, {0.8, 0.967, 0.971, 0.954}},
    {{0.0266, 0.0256, 6e-4, -4e-4}, {3e-4, 0.7811, 7e-4, 5e-4}, {0.777, 0.966, 0.948, 0.954}},
    {{0.028, 0.014, 0.0013, 2e-4}, {3e-4, 0.9053, 7e-4, 5e-4}, {0.753, 0.958, 0.963, 0.952}},
    {{-0.0265, -0.0112, 7e-4, 0.001}, {3e-4, 1.0711, 7e-4, 5e-4}, {0.768, 0.964, 0.966, 0.958}},
    {{-0.0252, 0.0021, -7e-4, 8e-4}, {4e-4, 0.8038, 8e-4, 6e-4}, {0.83, 0.961, 0.952, 0.949}},
    {{0.0261, 0.0392, 0.001, 5e-4}, {3e-4, 0.7302, 9e-4, 5e-4}, {0.787, 0.96, 0.959, 0.947}},
    {{0.0249, -0.0054, 0.0016, 1e-4}, {3e-4, 0.5564, 9e-4, 5e-4}, {0.77, 0.964, 0.964, 0.944}},
};

// Published single-trial rows: bias, variance, coverage, MSE for CIMA and IPD.
struct SingleTrialRow {
  double bias_cima, bias_ipd, var_cima, var_ipd, cov_cima, cov_ipd, mse_cima, mse_ipd;
};

const SingleTrialRow kSingleTrial[16] = {
    {3e-4, -0.0016, 0.0049, 0.0041, 0.971, 0.949, 0.0049, 0.0041},
    {9e-4, 2e-4, 0.0024, 0.0019, 0.973, 0.958, 0.0024, 0.0019},
    {-0.0031, -0.0036, 0.006, 0.0047, 0.972, 0.945, 0.0061, 0.0047},
    {0.0018, 2e-4, 0.0028, 0.0021, 0.966, 0.963, 0.0028, 0.0021},
    {-0.0017, -0.0017, 0.005, 0.0037, 0.948, 0.945, 0.005, 0.0037},
    {-5e-4, -7e-4, 0.0024, 0.0019, 0.946, 0.944, 0.0024, 0.0019},
    {-0.002, -1e-4, 0.0042, 0.0032, 0.964, 0.954, 0.0042, 0.0031},
    {-9e-4, -1e-4, 0.0021, 0.0017, 0.965, 0.941, 0.0021, 0.0017},
    {-0.0011, -0.0012, 0.0045, 0.0038, 0.971, 0.954, 0.0045, 0.0038},
    {4e-4, -4e-4, 0.0021, 0.0018, 0.969, 0.956, 0.0021, 0.0018},
    {0.0016, 0.0014, 0.0061, 0.0049, 0.966, 0.955, 0.0061, 0.0049},
    {0.0025, 0.0024, 0.0027, 0.0022, 0.964, 0.958, 0.0027, 0.0022},
    {-0.0035, -0.0037, 0.0045, 0.0036, 0.945, 0.953, 0.0045, 0.0037},
    {0.004, 0.0031, 0.0023, 0.0018, 0.936, 0.946, 0.0023, 0.0018},
    {-0.0032, -0.0022, 0.0042, 0.0032, 0.956, 0.952, 0.0042, 0.0032},
    {-4e-4, 3e-4, 0.0019, 0.0016, 0.966, 0.952, 0.0019, 0.0016},
};

using MetricsIndex = std::map<std::pair<int, sim::Method>, sim::MetricsRow>;

MetricsIndex run_grid(const std::string& set) {
  const auto catalog = sim::load_catalog(std::string(AGT_DATA_DIR) + "/scenarios/catalog.json");
  sim::StudyOptions options;
  options.replications = 300;
  options.jobs = std::max(1u, std::thread::hardware_concurrency());
  const auto start = std::chrono::steady_clock::now();
  const auto rows = sim::run_study(sim::select_set(catalog, set), options);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << "  " << set << " grid: 300 replications, seed 42, " << options.jobs << " jobs, " << num(seconds, 0)
            << " s\n";
  MetricsIndex index;
  for (const auto& r : rows) index[{r.scenario, r.method}] = r;
  return index;
}

Verdict ac6(const MetricsIndex& m) {
  using sim::Method;
  const Method methods[4] = {Method::meta, Method::metareg, Method::cima, Method::ipd};
  // Matching features: bias, variance and coverage of meta, CIMA and IPD.
  const int used[3] = {kMeta, kCima, kIpd};
  const auto published_features = [&](const FiveTrialRow& r) {
    std::vector<double> f;
    for (int k : used) f.insert(f.end(), {r.bias[k], r.var[k], r.cov[k]});
    return f;
  };
  const auto artifact_features = [&](int id) {
    std::vector<double> f;
    for (int k : used) {
      const auto& row = m.at({id, methods[k]});
      f.insert(f.end(), {row.bias, row.variance, row.coverage});
    }
    return f;
  };
  const std::size_t nf = 9;
  std::vector<double> sd(nf, 0.0);
  for (std::size_t j = 0; j < nf; ++j) {
    double mean = 0.0, sq = 0.0;
    for (const auto& r : kFiveTrial) mean += published_features(r)[j] / 16.0;
    for (const auto& r : kFiveTrial) sq += std::pow(published_features(r)[j] - mean, 2) / 15.0;
    sd[j] = std::sqrt(sq);
  }
  double cost[16][16];
  for (int r = 0; r < 16; ++r) {
    const auto pf = published_features(kFiveTrial[r]);
    for (int id = 0; id < 16; ++id) {
      const auto af = artifact_features(id + 1);
      cost[r][id] = 0.0;
      for (std::size_t j = 0; j < nf; ++j) {
        if (sd[j] > 0.0) cost[r][id] += std::pow((af[j] - pf[j]) / sd[j], 2);
      }
    }
  }

  // One-to-one assignment of published rows to scenarios with least total
  // distance, exact over subsets of used scenarios.
  const std::size_t states = std::size_t{1} << 16;
  std::vector<double> best(states, INFINITY);
  std::vector<int> choice(states, -1);
  best[0] = 0.0;
  for (std::size_t mask = 0; mask < states; ++mask) {
    if (!std::isfinite(best[mask])) continue;
    const int r = __builtin_popcount(static_cast<unsigned>(mask));
    if (r == 16) continue;
    for (int id = 0; id < 16; ++id) {
      if (mask & (std::size_t{1} << id)) continue;
      const std::size_t next = mask | (std::size_t{1} << id);
      if (best[mask] + cost[r][id] < best[next]) {
        best[next] = best[mask] + cost[r][id];
        choice[next] = id;
      }
    }
  }
  int assigned[16];
  for (std::size_t mask = states - 1, r = 16; r-- > 0;) {
    assigned[r] = choice[mask] + 1;
    mask &= ~(std::size_t{1} << choice[mask]);
  }

  // Published |bias_meta| range, widened by the allowed 0.015.
  double meta_lo = INFINITY, meta_hi = 0.0;
  for (const auto& r : kFiveTrial) {
    meta_lo = std::min(meta_lo, std::abs(r.bias[kMeta]));
    meta_hi = std::max(meta_hi, std::abs(r.bias[kMeta]));
  }
  meta_lo -= 0.015;
  meta_hi += 0.015;

  const auto check_row = [&](int r, int id, bool print) {
    const auto& cima = m.at({id, Method::cima});
    const auto& ipd = m.at({id, Method::ipd});
    const auto& meta = m.at({id, Method::meta});
    const auto& metareg = m.at({id, Method::metareg});
    const double ratio = metareg.variance / cima.variance;
    const double row_gap = std::abs(std::abs(meta.bias) - std::abs(kFiveTrial[r].bias[kMeta]));
    const bool c1 = std::abs(cima.bias) <= 0.01;
    const bool c2 = cima.coverage >= 0.92 && cima.coverage <= 0.99;
    const bool c3 = std::abs(cima.bias - ipd.bias) <= 0.01;
    const bool c4 = std::abs(meta.bias) >= meta_lo && std::abs(meta.bias) <= meta_hi;
    const bool c5 = kFiveTrial[r].var[kMetareg] < 0.4 || ratio >= 50.0;
    const bool ok = c1 && c2 && c3 && c4 && c5;
    if (print) {
      std::cout << "  " << std::setw(3) << r + 1 << " ->" << std::setw(3) << id << " | " << std::setw(8)
                << num(cima.bias) << " " << num(cima.coverage, 3) << (c1 && c2 ? "" : "*") << " " << std::setw(8)
                << num(std::abs(cima.bias - ipd.bias)) << (c3 ? "" : "*") << " | " << std::setw(8) << num(meta.bias)
                << (c4 ? "" : "*") << " " << std::setw(8) << num(kFiveTrial[r].bias[kMeta]) << " "
                << num(row_gap) << (row_gap <= 0.015 ? "" : "~") << " | " << num(ratio, 0) << (c5 ? "" : "*")
                << (ok ? "" : "  FAIL") << "\n";
    }
    return ok;
  };

  std::cout << "  |bias_meta| must lie in [" << num(meta_lo, 3) << ", " << num(meta_hi, 3)
            << "]; ~ marks a gap above 0.015 to the paired published row\n";
  std::cout << "  row  scen | bias_cima cov_cima |cima-ipd| | meta: artifact published gap | var ratio metareg/cima\n";
  int met = 0;
  for (int r = 0; r < 16; ++r) met += check_row(r, assigned[r], true) ? 1 : 0;
  bool identity = true;
  for (int r = 0; r < 16; ++r) identity = identity && assigned[r] == r + 1;
  int identity_met = 0;
  for (int r = 0; r < 16; ++r) identity_met += check_row(r, r + 1, false) ? 1 : 0;
  std::cout << "  AC6 assignment " << (identity ? "is" : "is not") << " the identity mapping; identity mapping meets "
            << identity_met << "/16 rows\n";
  return {met == 16, std::to_string(met) + "/16 published rows met by their assigned scenario"};
}

Verdict ac7(const MetricsIndex& m) {
  using sim::Method;
  bool all = true;
  int good = 0;
  std::cout << "  scen | bias_cima cov_cima | mse_cima mse_ipd ratio | published ratio\n";
  for (int id = 1; id <= 16; ++id) {
    const auto& cima = m.at({id, Method::cima});
    const auto& ipd = m.at({id, Method::ipd});
    const double ratio = cima.mse / ipd.mse;
    const bool ok = std::abs(cima.bias) <= 0.01 && cima.coverage >= 0.92 && cima.coverage <= 0.99 && ratio <= 2.0;
    std::cout << "  " << std::setw(4) << id << " | " << std::setw(8) << num(cima.bias) << " " << num(cima.coverage, 3)
              << " | " << sci(cima.mse) << " " << sci(ipd.mse) << " " << num(ratio, 2) << " | "
              << num(kSingleTrial[id - 1].mse_cima / kSingleTrial[id - 1].mse_ipd, 2) << (ok ? "" : "  FAIL") << "\n";
    if (ok) ++good;
    all = all && ok;
  }
  return {all, std::to_string(good) + "/16 scenarios with |bias| <= 0.01, coverage in [0.92, 0.99], MSE ratio <= 2"};
}

// ---------------------------------------------------------------------------
// AC8: application
// ---------------------------------------------------------------------------

Verdict ac8() {
  const MetaDataset ds =
      load_meta_dataset(kApp + "/effects.csv", kApp + "/moments.csv", kApp + "/schema.txt");
  const CopulaSpec spec = CopulaSpec::load(kApp + "/pulse_copula.txt");
  const CovariateSample target = sample(spec, ds.schema());
  const CateBasis basis = CateBasis::parse("~ 1 + lvef + prehhf + diabetes", ds.schema());
  const PipelineResult p =
      run_pipeline(ds, target.with_role(SampleRole::base), basis, {}, static_cast<double>(target.rows()));
  const TransportResult overall = transport_ate(p.fit, target);
  std::cout << "  AC8 overall " << num(overall.psi_hat) << " (" << num(overall.ci.lo) << ", " << num(overall.ci.hi)
            << ")\n";

  std::map<std::tuple<bool, bool, bool>, double> cell;  // (lvef <= 40, prehhf, diabetes)
  for (bool low : {true, false})
    for (bool hhf : {true, false})
      for (bool dia : {true, false}) {
        const std::string text = std::string(low ? "lvef<=40" : "lvef>40") + ",prehhf=" + (hhf ? "yes" : "no") +
                                 ",diabetes=" + (dia ? "yes" : "no");
        const TransportResult r = subgroup_ate(p.fit, target, SubgroupFilter::parse(text, ds.schema()));
        cell[{low, hhf, dia}] = r.psi_hat;
        std::cout << "  AC8 " << std::left << std::setw(34) << text << std::right << num(r.psi_hat) << " ("
                  << num(r.ci.lo) << ", " << num(r.ci.hi) << ")\n";
      }
  bool ordering = true;
  for (bool hhf : {true, false})
    for (bool dia : {true, false}) ordering = ordering && cell[{true, hhf, dia}] < cell[{false, hhf, dia}];
  for (bool low : {true, false})
    for (bool hhf : {true, false}) ordering = ordering && cell[{low, hhf, true}] < cell[{low, hhf, false}];
  const bool in_band = overall.psi_hat >= -0.055 && overall.psi_hat <= -0.020;
  return {in_band && ordering, "overall " + num(overall.psi_hat) + (in_band ? " in" : " outside") +
                                   " [-0.055, -0.020]; subgroup ordering " + (ordering ? "holds" : "violated")};
}

// ---------------------------------------------------------------------------
// AC9: indirect comparison
// ---------------------------------------------------------------------------

Verdict ac9() {
  const auto world = oracle::make_discrete_world(4, 31);
  // Arm A vs control in trials 1-2, arm B vs control in trials 3-4.
  const auto g1 = [](Row r) { return -0.02 + 0.03 * r[0] - 0.01 * (r[1] == 2.0) + 0.01 * r[2]; };
  const auto g2 = [](Row r) { return -0.06 + 0.01 * r[0] + 0.02 * (r[1] == 1.0) - 0.02 * r[2]; };
  const std::vector<std::string> ids1{world.trial_ids[0], world.trial_ids[1]};
  const std::vector<std::string> ids2{world.trial_ids[2], world.trial_ids[3]};
  const auto ds1 = oracle::enumerate_dataset(world, g1, oracle::Reporting::with_subgroups).subset(ids1);
  const auto ds2 = oracle::enumerate_dataset(world, g2, oracle::Reporting::with_subgroups).subset(ids2);
  const auto basis = CateBasis::parse("~ 1 + x1 + x2 + x3", world.schema);

  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> pick(0, world.grid.rows() - 1);
  RowMatrix x(20000, 3);
  for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) = world.grid.values().row(static_cast<Eigen::Index>(pick(rng)));
  const CovariateSample target(std::move(x), SampleRole::target);

  const auto p1 = run_pipeline(ds1, world.grid, basis, {}, static_cast<double>(target.rows()));
  const auto p2 = run_pipeline(ds2, world.grid, basis, {}, static_cast<double>(target.rows()));
  double truth = 0.0;
  for (std::size_t i = 0; i < world.grid.rows(); ++i) truth += g2(world.grid.row(i)) - g1(world.grid.row(i));
  truth /= static_cast<double>(world.grid.rows());

  const TransportResult r = indirect_comparison(p1.fit, p2.fit, target);
  const double mc_se = std::sqrt(r.var_target);
  const TransportResult self = indirect_comparison(p1.fit, p1.fit, target);
  const bool recovered = std::abs(r.psi_hat - truth) <= 3.0 * mc_se;
  const bool zero = self.psi_hat == 0.0 && self.se == 0.0;
  std::cout << "  AC9 psi_12 " << num(r.psi_hat, 5) << ", population contrast " << num(truth, 5) << ", MC SE "
            << sci(mc_se) << "; self-comparison " << self.psi_hat << " (se " << self.se << ")\n";
  return {recovered && zero, "error " + num(std::abs(r.psi_hat - truth) / mc_se, 2) +
                                 " MC SEs; self-comparison " + (zero ? "exactly 0" : "nonzero")};
}

// ---------------------------------------------------------------------------
// AC10: determinism of every subcommand
// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict ac10() {
  const fs::path dir = fs::temp_directory_path() / "agt_acceptance_determinism";
  fs::remove_all(dir);
  const std::string fit = (dir / "fit" / "fit.json").string();
  const std::vector<std::vector<std::string>> commands{
      {"fit", "--data-dir", kApp, "--target-copula", kApp + "/pulse_copula.txt", "--formula",
       "~ 1 + lvef + prehhf + diabetes", "--out", (dir / "fit").string()},
      {"transport", "--fit", fit, "--subgroups", "lvef<=40,prehhf=yes,diabetes=yes", "--out", (dir / "tr").string()},
      {"indirect", "--fit1", fit, "--fit2", fit, "--out", (dir / "ind").string()},
      {"synth", "--spec", kApp + "/pulse_copula.txt", "--n", "5000", "--threads", "3", "--out", (dir / "syn").string()},
      {"simulate", "--scenario-set", "all", "--scenarios", "1,2", "--reps", "4", "--jobs", "2", "--out",
       (dir / "sim").string()},
      {"validate", "--data-dir", kApp, "--target-copula", kApp + "/pulse_copula.txt"},
  };
  const auto run_all = [&]() {
    std::map<std::string, std::string> state;
    for (const auto& c : commands) {
      std::ostringstream out, err;
      const int code = cli::run(c, out, err);
      state["stdout:" + c[0]] = std::to_string(code) + "\n" + out.str();
      if (code != 0) std::cout << "  AC10 " << c[0] << " exited with " << code << ": " << err.str();
    }
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.is_regular_file()) state[fs::relative(e.path(), dir).string()] = slurp(e.path());
    }
    return state;
  };
  const auto first = run_all();
  const auto second = run_all();
  int differing = 0;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    if (it == second.end() || it->second != bytes) {
      ++differing;
      std::cout << "  AC10 differs between runs: " << name << "\n";
    }
  }
  bool all_ok = second.size() == first.size();
  for (const auto& [name, bytes] : first) {
    if (name.rfind("stdout:", 0) == 0 && bytes.rfind("0\n", 0) != 0) all_ok = false;
  }
  const std::size_t files = first.size() - commands.size();
  return {differing == 0 && all_ok, std::to_string(files) + " output files and " + std::to_string(commands.size()) +
                                        " stdout streams compared, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main() {
  std::vector<std::pair<std::string, Verdict>> verdicts;
  const auto record = [&](const std::string& name, const std::function<Verdict()>& f) {
    std::cout << name << " ...\n" << std::flush;
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    verdicts.emplace_back(name, v);
    std::cout << name << " " << (v.pass ? "PASS" : "FAIL") << ": " << v.summary << "\n\n" << std::flush;
  };
  record("AC1", ac1);
  record("AC2", ac2);
  record("AC3", ac3);
  record("AC4", ac4);
  record("AC5", ac5);
  MetricsIndex five, single;
  record("AC6", [&] {
    five = run_grid("5trial");
    return ac6(five);
  });
  record("AC7", [&] {
    single = run_grid("1trial");
    return ac7(single);
  });
  record("AC8", ac8);
  record("AC9", ac9);
  record("AC10", ac10);

  std::cout << "Summary\n";
  bool all = true;
  for (const auto& [name, v] : verdicts) {
    std::cout << name << " " << (v.pass ? "PASS" : "FAIL") << "\n";
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
