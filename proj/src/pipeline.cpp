#include "agt/pipeline.hpp"

namespace agt {

PipelineResult run_pipeline(const MetaDataset& dataset, const CovariateSample& base, const CateModel& model,
                            const PipelineOptions& options, double n_0) {
  PipelineResult r;
  r.warnings = dataset.warnings();
  r.tilts = solve_tilts(dataset, base, options.tilt);
  RepresenterMatrix reps = options.baseline ? evaluate_relative_representers(r.tilts, base, dataset, *options.baseline)
                                            : evaluate_representers(r.tilts, base, dataset);
  r.system = std::make_shared<MomentSystem>(dataset, base, std::move(reps), model);
  r.covariances = approximate_covariances(dataset, r.tilts, base);
  r.sizes = SampleSizes::from(dataset, base, n_0);

  FitOptions fit_options = options.fit;
  if (fit_options.n_total <= 0.0) fit_options.n_total = r.sizes.total();
  const OmegaFn omega = make_omega_fn(*r.system, r.tilts, r.covariances, r.sizes, options.variance);
  r.fit = fit(*r.system, fit_options, omega);
  r.jacobians = compute_jacobians(*r.system, r.fit.theta, r.fit.weight, r.tilts);
  r.variance = assemble_variance(r.fit, *r.system, r.jacobians, r.tilts, r.covariances, r.sizes, options.variance);
  r.fit.V_theta = r.variance.V_theta;
  r.fit.n_total = r.variance.n_total;

  r.warnings.insert(r.warnings.end(), r.fit.warnings.begin(), r.fit.warnings.end());
  r.warnings.insert(r.warnings.end(), r.variance.warnings.begin(), r.variance.warnings.end());
  return r;
}

}  // namespace agt
