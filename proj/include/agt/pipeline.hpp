#pragma once

// End-to-end fit: tilts, representers, GMM, Jacobians and plug-in variance.

#include "agt/inference.hpp"

namespace agt {

struct PipelineOptions {
  TiltOptions tilt;
  FitOptions fit;
  VarianceOptions variance;
  /// Relative-scale representers use w b I / mean(w b I) with this baseline.
  std::optional<BaselineFn> baseline;
};

struct PipelineResult {
  std::vector<TiltFit> tilts;
  std::shared_ptr<MomentSystem> system;
  CateFit fit;  // V_theta and n_total filled
  JacobianSet jacobians;
  std::vector<TrialCovariance> covariances;
  SampleSizes sizes;
  VarianceReport variance;
  std::vector<std::string> warnings;
};

/// `n_0` is the target sample size, if a target will be used downstream.
PipelineResult run_pipeline(const MetaDataset& dataset, const CovariateSample& base, const CateModel& model,
                            const PipelineOptions& options = {}, double n_0 = 0.0);

}  // namespace agt
