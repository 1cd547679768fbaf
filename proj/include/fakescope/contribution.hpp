#pragma once

#include <string>
#include <vector>

#include "fakescope/detector.hpp"

namespace fakescope {

struct ContributionVector {
  Vector s;  // v_i * w_i
  Vector c;  // s_i / sum_j |s_j|
  std::string source_id;
  bool degenerate = false;     // every s_i is zero; c is all zeros
  bool low_magnitude = false;  // sum |s_i| below kLowMagnitude, c reported as computed
};

inline constexpr double kLowMagnitude = 1e-8;

/// Signed, L1-normalized per-dimension contribution; positive pushes toward fake.
ContributionVector contribution_scores(const DistilledVector& v, const DetectorModel& model);

struct WaterfallStep {
  int dim = 0;  // 1-based
  double contribution = 0;
  double cumulative = 0;
};

std::vector<WaterfallStep> waterfall_data(const ContributionVector& contrib);

enum class WhatIfMode {
  Joint,  // minimal Euclidean perturbation across all dimensions
  Axis,   // cheapest single-dimension perturbation
};

struct WhatIfResult {
  Vector delta;
  Vector new_vector;
  Prediction old_prediction;
  Prediction new_prediction;
  double epsilon = 1e-3;
  WhatIfMode mode = WhatIfMode::Joint;
};

/// Moves v across the head's decision hyperplane, overshooting by the relative margin epsilon.
WhatIfResult whatif_counterfactual(const DistilledVector& v, const DetectorModel& model, double epsilon = 1e-3,
                                   WhatIfMode mode = WhatIfMode::Joint);

}  // namespace fakescope
