#include "fakescope/contribution.hpp"

#include <cmath>

#include "fakescope/error.hpp"

namespace fakescope {

ContributionVector contribution_scores(const DistilledVector& v, const DetectorModel& model) {
  if (v.values.size() != model.head_w.size()) {
    throw Error(ErrorKind::Argument, "distilled vector length does not match the head");
  }
  ContributionVector out;
  out.source_id = v.source_id;
  out.s = v.values.cwiseProduct(model.head_w);
  if (!out.s.allFinite()) throw Error(ErrorKind::Numeric, "non-finite contribution scalar");
  const double total = out.s.cwiseAbs().sum();
  if (total == 0.0) {
    out.c = Vector::Zero(out.s.size());
    out.degenerate = true;
    return out;
  }
  out.c = out.s / total;
  out.low_magnitude = total < kLowMagnitude;
  return out;
}

std::vector<WaterfallStep> waterfall_data(const ContributionVector& contrib) {
  std::vector<WaterfallStep> steps;
  steps.reserve(static_cast<std::size_t>(contrib.c.size()));
  double running = 0.0;
  for (Eigen::Index i = 0; i < contrib.c.size(); ++i) {
    running += contrib.c(i);
    steps.push_back({static_cast<int>(i) + 1, contrib.c(i), running});
  }
  return steps;
}

WhatIfResult whatif_counterfactual(const DistilledVector& v, const DetectorModel& model, double epsilon,
                                   WhatIfMode mode) {
  const Vector& w = model.head_w;
  if (v.values.size() != w.size()) throw Error(ErrorKind::Argument, "distilled vector length does not match the head");
  if (!(epsilon > 0.0)) throw Error(ErrorKind::Argument, "epsilon must be positive");
  const double norm2 = w.squaredNorm();
  if (norm2 == 0.0) throw Error(ErrorKind::DegenerateModel, "classification head is all zeros");

  WhatIfResult r;
  r.epsilon = epsilon;
  r.mode = mode;
  r.old_prediction = predict(v, model);
  const double logit = r.old_prediction.logit;
  if (logit == 0.0) throw Error(ErrorKind::Argument, "image lies exactly on the decision boundary");

  if (mode == WhatIfMode::Joint) {
    r.delta = -(1.0 + epsilon) * (logit / norm2) * w;
  } else {
    Eigen::Index best = 0;
    w.cwiseAbs().maxCoeff(&best);
    r.delta = Vector::Zero(w.size());
    r.delta(best) = -(1.0 + epsilon) * logit / w(best);
  }
  r.new_vector = v.values + r.delta;
  r.new_prediction = predict(DistilledVector{r.new_vector, v.source_id}, model);
  if (r.new_prediction.label == r.old_prediction.label) {
    throw Error(ErrorKind::Numeric, "counterfactual margin is below floating-point resolution");
  }
  return r;
}

}  // namespace fakescope
