#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fakescope/transformer.hpp"

namespace fakescope {

struct TsneOptions {
  double perplexity = 30.0;  // capped at n/4
  int iterations = 1000;
  int exaggeration_iterations = 250;
  double exaggeration = 12.0;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
};

/// Exact t-SNE to 2-D. Returns an n x 2 matrix. Deterministic for a seed.
// TODO: Barnes-Hut gradients for corpora beyond a few thousand points; the exact
// gradient is O(n^2) per iteration.
Matrix tsne_embed(const Matrix& data, std::uint64_t seed, const TsneOptions& options = {});

}  // namespace fakescope
