#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fakescope/detector.hpp"
#include "fakescope/encoder.hpp"

namespace fakescope {

/// Attention probabilities of one block and the gradient of a scalar target
/// (one distilled dimension) with respect to them, per head.
struct AttentionCapture {
  HeadMaps attention;
  HeadMaps gradient;
  int k = 0;           // patch grid; tokens = k*k + 1 with the class token first
  int target_dim = 0;  // 1-based distilled dimension
};

struct TokenRelevanceMap {
  Matrix grid;  // k x k, nonnegative
  int target_dim = 0;
};

struct PixelRelevanceMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major, in [0, 1]
  int target_dim = 0;
  bool degenerate = false;

  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct RelevanceStack {
  std::vector<PixelRelevanceMap> maps;  // one per distilled dimension, in order
  std::string source_id;
};

/// Everything needed to differentiate a distilled dimension back to the encoder.
struct DetectorPipeline {
  const BaseEncoderAdapter& adapter;
  const ForgetProjection& projection;
  const DetectorModel& detector;
};

/// One forward pass and one backward pass from distilled dimension `dim` (1..16);
/// returns the last block's capture.
AttentionCapture capture_attention(const PixelTensor& pixels, const DetectorPipeline& pipeline, int dim);

/// Captures for every block, ordered last block first.
std::vector<AttentionCapture> capture_attention_chain(const PixelTensor& pixels, const DetectorPipeline& pipeline,
                                                      int dim);

/// Head-mean of the per-head positive part of gradient * attention, full token x token.
Matrix gradient_weighted_attention(const AttentionCapture& capture);

/// Class-token row with the class column dropped, as k x k.
Matrix class_row_grid(const Matrix& token_relevance, int k);

/// Last-block relevance: mean over heads of (grad * A)^+, class-token row.
TokenRelevanceMap token_relevance_last(const AttentionCapture& capture);

/// Full rule: R = 1, then R <- R + A_i R for blocks from last to first.
TokenRelevanceMap propagate_relevance_chain(const std::vector<AttentionCapture>& captures);

/// Bilinear upscale with grid nodes on the corner pixels, then min-max normalization.
PixelRelevanceMap pixel_relevance(const TokenRelevanceMap& grid, int height, int width);

struct RelevanceOptions {
  bool chain = false;  // use the all-block propagation rule instead of the last block only
};

/// 16 maps at height x width, each from its own backward pass over a shared forward.
RelevanceStack relevance_stack(const PixelTensor& pixels, const DetectorPipeline& pipeline, int height, int width,
                               RelevanceOptions options = {});

void save_relevance_cache(const std::filesystem::path& path, const RelevanceStack& stack, int k);
RelevanceStack load_relevance_cache(const std::filesystem::path& path);

}  // namespace fakescope
