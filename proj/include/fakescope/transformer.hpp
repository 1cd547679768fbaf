#pragma once

// Pre-norm transformer encoder with an explicit forward trace and a hand-written
// backward pass that exposes the gradient of a scalar target with respect to
// every block's attention probabilities. Parameters are never updated here.

#include <cstdint>
#include <map>
#include <vector>

#include <Eigen/Dense>

namespace fakescope {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { QuickGelu, Gelu };

struct LayerNormWeights {
  Vector gamma;
  Vector beta;
};

struct BlockWeights {
  LayerNormWeights ln1;
  Matrix wq, wk, wv, wo;  // D x D, applied as x * W^T
  Vector bq, bk, bv, bo;
  LayerNormWeights ln2;
  Matrix w1;  // M x D
  Vector b1;
  Matrix w2;  // D x M
  Vector b2;
};

struct EncoderConfig {
  int width = 64;
  int heads = 4;
  int layers = 2;
  int mlp = 128;
  Activation activation = Activation::QuickGelu;
  double ln_eps = 1e-5;
};

/// Per-head attention matrices for one block.
using HeadMaps = std::vector<Matrix>;

/// Replaces the softmax output of selected blocks; used for finite-difference checks
/// where the attention map itself is the perturbed leaf.
using AttentionOverrides = std::map<int, HeadMaps>;

struct LayerNormTrace {
  Matrix xhat;
  Vector rstd;
};

struct BlockTrace {
  Matrix x_in;
  LayerNormTrace ln1;
  Matrix h1;
  Matrix q, k, v;
  HeadMaps attention;
  Matrix ctx;
  Matrix x_mid;
  LayerNormTrace ln2;
  Matrix h2;
  Matrix u;
  Matrix act;
};

struct EncoderTrace {
  std::vector<BlockTrace> blocks;
  Matrix output;
};

class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(EncoderConfig config, std::vector<BlockWeights> blocks);

  const EncoderConfig& config() const { return config_; }
  const std::vector<BlockWeights>& blocks() const { return blocks_; }

  EncoderTrace forward(const Matrix& tokens, const AttentionOverrides* overrides = nullptr) const;

  /// Backpropagates `d_output` (same shape as the output tokens) and returns
  /// d(target)/d(attention) for every block and head, indexed [block][head].
  std::vector<HeadMaps> attention_gradients(const EncoderTrace& trace, const Matrix& d_output) const;

  /// Gradient with respect to the input tokens.
  Matrix input_gradient(const EncoderTrace& trace, const Matrix& d_output) const;

  std::uint64_t checksum(std::uint64_t seed) const;

 private:
  Matrix backward(const EncoderTrace& trace, const Matrix& d_output, std::vector<HeadMaps>* grads) const;

  EncoderConfig config_;
  std::vector<BlockWeights> blocks_;
};

Matrix layer_norm(const Matrix& x, const LayerNormWeights& w, double eps, LayerNormTrace* trace);
Matrix layer_norm_backward(const Matrix& dy, const LayerNormWeights& w, const LayerNormTrace& trace);

/// Random weights with the usual small-scale initialization; deterministic for a seed.
std::vector<BlockWeights> random_blocks(const EncoderConfig& config, std::uint64_t seed);

}  // namespace fakescope
