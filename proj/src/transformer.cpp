#include "fakescope/transformer.hpp"

#include <cmath>
#include <numbers>

#include "fakescope/error.hpp"
#include "fakescope/rng.hpp"

namespace fakescope {
namespace {

double activate(Activation kind, double x) {
  if (kind == Activation::QuickGelu) return x / (1.0 + std::exp(-1.702 * x));
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double activate_grad(Activation kind, double x) {
  if (kind == Activation::QuickGelu) {
    const double s = 1.0 / (1.0 + std::exp(-1.702 * x));
    return s + 1.702 * x * s * (1.0 - s);
  }
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Matrix affine(const Matrix& x, const Matrix& w, const Vector& b) {
  Matrix y = x * w.transpose();
  y.rowwise() += b.transpose();
  return y;
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp();
    s.row(r) /= s.row(r).sum();
  }
}

std::uint64_t hash_matrix(const Matrix& m, std::uint64_t h) {
  return fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
}

std::uint64_t hash_vector(const Vector& v, std::uint64_t h) {
  return fnv1a(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double), h);
}

}  // namespace

Matrix layer_norm(const Matrix& x, const LayerNormWeights& w, double eps, LayerNormTrace* trace) {
  const auto d = static_cast<double>(x.cols());
  Matrix xhat(x.rows(), x.cols());
  Vector rstd(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).sum() / d;
    const double var = (x.row(r).array() - mean).square().sum() / d;
    rstd(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  Matrix y = (xhat.array().rowwise() * w.gamma.transpose().array()).rowwise() + w.beta.transpose().array();
  if (trace) {
    trace->xhat = std::move(xhat);
    trace->rstd = std::move(rstd);
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const LayerNormWeights& w, const LayerNormTrace& trace) {
  const auto d = static_cast<double>(dy.cols());
  const Matrix dxhat = dy.array().rowwise() * w.gamma.transpose().array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() / d;
    const double mean_dx = dxhat.row(r).dot(trace.xhat.row(r)) / d;
    dx.row(r) = trace.rstd(r) * (dxhat.row(r).array() - mean_d - trace.xhat.row(r).array() * mean_dx);
  }
  return dx;
}

TransformerEncoder::TransformerEncoder(EncoderConfig config, std::vector<BlockWeights> blocks)
    : config_(config), blocks_(std::move(blocks)) {
  if (config_.width % config_.heads != 0) {
    throw Error(ErrorKind::Argument, "width must be divisible by the head count");
  }
  if (static_cast<int>(blocks_.size()) != config_.layers) {
    throw Error(ErrorKind::Argument, "block count does not match configured layers");
  }
}

EncoderTrace TransformerEncoder::forward(const Matrix& tokens, const AttentionOverrides* overrides) const {
  if (tokens.cols() != config_.width) {
    throw Error(ErrorKind::Argument, "token width " + std::to_string(tokens.cols()) + " != " +
                                         std::to_string(config_.width));
  }
  const int dh = config_.width / config_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto t = tokens.rows();

  EncoderTrace trace;
  trace.blocks.resize(blocks_.size());
  Matrix x = tokens;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const BlockWeights& w = blocks_[b];
    BlockTrace& bt = trace.blocks[b];
    bt.x_in = x;
    bt.h1 = layer_norm(x, w.ln1, config_.ln_eps, &bt.ln1);
    bt.q = affine(bt.h1, w.wq, w.bq);
    bt.k = affine(bt.h1, w.wk, w.bk);
    bt.v = affine(bt.h1, w.wv, w.bv);
    bt.ctx = Matrix::Zero(t, config_.width);
    bt.attention.resize(config_.heads);

    const HeadMaps* forced = nullptr;
    if (overrides) {
      if (auto it = overrides->find(static_cast<int>(b)); it != overrides->end()) forced = &it->second;
    }
    for (int h = 0; h < config_.heads; ++h) {
      Matrix a;
      if (forced) {
        a = (*forced)[h];
      } else {
        a = bt.q.middleCols(h * dh, dh) * bt.k.middleCols(h * dh, dh).transpose() * scale;
        softmax_rows(a);
      }
      bt.ctx.middleCols(h * dh, dh) = a * bt.v.middleCols(h * dh, dh);
      bt.attention[h] = std::move(a);
    }
    bt.x_mid = x + affine(bt.ctx, w.wo, w.bo);
    bt.h2 = layer_norm(bt.x_mid, w.ln2, config_.ln_eps, &bt.ln2);
    bt.u = affine(bt.h2, w.w1, w.b1);
    bt.act = bt.u.unaryExpr([&](double z) { return activate(config_.activation, z); });
    x = bt.x_mid + affine(bt.act, w.w2, w.b2);
  }
  trace.output = std::move(x);
  return trace;
}

Matrix TransformerEncoder::backward(const EncoderTrace& trace, const Matrix& d_output,
                                    std::vector<HeadMaps>* grads) const {
  const int dh = config_.width / config_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (grads) grads->assign(blocks_.size(), {});

  Matrix dx = d_output;
  for (std::size_t bi = blocks_.size(); bi-- > 0;) {
    const BlockWeights& w = blocks_[bi];
    const BlockTrace& bt = trace.blocks[bi];

    // MLP branch.
    Matrix dmid = dx;
    const Matrix dact = dx * w.w2;
    const Matrix du = dact.cwiseProduct(bt.u.unaryExpr([&](double z) { return activate_grad(config_.activation, z); }));
    dmid += layer_norm_backward(du * w.w1, w.ln2, bt.ln2);

    // Attention branch.
    Matrix din = dmid;
    const Matrix dctx = dmid * w.wo;
    Matrix dq = Matrix::Zero(bt.q.rows(), bt.q.cols());
    Matrix dk = Matrix::Zero(bt.k.rows(), bt.k.cols());
    Matrix dv = Matrix::Zero(bt.v.rows(), bt.v.cols());
    HeadMaps head_grads(config_.heads);
    for (int h = 0; h < config_.heads; ++h) {
      const Matrix& a = bt.attention[h];
      const auto dctx_h = dctx.middleCols(h * dh, dh);
      Matrix da = dctx_h * bt.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = a.transpose() * dctx_h;
      // Softmax Jacobian: dS = A * (dA - rowsum(dA * A)).
      const Vector row_dot = da.cwiseProduct(a).rowwise().sum();
      const Matrix ds = a.cwiseProduct(da.colwise() - row_dot);
      dq.middleCols(h * dh, dh) = ds * bt.k.middleCols(h * dh, dh) * scale;
      dk.middleCols(h * dh, dh) = ds.transpose() * bt.q.middleCols(h * dh, dh) * scale;
      head_grads[h] = std::move(da);
    }
    if (grads) (*grads)[bi] = std::move(head_grads);
    const Matrix dh1 = dq * w.wq + dk * w.wk + dv * w.wv;
    din += layer_norm_backward(dh1, w.ln1, bt.ln1);
    dx = std::move(din);
  }
  return dx;
}

std::vector<HeadMaps> TransformerEncoder::attention_gradients(const EncoderTrace& trace,
                                                              const Matrix& d_output) const {
  std::vector<HeadMaps> grads;
  backward(trace, d_output, &grads);
  return grads;
}

Matrix TransformerEncoder::input_gradient(const EncoderTrace& trace, const Matrix& d_output) const {
  return backward(trace, d_output, nullptr);
}

std::uint64_t TransformerEncoder::checksum(std::uint64_t h) const {
  for (const auto& w : blocks_) {
    for (const Matrix* m : {&w.wq, &w.wk, &w.wv, &w.wo, &w.w1, &w.w2}) h = hash_matrix(*m, h);
    for (const Vector* v : {&w.bq, &w.bk, &w.bv, &w.bo, &w.b1, &w.b2, &w.ln1.gamma, &w.ln1.beta,
                            &w.ln2.gamma, &w.ln2.beta}) {
      h = hash_vector(*v, h);
    }
  }
  return h;
}

std::vector<BlockWeights> random_blocks(const EncoderConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  const int d = config.width;
  const int m = config.mlp;
  auto gaussian = [&](int rows, int cols, double stddev) {
    Matrix out(rows, cols);
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = rng.normal(0.0, stddev);
    return out;
  };
  auto small_vector = [&](int n, double stddev) {
    Vector out(n);
    for (Eigen::Index i = 0; i < n; ++i) out(i) = rng.normal(0.0, stddev);
    return out;
  };
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<BlockWeights> blocks(config.layers);
  for (auto& w : blocks) {
    w.ln1 = {Vector::Ones(d) + small_vector(d, 0.05), small_vector(d, 0.05)};
    w.wq = gaussian(d, d, 1.5 * s);
    w.wk = gaussian(d, d, 1.5 * s);
    w.wv = gaussian(d, d, s);
    w.wo = gaussian(d, d, s);
    w.bq = small_vector(d, 0.02);
    w.bk = small_vector(d, 0.02);
    w.bv = small_vector(d, 0.02);
    w.bo = small_vector(d, 0.02);
    w.ln2 = {Vector::Ones(d) + small_vector(d, 0.05), small_vector(d, 0.05)};
    w.w1 = gaussian(m, d, s);
    w.b1 = small_vector(m, 0.02);
    w.w2 = gaussian(d, m, 1.0 / std::sqrt(static_cast<double>(m)));
    w.b2 = small_vector(d, 0.02);
  }
  return blocks;
}

}  // namespace fakescope
