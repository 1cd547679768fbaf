#include "fakescope/tsne.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>

#include "fakescope/error.hpp"
#include "fakescope/rng.hpp"

namespace fakescope {
namespace {

// Row-conditional probabilities with a per-row Gaussian bandwidth found by
// bisection on the entropy.
Matrix conditional_affinities(const Matrix& sq_dist, double perplexity) {
  const auto n = sq_dist.rows();
  Matrix p = Matrix::Zero(n, n);
  const double target = std::log(perplexity);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = -DBL_MAX, hi = DBL_MAX;
    for (int iter = 0; iter < 200; ++iter) {
      double sum = 0.0, weighted = 0.0;
      const double min_d = [&] {
        double m = DBL_MAX;
        for (Eigen::Index j = 0; j < n; ++j) {
          if (j != i) m = std::min(m, sq_dist(i, j));
        }
        return m;
      }();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) {
          p(i, j) = 0.0;
          continue;
        }
        // Shifted by the nearest distance for stability; cancels in normalization.
        p(i, j) = std::exp(-beta * (sq_dist(i, j) - min_d));
        sum += p(i, j);
        weighted += (sq_dist(i, j) - min_d) * p(i, j);
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      p.row(i) /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = hi == DBL_MAX ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = lo == -DBL_MAX ? beta / 2.0 : (beta + lo) / 2.0;
      }
    }
  }
  return p;
}

}  // namespace

Matrix tsne_embed(const Matrix& data, std::uint64_t seed, const TsneOptions& options) {
  const auto n = data.rows();
  if (n < 2) throw Error(ErrorKind::Argument, "t-SNE needs at least two points");
  const double perplexity = std::min(options.perplexity, static_cast<double>(n) / 4.0);

  // Scale-free inputs: distances divided by their maximum.
  Matrix sq_dist(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) sq_dist(i, j) = (data.row(i) - data.row(j)).squaredNorm();
  }
  const double max_d = sq_dist.maxCoeff();
  if (max_d > 0) sq_dist /= max_d;

  Matrix p = conditional_affinities(sq_dist, perplexity);
  p = (p + p.transpose()).eval();
  p /= p.sum();
  p = p.cwiseMax(1e-12);

  Rng rng(seed);
  Matrix y(n, 2);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = rng.normal(0.0, 1e-4);
  Matrix update = Matrix::Zero(n, 2);
  Matrix gains = Matrix::Ones(n, 2);
  Matrix grad(n, 2);
  Matrix num(n, n);

  for (int iter = 0; iter < options.iterations; ++iter) {
    const double exaggeration = iter < options.exaggeration_iterations ? options.exaggeration : 1.0;
    const double momentum = iter < options.exaggeration_iterations ? options.initial_momentum : options.final_momentum;

    double z = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      num(i, i) = 0.0;
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num(i, j) = q;
        num(j, i) = q;
        z += 2.0 * q;
      }
    }
    grad.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double mult = (exaggeration * p(i, j) - num(i, j) / z) * num(i, j);
        gx += mult * (y(i, 0) - y(j, 0));
        gy += mult * (y(i, 1) - y(j, 1));
      }
      grad(i, 0) = 4.0 * gx;
      grad(i, 1) = 4.0 * gy;
    }
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double g = grad.data()[i];
      double& gain = gains.data()[i];
      double& u = update.data()[i];
      gain = (std::signbit(g) != std::signbit(u)) ? gain + 0.2 : gain * 0.8;
      gain = std::max(gain, 0.01);
      u = momentum * u - options.learning_rate * gain * g;
      y.data()[i] += u;
    }
    const Eigen::RowVector2d mean = y.colwise().mean();
    y.rowwise() -= mean;
  }
  if (!y.allFinite()) throw Error(ErrorKind::Numeric, "t-SNE produced non-finite coordinates");
  return y;
}

}  // namespace fakescope
