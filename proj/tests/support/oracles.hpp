#pragma once

// Independent reference computations used by the unit and acceptance tests. Nothing
// here calls the library routine it is checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

namespace oracle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Unique scratch directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("fakescope-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline double relative_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / scale;
}

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const Vector&)>& f, Vector x, Eigen::Index i,
                                 double h) {
  const double x0 = x(i);
  x(i) = x0 + h;
  const double up = f(x);
  x(i) = x0 - h;
  const double down = f(x);
  return (up - down) / (2 * h);
}

/// Logistic regression with intercept by iteratively reweighted least squares, a small
/// ridge term keeping the Hessian invertible. Returns [w; b].
inline Vector logistic_irls(const Matrix& x, const std::vector<int>& y, int iterations = 25, double ridge = 1e-6) {
  const auto n = x.rows(), d = x.cols();
  Matrix xa(n, d + 1);
  xa << x, Matrix::Ones(n, 1);
  Vector beta = Vector::Zero(d + 1);
  for (int it = 0; it < iterations; ++it) {
    const Vector z = xa * beta;
    Vector p(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p(i) = 1.0 / (1.0 + std::exp(-z(i)));
      w(i) = std::max(p(i) * (1 - p(i)), 1e-10);
    }
    Vector yv(n);
    for (Eigen::Index i = 0; i < n; ++i) yv(i) = y[static_cast<std::size_t>(i)];
    const Vector grad = xa.transpose() * (yv - p) - ridge * beta;
    Matrix h = xa.transpose() * w.asDiagonal() * xa;
    h.diagonal().array() += ridge;
    const Vector step = h.ldlt().solve(grad);
    beta += step;
    if (step.norm() < 1e-10) break;
  }
  return beta;
}

inline double logistic_accuracy(const Vector& beta, const Matrix& x, const std::vector<int>& y) {
  const auto d = x.cols();
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double z = x.row(i).dot(beta.head(d)) + beta(d);
    const int predicted = z > 0 ? 1 : 0;
    correct += predicted == y[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(x.rows());
}

/// Minimum k-means objective over every assignment of points to k nonempty groups,
/// returned with one optimal labeling canonicalized by first occurrence.
struct PartitionResult {
  double inertia = std::numeric_limits<double>::infinity();
  std::vector<int> labels;
};

inline std::vector<int> canonical_labels(const std::vector<int>& labels) {
  std::vector<int> map(labels.size() + 1, -1), out(labels.size());
  int next = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (map[labels[i]] < 0) map[labels[i]] = next++;
    out[i] = map[labels[i]];
  }
  return out;
}

inline PartitionResult exhaustive_partition(const std::vector<Vector>& points, int k) {
  const int n = static_cast<int>(points.size());
  PartitionResult best;
  std::vector<int> labels(n, 0);
  long total = 1;
  for (int i = 0; i < n; ++i) total *= k;
  for (long code = 0; code < total; ++code) {
    long c = code;
    for (int i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(c % k);
      c /= k;
    }
    std::vector<Vector> sums(k, Vector::Zero(points[0].size()));
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      sums[labels[i]] += points[i];
      ++counts[labels[i]];
    }
    if (std::count(counts.begin(), counts.end(), 0) > 0) continue;
    double inertia = 0;
    for (int i = 0; i < n; ++i) inertia += (points[i] - sums[labels[i]] / counts[labels[i]]).squaredNorm();
    if (inertia < best.inertia - 1e-12) {
      best.inertia = inertia;
      best.labels = canonical_labels(labels);
    }
  }
  return best;
}

/// Minimum-cost injective assignment of rows to columns by enumerating column permutations.
inline double exhaustive_assignment_cost(const Matrix& cost) {
  const auto rows = cost.rows(), cols = cost.cols();
  std::vector<int> perm(static_cast<std::size_t>(cols));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (Eigen::Index r = 0; r < rows; ++r) c += cost(r, perm[static_cast<std::size_t>(r)]);
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Percentile with linear interpolation between closest ranks, via nth_element on a copy.
inline double percentile(std::vector<double> values, double q) {
  const double h = (static_cast<double>(values.size()) - 1) * q;
  const auto lo = static_cast<std::size_t>(h);
  std::nth_element(values.begin(), values.begin() + static_cast<long>(lo), values.end());
  const double a = values[lo];
  if (lo + 1 >= values.size()) return a;
  std::nth_element(values.begin(), values.begin() + static_cast<long>(lo + 1), values.end());
  const double b = values[lo + 1];
  return a + (h - static_cast<double>(lo)) * (b - a);
}

/// Shortest flipping perturbation found along random directions for the linear
/// decision w.x + b. Each direction u contributes the distance t at which the sign flips.
inline double brute_force_flip_distance(const Vector& v, const Vector& w, double b, int directions,
                                        std::mt19937_64& gen) {
  std::normal_distribution<double> normal;
  const double logit = w.dot(v) + b;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < directions; ++i) {
    Vector u(v.size());
    for (Eigen::Index j = 0; j < u.size(); ++j) u(j) = normal(gen);
    u.normalize();
    const double slope = w.dot(u);
    if (slope == 0) continue;
    const double t = -logit / slope;
    if (t > 0) best = std::min(best, t);
  }
  return best;
}

/// Per-image confusion tally with fake as positive.
struct Tally {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
};

inline Tally tally(const std::vector<int>& truth, const std::vector<int>& predicted) {
  Tally t;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 1 && predicted[i] == 1) ++t.tp;
    if (truth[i] == 0 && predicted[i] == 0) ++t.tn;
    if (truth[i] == 0 && predicted[i] == 1) ++t.fp;
    if (truth[i] == 1 && predicted[i] == 0) ++t.fn;
  }
  return t;
}

/// Symmetric KL between two disjoint single-bin histograms with additive smoothing
/// alpha over `bins` bins.
inline double disjoint_kl(double alpha, int bins) {
  const double z = 1 + bins * alpha;
  const double hi = (1 + alpha) / z, lo = alpha / z;
  // Two bins differ; every other bin is equal and contributes nothing.
  return 2 * ((hi - lo) * std::log(hi / lo));
}

}  // namespace oracle
