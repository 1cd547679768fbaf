#include "fakescope/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>

#include "fakescope/error.hpp"
#include "fakescope/rng.hpp"

namespace fakescope {

// ---------------------------------------------------------------------------
// Projection and grid

std::vector<ProjectedPoint> project_2d(std::span<const DistilledVector> vectors, std::uint64_t seed,
                                       const TsneOptions& options) {
  if (vectors.size() < 2) throw Error(ErrorKind::Argument, "projection needs at least two vectors");
  const auto dims = vectors.front().values.size();
  Matrix data(static_cast<Eigen::Index>(vectors.size()), dims);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].values.size() != dims) throw Error(ErrorKind::Argument, "vectors differ in length");
    data.row(static_cast<Eigen::Index>(i)) = vectors[i].values.transpose();
  }
  const Matrix y = tsne_embed(data, seed, options);
  std::vector<ProjectedPoint> points(vectors.size());
  for (int axis = 0; axis < 2; ++axis) {
    const double lo = y.col(axis).minCoeff();
    const double span = y.col(axis).maxCoeff() - lo;
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      const double v = span > 0 ? (y(static_cast<Eigen::Index>(i), axis) - lo) / span : 0.0;
      (axis == 0 ? points[i].x : points[i].y) = std::clamp(v, 0.0, 1.0);
    }
  }
  for (std::size_t i = 0; i < vectors.size(); ++i) points[i].image_id = vectors[i].source_id;
  return points;
}

CellId cell_of(const ProjectedPoint& p, int m) {
  auto index = [m](double v) {
    return std::clamp(static_cast<int>(std::floor(v * m)), 0, m - 1);
  };
  return {index(p.y), index(p.x)};
}

std::vector<GridCell> assign_grid(std::span<const ProjectedPoint> points, int m) {
  if (m < 1) throw Error(ErrorKind::Argument, "grid size must be at least 1");
  std::map<CellId, GridCell> cells;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const CellId id = cell_of(points[i], m);
    GridCell& cell = cells[id];
    cell.id = id;
    cell.members.push_back(i);
    cell.member_ids.push_back(points[i].image_id);
  }
  std::vector<GridCell> out;
  out.reserve(cells.size());
  for (auto& [id, cell] : cells) out.push_back(std::move(cell));
  return out;
}

CellStats cell_statistics(std::span<const std::size_t> members, std::span<const std::optional<Prediction>> predictions,
                          std::span<const Label> labels) {
  std::vector<Label> truth, said;
  std::array<double, 4> confidence_sum{};
  std::array<std::size_t, 4> counts{};
  for (std::size_t i : members) {
    if (i >= predictions.size() || i >= labels.size() || !predictions[i]) {
      throw Error(ErrorKind::Internal, "missing prediction for cell member " + std::to_string(i));
    }
    const Prediction& p = *predictions[i];
    truth.push_back(labels[i]);
    said.push_back(p.label);
    const bool fake = labels[i] == Label::Fake;
    const bool said_fake = p.label == Label::Fake;
    const int sector = fake ? (said_fake ? kTruePositive : kFalseNegative)
                            : (said_fake ? kFalsePositive : kTrueNegative);
    confidence_sum[sector] += p.confidence;
    ++counts[sector];
  }
  CellStats out;
  out.stats = confusion(truth, said);
  for (int s = 0; s < 4; ++s) {
    if (counts[s] > 0) out.sector_confidence[s] = confidence_sum[s] / static_cast<double>(counts[s]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dimension distributions

DimensionRanges global_ranges(std::span<const Vector> vectors) {
  if (vectors.empty()) throw Error(ErrorKind::Argument, "no vectors for dimension ranges");
  DimensionRanges r{vectors.front(), vectors.front()};
  for (const Vector& v : vectors) {
    r.lo = r.lo.cwiseMin(v);
    r.hi = r.hi.cwiseMax(v);
  }
  return r;
}

std::vector<double> smoothed_histogram(std::span<const double> values, double lo, double hi, int bins) {
  std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
  if (values.empty()) return {};
  for (double v : values) {
    int b = 0;
    if (hi > lo) b = std::clamp(static_cast<int>(std::floor((v - lo) / (hi - lo) * bins)), 0, bins - 1);
    h[static_cast<std::size_t>(b)] += 1.0;
  }
  const double n = static_cast<double>(values.size());
  const double denom = 1.0 + bins * kHistogramSmoothing;
  for (double& x : h) x = (x / n + kHistogramSmoothing) / denom;
  return h;
}

double symmetric_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error(ErrorKind::Internal, "histograms differ in length");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] != q[i]) kl += (p[i] - q[i]) * std::log(p[i] / q[i]);
  }
  return kl;
}

std::vector<DimensionDistribution> dimension_distributions(std::span<const Vector> vectors,
                                                           std::span<const Label> labels,
                                                           const DimensionRanges& ranges, const std::string& scope) {
  if (vectors.size() != labels.size()) throw Error(ErrorKind::Argument, "vectors and labels differ in count");
  const auto dims = ranges.lo.size();
  std::vector<DimensionDistribution> out;
  for (Eigen::Index d = 0; d < dims; ++d) {
    std::vector<double> real, fake;
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      (labels[i] == Label::Fake ? fake : real).push_back(vectors[i](d));
    }
    DimensionDistribution dist;
    dist.dim = static_cast<int>(d) + 1;
    dist.scope = scope;
    const double lo = ranges.lo(d), hi = ranges.hi(d);
    const int bins = hi > lo ? kHistogramBins : 1;
    for (int b = 0; b <= bins; ++b) dist.edges.push_back(lo + (hi - lo) * b / bins);
    if (bins == 1) dist.edges.back() = hi;
    dist.real_hist = smoothed_histogram(real, lo, hi, bins);
    dist.fake_hist = smoothed_histogram(fake, lo, hi, bins);
    if (!real.empty() && !fake.empty()) dist.kl = bins == 1 ? 0.0 : symmetric_kl(dist.real_hist, dist.fake_hist);
    out.push_back(std::move(dist));
  }
  std::stable_sort(out.begin(), out.end(), [](const DimensionDistribution& a, const DimensionDistribution& b) {
    if (a.kl.has_value() != b.kl.has_value()) return a.kl.has_value();
    if (!a.kl) return false;
    return *a.kl < *b.kl;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Contribution distributions

std::optional<MemberFilter> parse_filter(std::string_view text) {
  if (text == "all") return MemberFilter::All;
  if (text == "correct") return MemberFilter::Correct;
  if (text == "incorrect") return MemberFilter::Incorrect;
  return std::nullopt;
}

double percentile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(ErrorKind::Argument, "percentile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::optional<std::vector<ContributionSummary>> contribution_distributions(std::span<const Vector> contributions,
                                                                           std::span<const bool> correct,
                                                                           MemberFilter filter) {
  if (contributions.size() != correct.size()) throw Error(ErrorKind::Argument, "member count mismatch");
  std::vector<const Vector*> chosen;
  for (std::size_t i = 0; i < contributions.size(); ++i) {
    if (filter == MemberFilter::All || (filter == MemberFilter::Correct) == correct[i]) {
      chosen.push_back(&contributions[i]);
    }
  }
  if (chosen.empty()) return std::nullopt;

  constexpr int kDensitySamples = 41;
  const auto dims = chosen.front()->size();
  std::vector<ContributionSummary> out;
  for (Eigen::Index d = 0; d < dims; ++d) {
    std::vector<double> values;
    values.reserve(chosen.size());
    for (const Vector* c : chosen) values.push_back((*c)(d));
    std::sort(values.begin(), values.end());
    ContributionSummary s;
    s.dim = static_cast<int>(d) + 1;
    s.count = values.size();
    s.min = values.front();
    s.max = values.back();
    s.q1 = percentile_sorted(values, 0.25);
    s.median = percentile_sorted(values, 0.5);
    s.q3 = percentile_sorted(values, 0.75);
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());

    // Gaussian KDE with Silverman's bandwidth, sampled over [-1, 1].
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    const double sd = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
    const double iqr = (s.q3 - s.q1) / 1.34;
    double spread = iqr > 0 ? std::min(sd, iqr) : sd;
    double bandwidth = 0.9 * spread * std::pow(static_cast<double>(values.size()), -0.2);
    if (!(bandwidth > 1e-3)) bandwidth = 1e-3;
    const double norm = 1.0 / (static_cast<double>(values.size()) * bandwidth * std::sqrt(2 * std::numbers::pi));
    for (int k = 0; k < kDensitySamples; ++k) {
      const double x = -1.0 + 2.0 * k / (kDensitySamples - 1);
      double y = 0.0;
      for (double v : values) {
        const double z = (x - v) / bandwidth;
        y += std::exp(-0.5 * z * z);
      }
      s.density_x.push_back(x);
      s.density_y.push_back(y * norm);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Segments

double iou(const BoundingBox& a, const BoundingBox& b) {
  const int ix = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const int iy = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = static_cast<double>(ix) * iy;
  const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

std::optional<BoundingBox> largest_component(const PixelRelevanceMap& map, double tau) {
  if (map.degenerate || map.values.empty()) return std::nullopt;
  const float peak = *std::max_element(map.values.begin(), map.values.end());
  if (!(peak > 0.0f)) return std::nullopt;
  const double threshold = tau * peak;
  const int h = map.height, w = map.width;
  std::vector<int> label(map.values.size(), -1);
  std::optional<BoundingBox> best;
  std::size_t best_size = 0;
  std::deque<int> queue;
  int next = 0;
  for (int start = 0; start < h * w; ++start) {
    if (label[start] >= 0 || map.values[start] < threshold) continue;
    BoundingBox box{w, h, 0, 0};
    std::size_t size = 0;
    label[start] = next;
    queue.push_back(start);
    while (!queue.empty()) {
      const int idx = queue.front();
      queue.pop_front();
      const int y = idx / w, x = idx % w;
      ++size;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
      const int neighbours[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& n : neighbours) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const int j = n[0] * w + n[1];
        if (label[j] < 0 && map.values[j] >= threshold) {
          label[j] = next;
          queue.push_back(j);
        }
      }
    }
    ++next;
    if (size > best_size) {
      best_size = size;
      best = box;
    }
  }
  return best;
}

}  // namespace

std::vector<Segment> extract_segments(const std::string& image_id, const RelevanceStack& stack, double tau,
                                      double iou_max) {
  std::vector<Segment> kept;
  for (const auto& map : stack.maps) {
    const auto box = largest_component(map, tau);
    if (!box) continue;
    const bool duplicate =
        std::any_of(kept.begin(), kept.end(), [&](const Segment& s) { return iou(s.box, *box) > iou_max; });
    if (!duplicate) kept.push_back({image_id, *box, map.target_dim});
  }
  return kept;
}

// ---------------------------------------------------------------------------
// k-means

KMeansResult kmeans(std::span<const Vector> points, int k, std::uint64_t seed, int max_iterations) {
  const auto n = static_cast<int>(points.size());
  if (k < 1 || k > n) throw Error(ErrorKind::Argument, "k must be in 1..n");
  Rng rng(seed);
  KMeansResult r;
  std::vector<int> centers{static_cast<int>(rng.below(static_cast<std::uint64_t>(n)))};
  std::vector<double> nearest(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    const Vector& last = points[static_cast<std::size_t>(centers.back())];
    int far = -1;
    for (int i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], (points[i] - last).squaredNorm());
      if (far < 0 || nearest[i] > nearest[far]) far = i;
    }
    centers.push_back(far);
  }
  for (int c : centers) r.centroids.push_back(points[static_cast<std::size_t>(c)]);

  r.assignment.assign(static_cast<std::size_t>(n), -1);
  for (r.iterations = 0; r.iterations < max_iterations; ++r.iterations) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (points[i] - r.centroids[0]).squaredNorm();
      for (int c = 1; c < k; ++c) {
        const double d = (points[i] - r.centroids[c]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (r.assignment[i] != best) {
        r.assignment[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    for (int c = 0; c < k; ++c) {
      Vector sum = Vector::Zero(points.front().size());
      int count = 0;
      for (int i = 0; i < n; ++i) {
        if (r.assignment[i] == c) {
          sum += points[i];
          ++count;
        }
      }
      if (count > 0) r.centroids[c] = sum / count;  // empty clusters keep their centroid
    }
  }
  r.inertia = 0.0;
  for (int i = 0; i < n; ++i) r.inertia += (points[i] - r.centroids[r.assignment[i]]).squaredNorm();
  return r;
}

ConceptResult cluster_concepts(std::span<const Segment> segments,
                               const std::function<RgbImage(const std::string&)>& image_for,
                               const DetectorPipeline& pipeline, std::uint64_t seed) {
  ConceptResult result;
  std::vector<Vector> encoded;
  std::vector<Segment> kept;
  for (const Segment& s : segments) {
    try {
      const RgbImage image = image_for(s.image_id);
      const RgbImage patch = crop(image, s.box.x0, s.box.y0, s.box.x1, s.box.y1);
      const PixelTensor px = to_pixels(patch, pipeline.adapter.info().input_size, s.image_id);
      const VisualEmbedding visual = apply_forget_projection(encode_base(px, pipeline.adapter), pipeline.projection);
      encoded.push_back(distill(visual.vector, pipeline.detector).values);
      kept.push_back(s);
    } catch (const std::exception& e) {
      result.errors.push_back(s.image_id + ": " + e.what());
    }
  }
  result.underfilled = kept.size() < 3;
  if (kept.empty()) return result;
  const int k = std::min<int>(3, static_cast<int>(kept.size()));
  const KMeansResult km = kmeans(encoded, k, seed);
  for (int c = 0; c < k; ++c) {
    ConceptCluster cluster;
    cluster.cluster_id = c;
    cluster.centroid = km.centroids[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (km.assignment[i] == c) cluster.segments.push_back(kept[i]);
    }
    result.clusters.push_back(std::move(cluster));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Assignment layout

std::vector<int> solve_assignment(const Matrix& cost) {
  // Shortest augmenting path with potentials (Hungarian method), 1-based internally.
  const auto n = static_cast<int>(cost.rows());
  const auto m = static_cast<int>(cost.cols());
  if (n > m) throw Error(ErrorKind::Argument, "assignment needs rows <= cols");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> column(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] != 0) column[static_cast<std::size_t>(p[j] - 1)] = j - 1;
  }
  return column;
}

Matrix layout_cost_matrix(std::span<const ProjectedPoint> points, int rows, int cols) {
  const auto n = static_cast<Eigen::Index>(points.size());
  double min_x = std::numeric_limits<double>::infinity(), max_x = -min_x;
  double min_y = min_x, max_y = -min_x;
  for (const auto& p : points) {
    min_x = std::min(min_x, p.x);
    max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  auto scale = [](double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 0.0; };
  auto center = [](int i, int count) { return count > 1 ? static_cast<double>(i) / (count - 1) : 0.0; };
  Matrix cost(n, rows * cols);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double px = scale(points[static_cast<std::size_t>(i)].x, min_x, max_x);
    const double py = scale(points[static_cast<std::size_t>(i)].y, min_y, max_y);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const double dx = px - center(c, cols), dy = py - center(r, rows);
        cost(i, r * cols + c) = dx * dx + dy * dy;
      }
    }
  }
  return cost;
}

CellLayout isomatch_layout(std::span<const ProjectedPoint> points) {
  if (points.empty()) throw Error(ErrorKind::Argument, "layout needs at least one point");
  CellLayout layout;
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(points.size())) - 1e-12));
  layout.rows = layout.cols = std::max(side, 1);
  const Matrix cost = layout_cost_matrix(points, layout.rows, layout.cols);
  const std::vector<int> slot = solve_assignment(cost);
  for (std::size_t i = 0; i < points.size(); ++i) {
    layout.slots.push_back({points[i].image_id, slot[i] / layout.cols, slot[i] % layout.cols});
    layout.cost += cost(static_cast<Eigen::Index>(i), slot[i]);
  }
  return layout;
}

}  // namespace fakescope
