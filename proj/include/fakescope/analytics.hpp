#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fakescope/contribution.hpp"
#include "fakescope/detector.hpp"
#include "fakescope/relevance.hpp"
#include "fakescope/tsne.hpp"

namespace fakescope {

// ---------------------------------------------------------------------------
// Overview projection and grid

struct ProjectedPoint {
  std::string image_id;
  double x = 0;  // [0, 1]
  double y = 0;  // [0, 1]
};

/// t-SNE of the distilled vectors with perplexity min(30, n/4), min-max scaled per axis.
std::vector<ProjectedPoint> project_2d(std::span<const DistilledVector> vectors, std::uint64_t seed,
                                       const TsneOptions& options = {});

inline constexpr int kDefaultGridSize = 30;

struct CellId {
  int row = 0;
  int col = 0;
  auto operator<=>(const CellId&) const = default;
};

enum Sector { kTruePositive = 0, kTrueNegative = 1, kFalsePositive = 2, kFalseNegative = 3 };

struct GridCell {
  CellId id;
  std::vector<std::size_t> members;  // indices into the point list
  std::vector<std::string> member_ids;
  ConfusionStats stats;
  std::array<std::optional<double>, 4> sector_confidence;  // TP, TN, FP, FN; absent when empty
  std::optional<std::string> annotation;
};

CellId cell_of(const ProjectedPoint& p, int m);

/// Nonempty cells in (row, col) order; members keep point order.
std::vector<GridCell> assign_grid(std::span<const ProjectedPoint> points, int m = kDefaultGridSize);

struct CellStats {
  ConfusionStats stats;
  std::array<std::optional<double>, 4> sector_confidence;
};

/// Confusion counts (fake positive) and mean confidence per sector over `members`.
CellStats cell_statistics(std::span<const std::size_t> members, std::span<const std::optional<Prediction>> predictions,
                          std::span<const Label> labels);

// ---------------------------------------------------------------------------
// Dimension value distributions

inline constexpr int kHistogramBins = 32;
inline constexpr double kHistogramSmoothing = 1e-6;

struct DimensionRanges {
  Vector lo;
  Vector hi;
};

DimensionRanges global_ranges(std::span<const Vector> vectors);

struct DimensionDistribution {
  int dim = 0;  // 1-based
  std::vector<double> edges;
  std::vector<double> real_hist;  // empty when the scope has no real members
  std::vector<double> fake_hist;
  std::optional<double> kl;  // KL(real||fake) + KL(fake||real) on smoothed histograms
  std::string scope;
};

/// Smoothed probability histogram over fixed edges.
std::vector<double> smoothed_histogram(std::span<const double> values, double lo, double hi, int bins);

double symmetric_kl(std::span<const double> p, std::span<const double> q);

/// Ordered ascending by kl; dimensions without kl follow in index order.
std::vector<DimensionDistribution> dimension_distributions(std::span<const Vector> vectors,
                                                           std::span<const Label> labels,
                                                           const DimensionRanges& ranges, const std::string& scope);

// ---------------------------------------------------------------------------
// Contribution distributions

enum class MemberFilter { All, Correct, Incorrect };

std::optional<MemberFilter> parse_filter(std::string_view text);

struct ContributionSummary {
  int dim = 0;
  std::size_t count = 0;
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0;
  std::vector<double> density_x;
  std::vector<double> density_y;
};

/// Linear-interpolation percentile (q in [0,1]) of sorted data.
double percentile_sorted(std::span<const double> sorted, double q);

/// nullopt when no member matches the filter.
std::optional<std::vector<ContributionSummary>> contribution_distributions(std::span<const Vector> contributions,
                                                                           std::span<const bool> correct,
                                                                           MemberFilter filter);

// ---------------------------------------------------------------------------
// Concept segments and clustering

struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open

  long area() const { return static_cast<long>(x1 - x0) * (y1 - y0); }
  bool operator==(const BoundingBox&) const = default;
};

double iou(const BoundingBox& a, const BoundingBox& b);

struct Segment {
  std::string image_id;
  BoundingBox box;
  int dim = 0;
};

/// Largest 4-connected component at >= tau * max per map, deduplicated by IOU in dimension order.
std::vector<Segment> extract_segments(const std::string& image_id, const RelevanceStack& stack, double tau = 0.5,
                                      double iou_max = 0.5);

struct KMeansResult {
  std::vector<int> assignment;
  std::vector<Vector> centroids;
  int iterations = 0;
  double inertia = 0;
};

/// Lloyd iterations from a seeded farthest-point start.
KMeansResult kmeans(std::span<const Vector> points, int k, std::uint64_t seed, int max_iterations = 100);

struct ConceptCluster {
  int cluster_id = 0;
  std::vector<Segment> segments;
  Vector centroid;
};

struct ConceptResult {
  std::vector<ConceptCluster> clusters;
  bool underfilled = false;  // fewer than 3 segments were available
  std::vector<std::string> errors;
};

/// Crops each segment from its image, encodes it through the full pipeline into the
/// distilled space and clusters with k = 3.
ConceptResult cluster_concepts(std::span<const Segment> segments,
                               const std::function<RgbImage(const std::string&)>& image_for,
                               const DetectorPipeline& pipeline, std::uint64_t seed);

// ---------------------------------------------------------------------------
// In-cell layout

struct LayoutSlot {
  std::string image_id;
  int row = 0;
  int col = 0;
};

struct CellLayout {
  int rows = 0;
  int cols = 0;
  std::vector<LayoutSlot> slots;  // in input order
  double cost = 0;
};

/// Exact min-cost assignment; rows <= cols. Returns the column for each row.
std::vector<int> solve_assignment(const Matrix& cost);

/// Normalized point coordinates and slot centers in the unit square.
Matrix layout_cost_matrix(std::span<const ProjectedPoint> points, int rows, int cols);

/// ceil(sqrt(n)) square grid with points matched to slot centers at minimum total squared distance.
CellLayout isomatch_layout(std::span<const ProjectedPoint> points);

}  // namespace fakescope
