#pragma once

#include <atomic>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fakescope/analytics.hpp"
#include "fakescope/contribution.hpp"
#include "fakescope/dataset.hpp"
#include "fakescope/detector.hpp"
#include "fakescope/encoder.hpp"
#include "fakescope/relevance.hpp"

namespace fakescope {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Snapshot build

struct SnapshotConfig {
  int grid = kDefaultGridSize;
  std::uint64_t seed = 1;
  std::string adapter;                    // empty: the checkpoint's adapter
  std::filesystem::path projection;       // empty: the checkpoint's projection
  TsneOptions tsne;
};

struct SnapshotSummary {
  std::string id;
  std::filesystem::path dir;
  std::size_t points = 0;
  std::size_t cells = 0;
  std::size_t errors = 0;
};

/// Writes a complete snapshot bundle at `out` (whose file name becomes the snapshot id)
/// via a sibling temp directory and a rename. Fails if `out` already exists.
SnapshotSummary build_snapshot(const DatasetManifest& manifest, const std::filesystem::path& checkpoint,
                               const std::filesystem::path& out, const SnapshotConfig& config = {});

/// Filesystem-safe name for an image id (identity for [A-Za-z0-9._-], hex otherwise).
std::string cache_name(const std::string& image_id);

nlohmann::json to_json(const ConfusionStats& stats);
nlohmann::json to_json(const Prediction& p);
nlohmann::json to_json(const DimensionDistribution& d);
nlohmann::json to_json(const ContributionSummary& s);
nlohmann::json contribution_export(const ContributionVector& c, const Prediction& p);

// ---------------------------------------------------------------------------
// Loaded snapshot

/// Read-only view of a snapshot directory. Relevance stacks and cell concepts are
/// computed on first request, written to the bundle's cache folders and reused.
class Snapshot {
 public:
  explicit Snapshot(std::filesystem::path dir);

  const std::string& id() const { return id_; }
  const std::filesystem::path& dir() const { return dir_; }
  const nlohmann::json& meta() const { return meta_; }
  int grid() const { return grid_; }

  std::size_t size() const { return points_.size(); }
  std::optional<std::size_t> index_of(const std::string& image_id) const;
  const ProjectedPoint& point(std::size_t i) const { return points_[i]; }
  const DistilledVector& distilled(std::size_t i) const { return distilled_[i]; }
  const Prediction& prediction(std::size_t i) const { return predictions_[i]; }
  Label label(std::size_t i) const { return labels_[i]; }
  const DetectorModel& detector() const { return detector_; }

  const std::string& points_jsonl() const { return points_text_; }
  const std::string& cells_json() const { return cells_text_; }
  bool has_cell(CellId id) const { return cells_.count(id) > 0; }
  /// NotFound for empty or out-of-range cells.
  const nlohmann::json& cell(CellId id) const;
  const std::vector<std::size_t>& cell_members(CellId id) const;

  nlohmann::json layout(CellId id) const;
  nlohmann::json contributions(const std::string& image_id) const;
  nlohmann::json whatif(const std::string& image_id, double epsilon, WhatIfMode mode) const;
  /// Global scope is served from dimensions.json; cell scope is computed over the cell's members.
  nlohmann::json dimensions(const std::optional<CellId>& cell, MemberFilter filter) const;

  /// Thread-safe; each image's stack is computed at most once.
  std::shared_ptr<const RelevanceStack> relevance(const std::string& image_id) const;
  std::filesystem::path relevance_path(const std::string& image_id) const;
  nlohmann::json concepts(CellId id) const;

  /// Number of relevance stacks computed (not loaded from cache) by this instance.
  std::size_t relevance_computations() const { return relevance_computations_.load(); }

 private:
  const DetectorPipeline& pipeline() const;

  std::filesystem::path dir_;
  std::string id_;
  nlohmann::json meta_;
  int grid_ = kDefaultGridSize;
  std::uint64_t seed_ = 1;
  DatasetManifest manifest_;
  std::vector<ProjectedPoint> points_;
  std::vector<DistilledVector> distilled_;
  std::vector<Prediction> predictions_;
  std::vector<Label> labels_;
  std::map<std::string, std::size_t> index_;
  std::string points_text_;
  std::string cells_text_;
  nlohmann::json dimensions_;
  std::map<CellId, nlohmann::json> cells_;
  std::map<CellId, std::vector<std::size_t>> members_;
  DimensionRanges ranges_;
  DetectorModel detector_;

  mutable std::once_flag pipeline_once_;
  mutable std::unique_ptr<BaseEncoderAdapter> adapter_;
  mutable std::unique_ptr<ForgetProjection> projection_;
  mutable std::unique_ptr<DetectorPipeline> pipeline_;

  mutable std::mutex cache_mutex_;
  mutable std::map<std::string, std::shared_future<std::shared_ptr<const RelevanceStack>>> relevance_;
  mutable std::map<CellId, std::shared_future<nlohmann::json>> concepts_;
  mutable std::atomic<std::size_t> relevance_computations_{0};
};

/// Directory of snapshot bundles; hidden entries (temp builds) are ignored.
class SnapshotStore {
 public:
  explicit SnapshotStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::vector<std::string> list() const;
  /// NotFound when absent.
  std::shared_ptr<Snapshot> get(const std::string& id) const;

 private:
  std::filesystem::path root_;
  mutable std::mutex mutex_;
  mutable std::map<std::string, std::shared_ptr<Snapshot>> loaded_;
};

// ---------------------------------------------------------------------------
// Annotations

struct Annotation {
  std::string id;
  std::string snapshot_id;
  CellId cell;
  std::string text;
  std::string created_at;
  std::optional<std::string> author;
};

nlohmann::json to_json(const Annotation& a);

/// Append-only JSON-lines log per snapshot; removal appends a tombstone. All writes
/// go through one mutex.
class AnnotationStore {
 public:
  explicit AnnotationStore(std::filesystem::path dir);

  /// NotFound for a cell outside the snapshot, Validation for blank text.
  Annotation add(const Snapshot& snapshot, CellId cell, const std::string& text,
                 std::optional<std::string> author = std::nullopt);
  std::vector<Annotation> list(const std::string& snapshot_id) const;
  /// NotFound when the id is unknown or already removed.
  void remove(const std::string& snapshot_id, const std::string& annotation_id);

 private:
  std::filesystem::path log_path(const std::string& snapshot_id) const;

  std::filesystem::path dir_;
  mutable std::mutex mutex_;
};

std::string utc_timestamp();

}  // namespace fakescope
