#include "fakescope/service.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "fakescope/artifact.hpp"
#include "fakescope/error.hpp"
#include "fakescope/rng.hpp"

namespace fs = std::filesystem;

namespace fakescope {

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string checksum_of(const std::string& bytes) { return hex64(fnv1a(bytes.data(), bytes.size())); }

json vector_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Vector vector_from_json(const json& a) {
  Vector v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
  return v;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string filter_name(MemberFilter f) {
  switch (f) {
    case MemberFilter::All: return "all";
    case MemberFilter::Correct: return "correct";
    case MemberFilter::Incorrect: return "incorrect";
  }
  return "all";
}

json cell_key(CellId id) { return json::array({id.row, id.col}); }

std::string cell_file(CellId id) { return std::to_string(id.row) + "_" + std::to_string(id.col); }

fs::path resolve_against(const fs::path& p, const fs::path& base) {
  return p.is_relative() ? base / p : p;
}

// Value and contribution distributions over a member subset.
json distribution_payload(std::span<const std::size_t> members, const std::vector<DistilledVector>& distilled,
                          const std::vector<Label>& labels, const std::vector<Prediction>& predictions,
                          const DetectorModel& model, const DimensionRanges& ranges, const std::string& scope,
                          MemberFilter filter) {
  std::vector<Vector> values;
  std::vector<Label> value_labels;
  std::vector<Vector> contributions;
  std::unique_ptr<bool[]> correct(new bool[members.size()]);
  for (std::size_t k = 0; k < members.size(); ++k) {
    const std::size_t i = members[k];
    const bool ok = predictions[i].label == labels[i];
    contributions.push_back(contribution_scores(distilled[i], model).c);
    correct[k] = ok;
    if (filter == MemberFilter::All || (filter == MemberFilter::Correct) == ok) {
      values.push_back(distilled[i].values);
      value_labels.push_back(labels[i]);
    }
  }
  json out{{"scope", scope}, {"filter", filter_name(filter)}, {"count", values.size()}};
  json dims = json::array();
  if (!values.empty()) {
    for (const auto& d : dimension_distributions(values, value_labels, ranges, scope)) dims.push_back(to_json(d));
  }
  out["values"] = dims;
  const auto summaries =
      contribution_distributions(contributions, std::span<const bool>(correct.get(), members.size()), filter);
  if (summaries) {
    json arr = json::array();
    for (const auto& s : *summaries) arr.push_back(to_json(s));
    out["contributions"] = arr;
  } else {
    out["contributions"] = nullptr;
  }
  return out;
}

DimensionRanges ranges_from_json(const json& j) {
  return {vector_from_json(j.at("lo")), vector_from_json(j.at("hi"))};
}

}  // namespace

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string cache_name(const std::string& image_id) {
  const bool safe = !image_id.empty() && image_id[0] != '.' &&
                    std::all_of(image_id.begin(), image_id.end(), [](unsigned char c) {
                      return std::isalnum(c) || c == '.' || c == '_' || c == '-';
                    });
  if (safe) return image_id;
  std::string out = "x";
  for (unsigned char c : image_id) {
    char buf[3];
    std::snprintf(buf, sizeof buf, "%02x", c);
    out += buf;
  }
  return out;
}

json to_json(const ConfusionStats& s) {
  return {{"tp", s.tp},
          {"tn", s.tn},
          {"fp", s.fp},
          {"fn", s.fn},
          {"accuracy", s.accuracy},
          {"sensitivity", optional_json(s.sensitivity)},
          {"specificity", optional_json(s.specificity)}};
}

json to_json(const Prediction& p) {
  return {{"logit", p.logit},
          {"prob_fake", p.prob_fake},
          {"label", static_cast<int>(p.label)},
          {"confidence", p.confidence}};
}

json to_json(const DimensionDistribution& d) {
  json j{{"dim", d.dim}, {"edges", d.edges}, {"kl", optional_json(d.kl)}, {"scope", d.scope}};
  j["real_hist"] = d.real_hist.empty() ? json(nullptr) : json(d.real_hist);
  j["fake_hist"] = d.fake_hist.empty() ? json(nullptr) : json(d.fake_hist);
  return j;
}

json to_json(const ContributionSummary& s) {
  return {{"dim", s.dim},       {"count", s.count}, {"min", s.min},   {"q1", s.q1},
          {"median", s.median}, {"q3", s.q3},       {"max", s.max},   {"mean", s.mean},
          {"density", {{"x", s.density_x}, {"y", s.density_y}}}};
}

json contribution_export(const ContributionVector& c, const Prediction& p) {
  json waterfall = json::array();
  for (const auto& step : waterfall_data(c)) {
    waterfall.push_back({{"dim", step.dim}, {"contribution", step.contribution}, {"cumulative", step.cumulative}});
  }
  return {{"image_id", c.source_id},
          {"s", vector_json(c.s)},
          {"c", vector_json(c.c)},
          {"logit", p.logit},
          {"label", static_cast<int>(p.label)},
          {"degenerate", c.degenerate},
          {"low_magnitude", c.low_magnitude},
          {"waterfall", waterfall}};
}

json to_json(const Annotation& a) {
  return {{"id", a.id},
          {"snapshot_id", a.snapshot_id},
          {"cell", cell_key(a.cell)},
          {"text", a.text},
          {"created_at", a.created_at},
          {"author", a.author ? json(*a.author) : json(nullptr)}};
}

// ---------------------------------------------------------------------------
// Build

SnapshotSummary build_snapshot(const DatasetManifest& manifest, const fs::path& checkpoint, const fs::path& out,
                               const SnapshotConfig& config) {
  if (config.grid < 1) throw Error(ErrorKind::Argument, "grid size must be at least 1");
  if (manifest.records.empty()) throw Error(ErrorKind::Argument, "manifest has no records");
  fs::path target = fs::absolute(out).lexically_normal();
  if (target.filename().empty()) target = target.parent_path();
  const std::string id = target.filename().string();
  if (id.empty() || id[0] == '.') throw Error(ErrorKind::Argument, "invalid snapshot directory " + out.string());
  if (fs::exists(target)) throw Error(ErrorKind::Argument, "snapshot already exists: " + target.string());

  const DetectorModel model = load_checkpoint(checkpoint);
  const std::string adapter_spec = !config.adapter.empty() ? config.adapter
                                   : !model.adapter.empty() ? model.adapter
                                                            : "mock";
  fs::path projection_path = config.projection;
  if (projection_path.empty()) {
    if (model.projection.empty()) throw Error(ErrorKind::Argument, "checkpoint names no projection; pass one");
    projection_path = resolve_against(model.projection, checkpoint.parent_path());
  }
  const ForgetProjection projection = load_projection(projection_path);
  if (projection.provenance == ProjectionProvenance::Bypass) {
    throw Error(ErrorKind::Validation, "bypass projections cannot be used for snapshots");
  }
  const auto adapter = make_adapter(adapter_spec);

  const auto batch = encode_visual_batch(manifest.records, *adapter, projection);
  std::vector<std::size_t> ok;
  json errors = json::array();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].embedding) {
      ok.push_back(i);
    } else {
      errors.push_back({{"image_id", batch[i].source_id}, {"error", batch[i].error}});
    }
  }
  if (ok.size() < 2) throw Error(ErrorKind::Argument, "fewer than two images encoded successfully");

  std::vector<DistilledVector> distilled;
  std::vector<Prediction> predictions;
  std::vector<Label> labels;
  for (std::size_t i : ok) {
    distilled.push_back(distill(batch[i].embedding->vector, model, batch[i].source_id));
    predictions.push_back(predict(distilled.back(), model));
    labels.push_back(manifest.records[i].label);
  }

  const auto points = project_2d(distilled, config.seed, config.tsne);
  auto cells = assign_grid(points, config.grid);
  std::vector<std::optional<Prediction>> optional_predictions(predictions.begin(), predictions.end());

  std::string points_text, distilled_text, contributions_text;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const CellId cell = cell_of(points[i], config.grid);
    json p{{"image_id", points[i].image_id},
           {"x", points[i].x},
           {"y", points[i].y},
           {"cell", cell_key(cell)},
           {"label", static_cast<int>(labels[i])},
           {"prediction", to_json(predictions[i])},
           {"correct", predictions[i].label == labels[i]}};
    points_text += p.dump() + "\n";
    distilled_text += json{{"image_id", points[i].image_id}, {"v", vector_json(distilled[i].values)}}.dump() + "\n";
    contributions_text += contribution_export(contribution_scores(distilled[i], model), predictions[i]).dump() + "\n";
  }

  json cells_json{{"grid", config.grid}, {"cells", json::array()}};
  for (const auto& cell : cells) {
    const CellStats stats = cell_statistics(cell.members, optional_predictions, labels);
    json sectors = json::array();
    for (const auto& s : stats.sector_confidence) sectors.push_back(optional_json(s));
    cells_json["cells"].push_back({{"row", cell.id.row},
                                   {"col", cell.id.col},
                                   {"member_ids", cell.member_ids},
                                   {"stats", to_json(stats.stats)},
                                   {"sector_confidence", sectors}});
  }

  std::vector<Vector> values;
  for (const auto& d : distilled) values.push_back(d.values);
  const DimensionRanges ranges = global_ranges(values);
  std::vector<std::size_t> all(points.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  json dims{{"ranges", {{"lo", vector_json(ranges.lo)}, {"hi", vector_json(ranges.hi)}}}, {"global", json::object()}};
  for (MemberFilter f : {MemberFilter::All, MemberFilter::Correct, MemberFilter::Incorrect}) {
    dims["global"][filter_name(f)] =
        distribution_payload(all, distilled, labels, predictions, model, ranges, "global", f);
  }

  DatasetManifest kept;
  kept.name = manifest.name;
  for (const auto& r : manifest.records) {
    ImageRecord copy = r;
    copy.path = fs::absolute(r.path);
    kept.records.push_back(std::move(copy));
  }

  std::map<std::string, std::string> files{
      {"points.jsonl", points_text},
      {"cells.json", cells_json.dump() + "\n"},
      {"dimensions.json", dims.dump() + "\n"},
      {"distilled.jsonl", distilled_text},
      {"contributions.jsonl", contributions_text},
      {"manifest.jsonl", manifest_to_jsonl(kept)},
      {"checkpoint.bin", read_file(checkpoint)},
      {"projection.bin", read_file(projection_path)},
  };

  json checksums = json::object();
  for (const auto& [name, bytes] : files) checksums[name] = checksum_of(bytes);
  json meta{{"snapshot_id", id},
            {"dataset", manifest.name},
            {"created_at", utc_timestamp()},
            {"checkpoint", {{"source", fs::absolute(checkpoint).string()}, {"file", "checkpoint.bin"}}},
            {"projection", {{"source", fs::absolute(projection_path).string()}, {"file", "projection.bin"}}},
            {"adapter", adapter_spec},
            {"adapter_checksum", hex64(adapter->parameter_checksum())},
            {"grid", config.grid},
            {"seed", config.seed},
            {"points", points.size()},
            {"cells", cells.size()},
            {"errors", errors},
            {"checksums", checksums}};

  const fs::path parent = target.parent_path();
  fs::create_directories(parent);
  const fs::path temp = parent / ("." + id + ".tmp-" + std::to_string(::getpid()));
  fs::remove_all(temp);
  try {
    fs::create_directories(temp / "relevance");
    fs::create_directories(temp / "concepts");
    for (const auto& [name, bytes] : files) write_file_atomic(temp / name, bytes);
    write_file_atomic(temp / "meta.json", meta.dump(2) + "\n");
    fs::rename(temp, target);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(temp, ec);
    throw;
  }
  return {id, target, points.size(), cells.size(), errors.size()};
}

// ---------------------------------------------------------------------------
// Snapshot

Snapshot::Snapshot(fs::path dir) : dir_(std::move(dir)) {
  if (!fs::exists(dir_ / "meta.json")) throw Error(ErrorKind::NotFound, "no snapshot at " + dir_.string());
  try {
    meta_ = json::parse(read_file(dir_ / "meta.json"));
    id_ = meta_.at("snapshot_id").get<std::string>();
    grid_ = meta_.at("grid").get<int>();
    seed_ = meta_.at("seed").get<std::uint64_t>();

    points_text_ = read_file(dir_ / "points.jsonl");
    cells_text_ = read_file(dir_ / "cells.json");
    dimensions_ = json::parse(read_file(dir_ / "dimensions.json"));
    ranges_ = ranges_from_json(dimensions_.at("ranges"));
    detector_ = load_checkpoint(dir_ / "checkpoint.bin");

    std::istringstream points(points_text_);
    std::string line;
    while (std::getline(points, line)) {
      if (line.empty()) continue;
      const json p = json::parse(line);
      const std::size_t i = points_.size();
      points_.push_back({p.at("image_id").get<std::string>(), p.at("x").get<double>(), p.at("y").get<double>()});
      labels_.push_back(static_cast<Label>(p.at("label").get<int>()));
      predictions_.push_back(prediction_from_logit(p.at("prediction").at("logit").get<double>()));
      index_[points_.back().image_id] = i;
    }
    distilled_.resize(points_.size());
    std::istringstream distilled(read_file(dir_ / "distilled.jsonl"));
    while (std::getline(distilled, line)) {
      if (line.empty()) continue;
      const json d = json::parse(line);
      const auto id = d.at("image_id").get<std::string>();
      const auto it = index_.find(id);
      if (it == index_.end()) throw Error(ErrorKind::Validation, "distilled vector for unknown image " + id);
      distilled_[it->second] = {vector_from_json(d.at("v")), id};
    }

    const json cells = json::parse(cells_text_);
    for (const auto& c : cells.at("cells")) {
      const CellId cell{c.at("row").get<int>(), c.at("col").get<int>()};
      cells_[cell] = c;
      auto& members = members_[cell];
      for (const auto& m : c.at("member_ids")) members.push_back(index_.at(m.get<std::string>()));
    }
    manifest_ = load_manifest(dir_ / "manifest.jsonl");
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Validation, "malformed snapshot " + dir_.string() + ": " + e.what());
  }
}

std::optional<std::size_t> Snapshot::index_of(const std::string& image_id) const {
  const auto it = index_.find(image_id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const json& Snapshot::cell(CellId id) const {
  const auto it = cells_.find(id);
  if (it == cells_.end()) {
    throw Error(ErrorKind::NotFound, "cell " + std::to_string(id.row) + "," + std::to_string(id.col) +
                                         " is empty or outside the " + std::to_string(grid_) + "x" +
                                         std::to_string(grid_) + " grid");
  }
  return it->second;
}

const std::vector<std::size_t>& Snapshot::cell_members(CellId id) const {
  cell(id);
  return members_.at(id);
}

json Snapshot::layout(CellId id) const {
  const auto& members = cell_members(id);
  std::vector<ProjectedPoint> pts;
  for (std::size_t i : members) pts.push_back(points_[i]);
  const CellLayout layout = isomatch_layout(pts);
  json slots = json::array();
  for (const auto& s : layout.slots) slots.push_back({{"image_id", s.image_id}, {"row", s.row}, {"col", s.col}});
  return {{"cell", cell_key(id)}, {"rows", layout.rows}, {"cols", layout.cols}, {"slots", slots},
          {"cost", layout.cost}};
}

json Snapshot::contributions(const std::string& image_id) const {
  const auto i = index_of(image_id);
  if (!i) throw Error(ErrorKind::NotFound, "unknown image " + image_id);
  return contribution_export(contribution_scores(distilled_[*i], detector_), predictions_[*i]);
}

json Snapshot::whatif(const std::string& image_id, double epsilon, WhatIfMode mode) const {
  const auto i = index_of(image_id);
  if (!i) throw Error(ErrorKind::NotFound, "unknown image " + image_id);
  const WhatIfResult r = whatif_counterfactual(distilled_[*i], detector_, epsilon, mode);
  return {{"image_id", image_id},
          {"mode", mode == WhatIfMode::Joint ? "joint" : "axis"},
          {"epsilon", r.epsilon},
          {"vector", vector_json(distilled_[*i].values)},
          {"delta", vector_json(r.delta)},
          {"new_vector", vector_json(r.new_vector)},
          {"old_prediction", to_json(r.old_prediction)},
          {"new_prediction", to_json(r.new_prediction)},
          {"new_contributions", contribution_export(contribution_scores({r.new_vector, image_id}, detector_),
                                                    r.new_prediction)},
          {"head_w", vector_json(detector_.head_w)},
          {"head_b", detector_.head_b}};
}

json Snapshot::dimensions(const std::optional<CellId>& cell, MemberFilter filter) const {
  if (!cell) return dimensions_.at("global").at(filter_name(filter));
  const auto& members = cell_members(*cell);
  json out = distribution_payload(members, distilled_, labels_, predictions_, detector_, ranges_, "cell", filter);
  out["cell"] = cell_key(*cell);
  return out;
}

const DetectorPipeline& Snapshot::pipeline() const {
  std::call_once(pipeline_once_, [this] {
    adapter_ = make_adapter(meta_.at("adapter").get<std::string>());
    projection_ = std::make_unique<ForgetProjection>(load_projection(dir_ / "projection.bin"));
    pipeline_ = std::make_unique<DetectorPipeline>(DetectorPipeline{*adapter_, *projection_, detector_});
  });
  return *pipeline_;
}

fs::path Snapshot::relevance_path(const std::string& image_id) const {
  return dir_ / "relevance" / (cache_name(image_id) + ".bin");
}

std::shared_ptr<const RelevanceStack> Snapshot::relevance(const std::string& image_id) const {
  if (!index_of(image_id)) throw Error(ErrorKind::NotFound, "unknown image " + image_id);
  std::promise<std::shared_ptr<const RelevanceStack>> promise;
  std::shared_future<std::shared_ptr<const RelevanceStack>> future;
  bool owner = false;
  {
    std::lock_guard lock(cache_mutex_);
    auto it = relevance_.find(image_id);
    if (it == relevance_.end()) {
      future = promise.get_future().share();
      relevance_.emplace(image_id, future);
      owner = true;
    } else {
      future = it->second;
    }
  }
  if (owner) {
    try {
      const fs::path path = relevance_path(image_id);
      if (fs::exists(path)) {
        promise.set_value(std::make_shared<const RelevanceStack>(load_relevance_cache(path)));
      } else {
        const ImageRecord* record = manifest_.find(image_id);
        if (!record) throw Error(ErrorKind::NotFound, "image " + image_id + " missing from the snapshot manifest");
        const auto& pipe = pipeline();
        const PixelTensor px = load_pixels(*record, pipe.adapter.info().input_size);
        auto stack = std::make_shared<RelevanceStack>(relevance_stack(px, pipe, record->height, record->width));
        stack->source_id = image_id;
        relevance_computations_.fetch_add(1);
        save_relevance_cache(path, *stack, pipe.adapter.info().patch_grid);
        promise.set_value(std::move(stack));
      }
    } catch (...) {
      promise.set_exception(std::current_exception());
      std::lock_guard lock(cache_mutex_);
      relevance_.erase(image_id);
    }
  }
  return future.get();
}

json Snapshot::concepts(CellId id) const {
  const auto& members = cell_members(id);
  std::promise<json> promise;
  std::shared_future<json> future;
  bool owner = false;
  {
    std::lock_guard lock(cache_mutex_);
    auto it = concepts_.find(id);
    if (it == concepts_.end()) {
      future = promise.get_future().share();
      concepts_.emplace(id, future);
      owner = true;
    } else {
      future = it->second;
    }
  }
  if (owner) {
    try {
      const fs::path path = dir_ / "concepts" / (cell_file(id) + ".json");
      if (fs::exists(path)) {
        promise.set_value(json::parse(read_file(path)));
      } else {
        std::vector<Segment> segments;
        json errors = json::array();
        for (std::size_t i : members) {
          const std::string& image_id = points_[i].image_id;
          try {
            const auto stack = relevance(image_id);
            const auto found = extract_segments(image_id, *stack);
            segments.insert(segments.end(), found.begin(), found.end());
          } catch (const std::exception& e) {
            errors.push_back({{"image_id", image_id}, {"error", e.what()}});
          }
        }
        const auto image_for = [this](const std::string& image_id) {
          const ImageRecord* record = manifest_.find(image_id);
          if (!record) throw Error(ErrorKind::NotFound, "image " + image_id + " missing from the snapshot manifest");
          return decode_image(record->path);
        };
        const ConceptResult result = cluster_concepts(segments, image_for, pipeline(), seed_);
        for (const auto& e : result.errors) errors.push_back({{"error", e}});
        json clusters = json::array();
        for (const auto& c : result.clusters) {
          json segs = json::array();
          for (const auto& s : c.segments) {
            segs.push_back({{"image_id", s.image_id},
                            {"box", {s.box.x0, s.box.y0, s.box.x1, s.box.y1}},
                            {"dim", s.dim}});
          }
          clusters.push_back({{"cluster_id", c.cluster_id}, {"centroid", vector_json(c.centroid)}, {"segments", segs}});
        }
        json out{{"cell", cell_key(id)},
                 {"clusters", clusters},
                 {"segments", segments.size()},
                 {"underfilled", result.underfilled},
                 {"errors", errors}};
        write_file_atomic(path, out.dump() + "\n");
        promise.set_value(std::move(out));
      }
    } catch (...) {
      promise.set_exception(std::current_exception());
      std::lock_guard lock(cache_mutex_);
      concepts_.erase(id);
    }
  }
  return future.get();
}

// ---------------------------------------------------------------------------
// Store

SnapshotStore::SnapshotStore(fs::path root) : root_(std::move(root)) {
  if (!fs::is_directory(root_)) throw Error(ErrorKind::Load, "snapshot store not found: " + root_.string());
}

std::vector<std::string> SnapshotStore::list() const {
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(root_)) {
    const std::string name = entry.path().filename().string();
    if (name.empty() || name[0] == '.' || !entry.is_directory()) continue;
    if (fs::exists(entry.path() / "meta.json")) ids.push_back(name);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::shared_ptr<Snapshot> SnapshotStore::get(const std::string& id) const {
  if (id.empty() || id[0] == '.' || id.find('/') != std::string::npos || id == "..") {
    throw Error(ErrorKind::NotFound, "unknown snapshot " + id);
  }
  std::lock_guard lock(mutex_);
  if (auto it = loaded_.find(id); it != loaded_.end()) return it->second;
  const fs::path dir = root_ / id;
  if (!fs::exists(dir / "meta.json")) throw Error(ErrorKind::NotFound, "unknown snapshot " + id);
  auto snapshot = std::make_shared<Snapshot>(dir);
  loaded_.emplace(id, snapshot);
  return snapshot;
}

// ---------------------------------------------------------------------------
// Annotations

AnnotationStore::AnnotationStore(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

fs::path AnnotationStore::log_path(const std::string& snapshot_id) const {
  return dir_ / (cache_name(snapshot_id) + ".jsonl");
}

namespace {

struct LogState {
  std::vector<Annotation> live;
  std::size_t entries = 0;
};

LogState replay(const fs::path& path) {
  LogState state;
  std::ifstream in(path);
  std::string line;
  std::map<std::string, std::size_t> position;
  std::vector<std::optional<Annotation>> ordered;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json e;
    try {
      e = json::parse(line);
    } catch (const json::exception&) {
      continue;  // torn trailing write
    }
    ++state.entries;
    const std::string op = e.value("op", "");
    if (op == "add") {
      Annotation a;
      a.id = e.at("id").get<std::string>();
      a.snapshot_id = e.at("snapshot_id").get<std::string>();
      a.cell = {e.at("cell")[0].get<int>(), e.at("cell")[1].get<int>()};
      a.text = e.at("text").get<std::string>();
      a.created_at = e.at("created_at").get<std::string>();
      if (e.contains("author") && e["author"].is_string()) a.author = e["author"].get<std::string>();
      position[a.id] = ordered.size();
      ordered.push_back(std::move(a));
    } else if (op == "remove") {
      const auto it = position.find(e.at("id").get<std::string>());
      if (it != position.end()) ordered[it->second].reset();
    }
  }
  for (auto& a : ordered) {
    if (a) state.live.push_back(std::move(*a));
  }
  return state;
}

void append_line(const fs::path& path, const json& entry) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw Error(ErrorKind::Load, "cannot open annotation log " + path.string());
  out << entry.dump() << '\n';
  out.flush();
  if (!out) throw Error(ErrorKind::Load, "cannot write annotation log " + path.string());
}

}  // namespace

Annotation AnnotationStore::add(const Snapshot& snapshot, CellId cell, const std::string& text,
                                std::optional<std::string> author) {
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw Error(ErrorKind::Validation, "annotation text must be nonempty");
  }
  snapshot.cell(cell);
  std::lock_guard lock(mutex_);
  const fs::path path = log_path(snapshot.id());
  const LogState state = replay(path);
  char id[24];
  std::snprintf(id, sizeof id, "ann-%06zu", state.entries + 1);
  Annotation a{id, snapshot.id(), cell, text, utc_timestamp(), std::move(author)};
  json entry = to_json(a);
  entry["op"] = "add";
  append_line(path, entry);
  return a;
}

std::vector<Annotation> AnnotationStore::list(const std::string& snapshot_id) const {
  std::lock_guard lock(mutex_);
  return replay(log_path(snapshot_id)).live;
}

void AnnotationStore::remove(const std::string& snapshot_id, const std::string& annotation_id) {
  std::lock_guard lock(mutex_);
  const fs::path path = log_path(snapshot_id);
  const LogState state = replay(path);
  const bool live = std::any_of(state.live.begin(), state.live.end(),
                                [&](const Annotation& a) { return a.id == annotation_id; });
  if (!live) throw Error(ErrorKind::NotFound, "no annotation " + annotation_id);
  append_line(path, {{"op", "remove"}, {"id", annotation_id}, {"removed_at", utc_timestamp()}});
}

}  // namespace fakescope
