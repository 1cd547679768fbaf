#include <doctest.h>

#include <fstream>
#include <set>
#include <thread>

#include "fakescope/artifact.hpp"
#include "fakescope/error.hpp"
#include "fakescope/service.hpp"
#include "../support/fixtures.hpp"

using namespace fakescope;
namespace fs = std::filesystem;

namespace {

struct Built {
  fixture::TrainedCorpus corpus{30, 4};
  fs::path store = corpus.dir.path / "store";
  SnapshotSummary summary = build_snapshot(corpus.manifest, corpus.checkpoint, store / "snap-a");
};

Built& built() {
  static Built b;
  return b;
}

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Internal;
}

}  // namespace

TEST_CASE("snapshot bundle contents") {
  const Built& b = built();
  CHECK(b.summary.id == "snap-a");
  CHECK(b.summary.points == 60);
  CHECK(b.summary.cells >= 1);
  CHECK(b.summary.cells <= 900);
  CHECK(b.summary.errors == 0);
  for (const char* name : {"points.jsonl", "cells.json", "dimensions.json", "distilled.jsonl", "contributions.jsonl",
                           "manifest.jsonl", "checkpoint.bin", "projection.bin", "meta.json"}) {
    CHECK(fs::is_regular_file(b.summary.dir / name));
  }
  CHECK(fs::is_directory(b.summary.dir / "relevance"));
  CHECK(fs::is_directory(b.summary.dir / "concepts"));
  for (const auto& entry : fs::directory_iterator(b.store)) CHECK(entry.path().filename().string()[0] != '.');

  const json meta = json::parse(read_file(b.summary.dir / "meta.json"));
  CHECK(meta.at("snapshot_id") == "snap-a");
  CHECK(meta.at("grid") == 30);
  CHECK(meta.at("points") == 60);
  CHECK(meta.at("adapter") == "mock");
  CHECK(meta.at("checksums").contains("cells.json"));

  const json cells = json::parse(read_file(b.summary.dir / "cells.json"));
  std::size_t members = 0;
  std::set<std::string> ids;
  for (const auto& c : cells.at("cells")) {
    const auto& stats = c.at("stats");
    const std::size_t n = c.at("member_ids").size();
    CHECK(stats.at("tp").get<std::size_t>() + stats.at("tn").get<std::size_t>() + stats.at("fp").get<std::size_t>() +
              stats.at("fn").get<std::size_t>() ==
          n);
    CHECK(c.at("sector_confidence").size() == 4);
    members += n;
    for (const auto& id : c.at("member_ids")) ids.insert(id.get<std::string>());
  }
  CHECK(members == 60);
  CHECK(ids.size() == 60);

  const json dims = json::parse(read_file(b.summary.dir / "dimensions.json"));
  CHECK(dims.at("global").at("all").at("values").size() == 16);
  CHECK(dims.at("ranges").at("lo").size() == 16);

  CHECK(kind_of([&] { build_snapshot(b.corpus.manifest, b.corpus.checkpoint, b.store / "snap-a"); }) ==
        ErrorKind::Argument);
}

TEST_CASE("snapshot builds are byte-identical for the same seed") {
  const Built& b = built();
  const auto again = build_snapshot(b.corpus.manifest, b.corpus.checkpoint, b.corpus.dir.path / "other" / "snap-b");
  for (const char* name : {"cells.json", "dimensions.json", "points.jsonl", "distilled.jsonl", "contributions.jsonl"}) {
    CHECK_MESSAGE(read_file(again.dir / name) == read_file(b.summary.dir / name), name);
  }
}

TEST_CASE("unreadable images are reported and skipped") {
  const Built& b = built();
  DatasetManifest manifest = b.corpus.manifest;
  std::ofstream(b.corpus.dir.path / "broken.png") << "garbage";
  manifest.records.push_back({"broken", b.corpus.dir.path / "broken.png", Label::Fake, std::nullopt, 32, 32});
  manifest.recount();
  const auto s = build_snapshot(manifest, b.corpus.checkpoint, b.corpus.dir.path / "other" / "snap-c");
  CHECK(s.points == 60);
  CHECK(s.errors == 1);
  const json meta = json::parse(read_file(s.dir / "meta.json"));
  REQUIRE(meta.at("errors").size() == 1);
  CHECK(meta.at("errors")[0].at("image_id") == "broken");
}

TEST_CASE("snapshot views") {
  const Built& b = built();
  const Snapshot snap(b.summary.dir);
  CHECK(snap.size() == 60);
  CHECK(snap.grid() == 30);
  const json cells = json::parse(snap.cells_json());
  const json& first = cells.at("cells")[0];
  const CellId id{first.at("row").get<int>(), first.at("col").get<int>()};
  CHECK(snap.cell(id) == first);
  CHECK(kind_of([&] { snap.cell({30, 0}); }) == ErrorKind::NotFound);

  const json layout = snap.layout(id);
  CHECK(layout.at("slots").size() == first.at("member_ids").size());

  const std::string image = first.at("member_ids")[0];
  const json contrib = snap.contributions(image);
  CHECK(contrib.at("image_id") == image);
  CHECK(contrib.at("c").size() == 16);
  CHECK(kind_of([&] { snap.contributions("nope"); }) == ErrorKind::NotFound);

  const json w = snap.whatif(image, 1e-3, WhatIfMode::Joint);
  CHECK(w.at("new_prediction").at("label") != w.at("old_prediction").at("label"));

  const json global = snap.dimensions(std::nullopt, MemberFilter::All);
  CHECK(global.at("values").size() == 16);
  const json local = snap.dimensions(id, MemberFilter::Correct);
  CHECK(local.at("count").get<std::size_t>() <= first.at("member_ids").size());
}

TEST_CASE("relevance is computed once under concurrency and cached on disk") {
  const Built& b = built();
  const Snapshot snap(b.summary.dir);
  const std::string image = snap.point(3).image_id;
  std::vector<std::shared_ptr<const RelevanceStack>> results(8);
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < results.size(); ++t) {
    threads.emplace_back([&, t] { results[t] = snap.relevance(image); });
  }
  for (auto& t : threads) t.join();
  CHECK(snap.relevance_computations() == 1);
  for (const auto& r : results) CHECK(r == results[0]);
  REQUIRE(results[0]->maps.size() == 16);
  CHECK(results[0]->maps[0].height == 32);
  CHECK(fs::exists(snap.relevance_path(image)));

  const Snapshot reopened(b.summary.dir);
  const auto cached = reopened.relevance(image);
  CHECK(reopened.relevance_computations() == 0);
  CHECK(cached->maps[4].values == results[0]->maps[4].values);
  CHECK(kind_of([&] { snap.relevance("nope"); }) == ErrorKind::NotFound);
}

TEST_CASE("concepts for a cell are cached") {
  const Built& b = built();
  const Snapshot snap(b.summary.dir);
  const json cells = json::parse(snap.cells_json());
  const json& first = cells.at("cells")[0];
  const CellId id{first.at("row").get<int>(), first.at("col").get<int>()};
  const json concepts = snap.concepts(id);
  CHECK(concepts.contains("clusters"));
  CHECK(concepts.at("clusters").size() <= 3);
  const auto path = b.summary.dir / "concepts" / (std::to_string(id.row) + "_" + std::to_string(id.col) + ".json");
  CHECK(fs::exists(path));
  CHECK(Snapshot(b.summary.dir).concepts(id) == concepts);
}

TEST_CASE("snapshot store") {
  const Built& b = built();
  fs::create_directories(b.store / ".hidden.tmp-1");
  const SnapshotStore store(b.store);
  const auto ids = store.list();
  CHECK(std::find(ids.begin(), ids.end(), "snap-a") != ids.end());
  CHECK(std::none_of(ids.begin(), ids.end(), [](const std::string& id) { return id[0] == '.'; }));
  CHECK(store.get("snap-a") == store.get("snap-a"));
  CHECK(kind_of([&] { store.get("missing"); }) == ErrorKind::NotFound);
  fs::remove_all(b.store / ".hidden.tmp-1");
}

TEST_CASE("annotations") {
  const Built& b = built();
  const Snapshot snap(b.summary.dir);
  const json cells = json::parse(snap.cells_json());
  const CellId id{cells.at("cells")[0].at("row").get<int>(), cells.at("cells")[0].at("col").get<int>()};
  oracle::TempDir dir("ann");
  AnnotationStore store(dir.path);

  const Annotation a = store.add(snap, id, "checkerboard edges", "analyst");
  CHECK(a.cell == id);
  CHECK(a.author.value() == "analyst");
  CHECK(kind_of([&] { store.add(snap, id, "   "); }) == ErrorKind::Validation);
  const CellId empty = snap.has_cell({29, 29}) ? CellId{0, 29} : CellId{29, 29};
  if (!snap.has_cell(empty)) CHECK(kind_of([&] { store.add(snap, empty, "x"); }) == ErrorKind::NotFound);
  CHECK(kind_of([&] { store.add(snap, {30, 0}, "x"); }) == ErrorKind::NotFound);

  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 5; ++i) store.add(snap, id, "note " + std::to_string(t) + "." + std::to_string(i));
    });
  }
  for (auto& t : threads) t.join();
  auto listed = store.list(snap.id());
  CHECK(listed.size() == 41);
  std::set<std::string> unique;
  for (const auto& x : listed) unique.insert(x.id);
  CHECK(unique.size() == 41);

  store.remove(snap.id(), a.id);
  CHECK(store.list(snap.id()).size() == 40);
  CHECK(kind_of([&] { store.remove(snap.id(), a.id); }) == ErrorKind::NotFound);
  CHECK(AnnotationStore(dir.path).list(snap.id()).size() == 40);
  CHECK(read_file(b.summary.dir / "cells.json") == snap.cells_json());
}

TEST_CASE("cache names are filesystem safe") {
  CHECK(cache_name("real_00001.png") == "real_00001.png");
  const std::string odd = cache_name("real/a b.png");
  CHECK(odd.find('/') == std::string::npos);
  CHECK(odd.find(' ') == std::string::npos);
  CHECK(odd != cache_name("real/a_b.png"));
}
