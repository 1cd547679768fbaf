#include <doctest.h>

#include <thread>

#include "fakescope/artifact.hpp"
#include "fakescope/error.hpp"
#include "fakescope/server.hpp"
#include "fakescope/service.hpp"
#include "../support/fixtures.hpp"

#include <httplib.h>

using namespace fakescope;
namespace fs = std::filesystem;

namespace {

struct Running {
  fixture::TrainedCorpus corpus{20, 6};
  fs::path store = corpus.dir.path / "store";
  SnapshotSummary summary = build_snapshot(corpus.manifest, corpus.checkpoint, store / "demo");
  ApiServer server{store};
  int port = server.bind("127.0.0.1", 0);
  std::thread thread{[this] { server.run(); }};

  Running() { server.wait_until_ready(); }
  ~Running() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

Running& running() {
  static Running r;
  return r;
}

const std::string kBase = "/api/v1/snapshots";

}  // namespace

TEST_CASE("list and raw snapshot files") {
  auto cli = running().client();
  auto res = cli.Get(kBase);
  REQUIRE(res);
  CHECK(res->status == 200);
  const json list = json::parse(res->body);
  REQUIRE(list.at("snapshots").size() == 1);
  CHECK(list["snapshots"][0].at("id") == "demo");
  CHECK(list["snapshots"][0].at("points") == 40);

  auto cells = cli.Get(kBase + "/demo/cells");
  REQUIRE(cells);
  CHECK(cells->status == 200);
  CHECK(cells->body == read_file(running().summary.dir / "cells.json"));
  CHECK(cli.Get(kBase + "/demo/cells")->body == cells->body);

  auto points = cli.Get(kBase + "/demo/points");
  REQUIRE(points);
  CHECK(json::parse(points->body).at("points").size() == 40);
}

TEST_CASE("cell, layout, contributions and dimensions") {
  auto cli = running().client();
  const json cells = json::parse(read_file(running().summary.dir / "cells.json"));
  const json& first = cells.at("cells")[0];
  const std::string key = std::to_string(first.at("row").get<int>()) + "," + std::to_string(first.at("col").get<int>());

  auto cell = cli.Get(kBase + "/demo/cells/" + key);
  REQUIRE(cell);
  CHECK(cell->status == 200);
  CHECK(json::parse(cell->body) == first);

  auto layout = cli.Get(kBase + "/demo/cells/" + key + "/layout");
  REQUIRE(layout);
  CHECK(json::parse(layout->body).at("slots").size() == first.at("member_ids").size());

  const std::string image = first.at("member_ids")[0];
  auto contrib = cli.Get(kBase + "/demo/images/" + image + "/contributions");
  REQUIRE(contrib);
  CHECK(contrib->status == 200);
  CHECK(json::parse(contrib->body).at("s").size() == 16);

  auto dims = cli.Get(kBase + "/demo/dimensions?scope=cell&cell=" + key + "&filter=all");
  REQUIRE(dims);
  CHECK(dims->status == 200);
  auto global = cli.Get(kBase + "/demo/dimensions");
  REQUIRE(global);
  CHECK(json::parse(global->body).at("values").size() == 16);
  CHECK(cli.Get(kBase + "/demo/dimensions?scope=galaxy")->status == 400);
}

TEST_CASE("relevance maps over HTTP") {
  auto cli = running().client();
  const std::string image = Snapshot(running().summary.dir).point(0).image_id;
  auto png = cli.Get(kBase + "/demo/images/" + image + "/relevance/3");
  REQUIRE(png);
  CHECK(png->status == 200);
  CHECK(png->get_header_value("Content-Type") == "image/png");
  CHECK(png->body.substr(1, 3) == "PNG");
  auto values = cli.Get(kBase + "/demo/images/" + image + "/relevance/3?format=json");
  REQUIRE(values);
  const json j = json::parse(values->body);
  CHECK(j.at("values").size() == j.at("height").get<std::size_t>() * j.at("width").get<std::size_t>());
  CHECK(cli.Get(kBase + "/demo/images/" + image + "/relevance/17")->status == 400);
  CHECK(cli.Get(kBase + "/demo/images/" + image + "/relevance/3?format=bmp")->status == 400);
}

TEST_CASE("what-if flips the recomputed logit") {
  auto cli = running().client();
  const std::string image = Snapshot(running().summary.dir).point(1).image_id;
  auto res = cli.Post(kBase + "/demo/whatif", json{{"image_id", image}}.dump(), "application/json");
  REQUIRE(res);
  REQUIRE(res->status == 200);
  const json w = json::parse(res->body);
  const auto head_w = w.at("head_w").get<std::vector<double>>();
  const auto before = w.at("vector").get<std::vector<double>>();
  const auto after = w.at("new_vector").get<std::vector<double>>();
  double old_logit = w.at("head_b").get<double>(), new_logit = old_logit;
  for (std::size_t i = 0; i < 16; ++i) {
    old_logit += head_w[i] * before[i];
    new_logit += head_w[i] * after[i];
  }
  CHECK((old_logit > 0) != (new_logit > 0));

  auto axis = cli.Post(kBase + "/demo/whatif", json{{"image_id", image}, {"mode", "axis"}}.dump(), "application/json");
  REQUIRE(axis);
  CHECK(axis->status == 200);
  CHECK(cli.Post(kBase + "/demo/whatif", "{}", "application/json")->status == 400);
  CHECK(cli.Post(kBase + "/demo/whatif", "not json", "application/json")->status == 400);
  CHECK(cli.Post(kBase + "/demo/whatif", json{{"image_id", "nope"}}.dump(), "application/json")->status == 404);
}

TEST_CASE("annotations over HTTP") {
  auto cli = running().client();
  const json cells = json::parse(read_file(running().summary.dir / "cells.json"));
  const int row = cells.at("cells")[0].at("row"), col = cells.at("cells")[0].at("col");
  auto created = cli.Post(kBase + "/demo/annotations", json{{"cell", {row, col}}, {"text", "grid texture"}}.dump(),
                          "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const std::string id = json::parse(created->body).at("id");

  const std::string query = "?cell=" + std::to_string(row) + "," + std::to_string(col);
  auto listed = cli.Get(kBase + "/demo/annotations" + query);
  REQUIRE(listed);
  CHECK(json::parse(listed->body).at("annotations").size() == 1);
  CHECK(cli.Get(kBase + "/demo/cells")->body == read_file(running().summary.dir / "cells.json"));

  CHECK(cli.Post(kBase + "/demo/annotations", json{{"cell", {row, col}}, {"text", ""}}.dump(), "application/json")
            ->status == 400);
  CHECK(cli.Post(kBase + "/demo/annotations", json{{"cell", {31, 0}}, {"text", "x"}}.dump(), "application/json")
            ->status == 404);

  CHECK(cli.Delete(kBase + "/demo/annotations/" + id)->status == 200);
  CHECK(cli.Delete(kBase + "/demo/annotations/" + id)->status == 404);
  CHECK(json::parse(cli.Get(kBase + "/demo/annotations")->body).at("annotations").empty());
}

TEST_CASE("error mapping") {
  auto cli = running().client();
  auto missing = cli.Get(kBase + "/nope/cells");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(json::parse(missing->body).at("error").at("kind") == "not-found");
  CHECK(cli.Get(kBase + "/demo/cells/99,99")->status == 404);
  CHECK(cli.Get("/api/v1/unknown")->status == 404);
}

TEST_CASE("a busy port is a startup error") {
  ApiServer other(running().store);
  try {
    other.bind("127.0.0.1", running().port);
    FAIL("expected a startup error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Startup);
  }
}

TEST_CASE("address parsing") {
  CHECK(parse_address("0.0.0.0:9000") == std::pair<std::string, int>{"0.0.0.0", 9000});
  CHECK(parse_address(":81").second == 81);
  CHECK(parse_address("8080").first == "127.0.0.1");
  CHECK_THROWS_AS(parse_address("host:notaport"), Error);
}
