// fakescope command-line entry point.

#include <csignal>
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fakescope/artifact.hpp"
#include "fakescope/error.hpp"
#include "fakescope/pipeline.hpp"
#include "fakescope/server.hpp"
#include "fakescope/service.hpp"
#include "fakescope/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fakescope;

namespace {

ApiServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

json stats_json(const ConfusionStats& s) { return to_json(s); }

int run_train(const fs::path& manifest_path, const fs::path& embeddings_path, const fs::path& out,
              const std::string& adapter_spec, fs::path projection_path, const TrainingConfig& config,
              std::uint64_t seed) {
  std::vector<EmbeddingRecord> records;
  std::vector<std::pair<std::string, std::string>> failures;
  std::string adapter_name = adapter_spec;
  if (!embeddings_path.empty()) {
    records = load_embeddings(embeddings_path);
    adapter_name = "embeddings:" + fs::absolute(embeddings_path).string();
  } else {
    const DatasetManifest manifest = load_manifest(manifest_path);
    if (projection_path.empty()) {
      projection_path = out;
      projection_path += ".projection.bin";
      save_projection(projection_path, {orthonormal_rows(kVisualDim, kGenericDim, seed)});
      std::cerr << "no --projection given; wrote a seeded orthonormal projection to " << projection_path << "\n";
    }
    const ForgetProjection projection = load_projection(projection_path);
    const auto adapter = make_adapter(adapter_spec);
    records = encode_manifest(manifest, *adapter, projection, &failures);
  }
  TrainReport report = train_from_embeddings(std::move(records), config, seed);
  report.model.adapter = adapter_name;
  if (!projection_path.empty()) report.model.projection = fs::absolute(projection_path).string();
  save_checkpoint(out, report.model);

  json errors = json::array();
  for (const auto& [id, message] : failures) errors.push_back({{"image_id", id}, {"error", message}});
  const json summary{{"checkpoint", out.string()},
                     {"epochs", report.model.training.epochs},
                     {"best_epoch", report.model.training.best_epoch},
                     {"ortho_penalty", orthogonality_penalty(report.model.W)},
                     {"sizes", {{"train", report.train_size}, {"val", report.val_size}, {"test", report.test_size}}},
                     {"val", stats_json(report.val)},
                     {"test", stats_json(report.test)},
                     {"errors", errors}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_export(const fs::path& snapshot_dir, const std::string& what, const std::string& image,
               const fs::path& out) {
  const Snapshot snapshot(snapshot_dir);
  std::string text;
  if (what == "cells") {
    text = snapshot.cells_json();
  } else if (what == "contributions") {
    for (std::size_t i = 0; i < snapshot.size(); ++i) {
      text += snapshot.contributions(snapshot.point(i).image_id).dump() + "\n";
    }
  } else if (what == "relevance") {
    std::vector<std::string> ids;
    if (!image.empty()) {
      ids.push_back(image);
    } else {
      for (std::size_t i = 0; i < snapshot.size(); ++i) ids.push_back(snapshot.point(i).image_id);
    }
    for (const auto& id : ids) {
      const auto stack = snapshot.relevance(id);
      json degenerate = json::array();
      for (const auto& m : stack->maps) degenerate.push_back(m.degenerate);
      text += json{{"image_id", id}, {"cache", snapshot.relevance_path(id).string()}, {"degenerate", degenerate}}
                  .dump() +
              "\n";
    }
  } else {
    throw Error(ErrorKind::Argument, "--what must be contributions, relevance or cells");
  }
  if (out.empty()) {
    std::cout << text;
  } else {
    write_file_atomic(out, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distilled real/fake image detector with relevance analytics"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train the distiller and head on a labeled corpus");
  fs::path train_manifest, train_embeddings, train_out, train_projection;
  std::string train_adapter = "mock";
  std::uint64_t train_seed = 1;
  TrainingConfig config;
  auto* manifest_opt = train->add_option("--manifest", train_manifest, "JSON-lines manifest or real/ fake/ directory");
  auto* embeddings_opt =
      train->add_option("--embeddings", train_embeddings, "Precomputed 256-d embeddings (JSON lines)");
  manifest_opt->excludes(embeddings_opt);
  train->add_option("--out", train_out, "Checkpoint path")->required();
  train->add_option("--seed", train_seed, "Seed")->capture_default_str();
  train->add_option("--lambda-bce", config.lambda_bce)->capture_default_str();
  train->add_option("--lambda-ortho", config.lambda_ortho)->capture_default_str();
  train->add_option("--batch", config.batch_size)->capture_default_str();
  train->add_option("--lr", config.learning_rate)->capture_default_str();
  train->add_option("--epochs", config.max_epochs, "Maximum epochs")->capture_default_str();
  train->add_option("--patience", config.patience)->capture_default_str();
  train->add_option("--adapter", train_adapter, "Encoder adapter spec")->capture_default_str();
  train->add_option("--projection", train_projection, "Forget projection artifact");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Build an analysis snapshot");
  fs::path an_manifest, an_checkpoint, an_out, an_projection;
  SnapshotConfig an_config;
  analyze->add_option("--manifest", an_manifest)->required();
  analyze->add_option("--checkpoint", an_checkpoint)->required();
  analyze->add_option("--out", an_out, "Snapshot directory; its name is the snapshot id")->required();
  analyze->add_option("--grid", an_config.grid)->capture_default_str();
  analyze->add_option("--seed", an_config.seed)->capture_default_str();
  analyze->add_option("--adapter", an_config.adapter, "Override the checkpoint's adapter");
  analyze->add_option("--projection", an_projection, "Override the checkpoint's projection");

  // serve
  auto* serve = app.add_subcommand("serve", "Serve snapshots over HTTP");
  fs::path store;
  std::string addr = "127.0.0.1:8080";
  serve->add_option("--store", store, "Directory of snapshots")->required();
  serve->add_option("--addr", addr)->capture_default_str();

  // export
  auto* exp = app.add_subcommand("export", "Export snapshot data");
  fs::path ex_snapshot, ex_out;
  std::string what, ex_image;
  exp->add_option("--snapshot", ex_snapshot)->required();
  exp->add_option("--what", what)->required()->check(CLI::IsMember({"contributions", "relevance", "cells"}));
  exp->add_option("--image", ex_image, "Restrict relevance export to one image");
  exp->add_option("--out", ex_out, "Output file (default stdout)");

  // make-corpus
  auto* corpus = app.add_subcommand("make-corpus", "Write a synthetic corpus");
  fs::path corpus_out;
  int n_real = 200, n_fake = 200, image_size = 64, n_embeddings = 2000;
  std::uint64_t corpus_seed = 1;
  bool gaussian = false;
  corpus->add_option("--out", corpus_out, "Image directory, or embeddings file with --gaussian")->required();
  corpus->add_option("--real", n_real)->capture_default_str();
  corpus->add_option("--fake", n_fake)->capture_default_str();
  corpus->add_option("--size", image_size)->capture_default_str();
  corpus->add_option("--seed", corpus_seed)->capture_default_str();
  corpus->add_flag("--gaussian", gaussian, "Two-Gaussian 256-d embeddings instead of images");
  corpus->add_option("-n,--count", n_embeddings, "Embedding count for --gaussian")->capture_default_str();

  // forget-train
  auto* forget = app.add_subcommand("forget-train", "Train a forget projection from natural/ text/ overlaid/ images");
  fs::path forget_corpus, forget_out;
  std::string forget_adapter = "mock";
  std::uint64_t forget_seed = 1;
  int synthetic_per_class = 0;
  forget->add_option("--corpus", forget_corpus)->required();
  forget->add_option("--out", forget_out)->required();
  forget->add_option("--adapter", forget_adapter)->capture_default_str();
  forget->add_option("--seed", forget_seed)->capture_default_str();
  forget->add_option("--synthesize", synthetic_per_class, "First write this many synthetic images per class");

  // make-projection
  auto* make_proj = app.add_subcommand("make-projection", "Write a seeded orthonormal projection");
  fs::path proj_out;
  std::uint64_t proj_seed = 1;
  make_proj->add_option("--out", proj_out)->required();
  make_proj->add_option("--seed", proj_seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      if (train_manifest.empty() && train_embeddings.empty()) {
        throw Error(ErrorKind::Argument, "train needs --manifest or --embeddings");
      }
      return run_train(train_manifest, train_embeddings, train_out, train_adapter, train_projection, config,
                       train_seed);
    }
    if (*analyze) {
      an_config.projection = an_projection;
      const DatasetManifest manifest = load_manifest(an_manifest);
      const SnapshotSummary s = build_snapshot(manifest, an_checkpoint, an_out, an_config);
      std::cout << json{{"snapshot_id", s.id}, {"dir", s.dir.string()}, {"points", s.points}, {"cells", s.cells},
                        {"errors", s.errors}}
                       .dump(2)
                << "\n";
      return 0;
    }
    if (*serve) {
      const auto [host, port] = parse_address(addr);
      ApiServer server(store);
      const int bound = server.bind(host, port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving " << store << " on http://" << host << ":" << bound << "/api/v1\n";
      server.run();
      g_server = nullptr;
      return 0;
    }
    if (*exp) return run_export(ex_snapshot, what, ex_image, ex_out);
    if (*corpus) {
      if (gaussian) {
        std::vector<EmbeddingRecord> records;
        const auto data = two_gaussian_corpus(n_embeddings, corpus_seed);
        for (std::size_t i = 0; i < data.size(); ++i) {
          records.push_back({"g" + std::to_string(i), data[i].label, std::nullopt, data[i].x});
        }
        save_embeddings(corpus_out, records);
      } else {
        write_image_corpus(corpus_out, n_real, n_fake, corpus_seed, {image_size});
      }
      return 0;
    }
    if (*forget) {
      if (synthetic_per_class > 0) write_projection_corpus(forget_corpus, synthetic_per_class, forget_seed);
      const auto adapter = make_adapter(forget_adapter);
      const ForgetProjection p = train_forget_projection(load_projection_corpus(forget_corpus), *adapter, forget_seed);
      save_projection(forget_out, p);
      std::cout << json{{"projection", forget_out.string()}, {"defect", p.orthonormality_defect()}}.dump(2) << "\n";
      return 0;
    }
    if (*make_proj) {
      save_projection(proj_out, {orthonormal_rows(kVisualDim, kGenericDim, proj_seed)});
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
