#pragma once

// Small end-to-end fixture: synthetic corpus, projection, trained checkpoint.

#include <filesystem>

#include "fakescope/encoder.hpp"
#include "fakescope/pipeline.hpp"
#include "fakescope/synthetic.hpp"
#include "oracles.hpp"

namespace fixture {

namespace fs = std::filesystem;

struct TrainedCorpus {
  oracle::TempDir dir{"corpus"};
  fs::path images;
  fs::path projection;
  fs::path checkpoint;
  fakescope::DatasetManifest manifest;

  TrainedCorpus(int per_class, std::uint64_t seed, int size = 32, int epochs = 3) {
    using namespace fakescope;
    images = dir.path / "images";
    write_image_corpus(images, per_class, per_class, seed, {size});
    manifest = load_manifest(images);
    projection = dir.path / "projection.bin";
    save_projection(projection, {orthonormal_rows(kVisualDim, kGenericDim, seed)});
    const auto adapter = make_adapter("mock");
    auto records = encode_manifest(manifest, *adapter, load_projection(projection));
    TrainingConfig config;
    config.max_epochs = epochs;
    TrainReport report = train_from_embeddings(std::move(records), config, seed);
    report.model.adapter = "mock";
    report.model.projection = projection.string();
    checkpoint = dir.path / "model.ckpt";
    save_checkpoint(checkpoint, report.model);
  }
};

}  // namespace fixture
