#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fakescope/dataset.hpp"
#include "fakescope/detector.hpp"
#include "fakescope/encoder.hpp"

namespace fakescope {

/// One precomputed visual embedding with its label.
struct EmbeddingRecord {
  std::string id;
  Label label = Label::Real;
  std::optional<Split> split;
  Vector v;
};

/// JSON lines: {id, label, split?, v:[...]}.
std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path);
void save_embeddings(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records);

/// Encodes every record; failures are returned as (id, message) pairs.
std::vector<EmbeddingRecord> encode_manifest(const DatasetManifest& manifest, const BaseEncoderAdapter& adapter,
                                             const ForgetProjection& projection,
                                             std::vector<std::pair<std::string, std::string>>* failures = nullptr);

struct TrainReport {
  DetectorModel model;
  ConfusionStats val;
  ConfusionStats test;
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  std::size_t test_size = 0;
};

/// Records without a split are assigned one with the seeded stratified 0.8/0.1/0.1 split.
TrainReport train_from_embeddings(std::vector<EmbeddingRecord> records, const TrainingConfig& config,
                                  std::uint64_t seed);

}  // namespace fakescope
