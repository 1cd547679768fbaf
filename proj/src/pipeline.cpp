#include "fakescope/pipeline.hpp"

#include <fstream>

#include <json.hpp>

#include "fakescope/artifact.hpp"
#include "fakescope/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fakescope {

std::vector<EmbeddingRecord> load_embeddings(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Load, "cannot open embeddings " + path.string());
  std::vector<EmbeddingRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    try {
      const json j = json::parse(line);
      EmbeddingRecord r;
      r.id = j.at("id").get<std::string>();
      const int label = j.at("label").get<int>();
      if (label != 0 && label != 1) throw Error(ErrorKind::Validation, where + ": label must be 0 or 1");
      r.label = static_cast<Label>(label);
      if (j.contains("split") && j["split"].is_string()) {
        r.split = parse_split(j["split"].get<std::string>());
        if (!r.split) throw Error(ErrorKind::Validation, where + ": split must be train|val|test");
      }
      const auto& v = j.at("v");
      r.v.resize(static_cast<Eigen::Index>(v.size()));
      for (std::size_t i = 0; i < v.size(); ++i) r.v(static_cast<Eigen::Index>(i)) = v[i].get<double>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Validation, where + ": " + e.what());
    }
  }
  return out;
}

void save_embeddings(const fs::path& path, const std::vector<EmbeddingRecord>& records) {
  std::string text;
  for (const auto& r : records) {
    json j{{"id", r.id}, {"label", static_cast<int>(r.label)}};
    if (r.split) j["split"] = to_string(*r.split);
    j["v"] = std::vector<double>(r.v.data(), r.v.data() + r.v.size());
    text += j.dump() + "\n";
  }
  write_file_atomic(path, text);
}

std::vector<EmbeddingRecord> encode_manifest(const DatasetManifest& manifest, const BaseEncoderAdapter& adapter,
                                             const ForgetProjection& projection,
                                             std::vector<std::pair<std::string, std::string>>* failures) {
  const auto batch = encode_visual_batch(manifest.records, adapter, projection);
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ImageRecord& rec = manifest.records[i];
    if (batch[i].embedding) {
      out.push_back({rec.id, rec.label, rec.split, batch[i].embedding->vector});
    } else if (failures) {
      failures->emplace_back(rec.id, batch[i].error);
    }
  }
  return out;
}

TrainReport train_from_embeddings(std::vector<EmbeddingRecord> records, const TrainingConfig& config,
                                  std::uint64_t seed) {
  DatasetManifest unsplit;
  std::vector<std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split) continue;
    ImageRecord r;
    r.id = records[i].id;
    r.label = records[i].label;
    unsplit.records.push_back(std::move(r));
    index.push_back(i);
  }
  if (!unsplit.records.empty()) {
    const DatasetManifest split = split_dataset(unsplit, {}, seed);
    for (std::size_t k = 0; k < index.size(); ++k) records[index[k]].split = split.records[k].split;
  }

  std::vector<LabeledVector> train, val, test;
  for (const auto& r : records) {
    auto& bucket = *r.split == Split::Train ? train : *r.split == Split::Val ? val : test;
    bucket.push_back({r.v, r.label});
  }
  TrainReport report;
  report.train_size = train.size();
  report.val_size = val.size();
  report.test_size = test.size();
  report.model = train_detector(train, val, config, seed);

  const auto evaluate_split = [&](const std::vector<LabeledVector>& split) {
    std::vector<LabeledDistilled> distilled;
    for (const auto& s : split) distilled.push_back({distill(s.x, report.model), s.label});
    return distilled.empty() ? ConfusionStats{} : evaluate(distilled, report.model);
  };
  report.val = evaluate_split(val);
  report.test = evaluate_split(test);
  return report;
}

}  // namespace fakescope
