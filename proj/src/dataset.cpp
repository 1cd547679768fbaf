#include "fakescope/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fakescope/error.hpp"
#include "fakescope/rng.hpp"

namespace fakescope {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Label label) { return label == Label::Fake ? "fake" : "real"; }

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

std::optional<Split> parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "val") return Split::Val;
  if (text == "test") return Split::Test;
  return std::nullopt;
}

void DatasetManifest::recount() {
  class_counts.clear();
  for (const auto& r : records) ++class_counts[static_cast<int>(r.label)];
}

std::vector<const ImageRecord*> DatasetManifest::in_split(Split split) const {
  std::vector<const ImageRecord*> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

const ImageRecord* DatasetManifest::find(std::string_view id) const {
  for (const auto& r : records) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

namespace {

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

void fill_dimensions(ImageRecord& record) {
  if (!fs::exists(record.path)) {
    throw Error(ErrorKind::Load, "record '" + record.id + "' references missing file " +
                                     record.path.string());
  }
  const ImageSize size = probe_image(record.path);
  record.width = size.width;
  record.height = size.height;
}

DatasetManifest load_directory(const fs::path& root) {
  DatasetManifest manifest;
  manifest.name = root.filename().string();
  if (manifest.name.empty()) manifest.name = root.parent_path().filename().string();
  for (const auto& [folder, label] : {std::pair{"real", Label::Real}, std::pair{"fake", Label::Fake}}) {
    const fs::path dir = root / folder;
    if (!fs::is_directory(dir)) continue;
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      ImageRecord record;
      record.id = std::string(folder) + "/" + fs::relative(file, dir).generic_string();
      record.path = file;
      record.label = label;
      fill_dimensions(record);
      manifest.records.push_back(std::move(record));
    }
  }
  if (manifest.records.empty()) {
    throw Error(ErrorKind::Load, "directory " + root.string() + " has no images under real/ or fake/");
  }
  return manifest;
}

DatasetManifest load_jsonl(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::Load, "cannot open manifest " + file.string());
  DatasetManifest manifest;
  manifest.name = file.stem().string();
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = file.string() + ":" + std::to_string(line_no);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Validation, where + ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains("id") || !obj["id"].is_string() || !obj.contains("path") ||
        !obj["path"].is_string() || !obj.contains("label") || !obj["label"].is_number_integer()) {
      throw Error(ErrorKind::Validation, where + ": expected {id: string, path: string, label: 0|1}");
    }
    const auto label = obj["label"].get<long long>();
    if (label != 0 && label != 1) {
      throw Error(ErrorKind::Validation, where + ": label must be 0 or 1, got " + std::to_string(label));
    }
    ImageRecord record;
    record.id = obj["id"].get<std::string>();
    if (!seen.insert(record.id).second) {
      throw Error(ErrorKind::Validation, where + ": duplicate id '" + record.id + "'");
    }
    record.path = obj["path"].get<std::string>();
    if (record.path.is_relative()) record.path = file.parent_path() / record.path;
    record.label = static_cast<Label>(label);
    if (obj.contains("split") && !obj["split"].is_null()) {
      const auto split = obj["split"].is_string() ? parse_split(obj["split"].get<std::string>()) : std::nullopt;
      if (!split) throw Error(ErrorKind::Validation, where + ": split must be train|val|test");
      record.split = split;
    }
    fill_dimensions(record);
    manifest.records.push_back(std::move(record));
  }
  return manifest;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::Load, "manifest not found: " + path.string());
  DatasetManifest manifest = fs::is_directory(path) ? load_directory(path) : load_jsonl(path);
  manifest.recount();
  return manifest;
}

std::string manifest_to_jsonl(const DatasetManifest& manifest) {
  std::string out;
  for (const auto& r : manifest.records) {
    json obj{{"id", r.id}, {"path", r.path.string()}, {"label", static_cast<int>(r.label)}};
    if (r.split) obj["split"] = to_string(*r.split);
    out += obj.dump();
    out += '\n';
  }
  return out;
}

namespace {

// Integer apportionment of `total` with floors plus the largest fractional parts;
// ties go to the earlier slot.
std::array<std::size_t, 3> largest_remainder(const std::array<double, 3>& target, std::size_t total) {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    counts[s] = static_cast<std::size_t>(std::floor(target[s] + 1e-9));
    remainder[s] = target[s] - static_cast<double>(counts[s]);
    assigned += counts[s];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[order[k % 3]];
  return counts;
}

}  // namespace

DatasetManifest split_dataset(const DatasetManifest& manifest, SplitRatios ratios, std::uint64_t seed) {
  const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
  for (double x : r) {
    if (!(x > 0.0)) throw Error(ErrorKind::Argument, "split ratios must be positive");
  }
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) {
    throw Error(ErrorKind::Argument, "split ratios must sum to 1");
  }

  DatasetManifest out = manifest;
  std::array<std::vector<std::size_t>, 2> members;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    members[static_cast<std::size_t>(out.records[i].label)].push_back(i);
  }
  for (int label : {0, 1}) {
    const std::size_t n = members[label].size();
    if (n > 0 && n < r.size()) {
      throw Error(ErrorKind::DegenerateSplit, "label " + std::to_string(label) + " has " + std::to_string(n) +
                                                  " records, fewer than 3 splits");
    }
  }
  const std::size_t total = members[0].size() + members[1].size();
  const bool both = !members[0].empty() && !members[1].empty();

  // Split sizes, then the fake share of each split, both by largest remainder.
  std::array<double, 3> size_target{};
  for (std::size_t s = 0; s < 3; ++s) size_target[s] = static_cast<double>(total) * r[s];
  std::array<std::size_t, 3> sizes = largest_remainder(size_target, total);
  const std::size_t min_size = both ? 2 : 1;
  for (std::size_t s = 0; s < 3; ++s) {
    while (sizes[s] < min_size) {
      --*std::max_element(sizes.begin(), sizes.end());
      ++sizes[s];
    }
  }
  const double p = static_cast<double>(members[1].size()) / static_cast<double>(total);
  std::array<double, 3> fake_target{};
  for (std::size_t s = 0; s < 3; ++s) fake_target[s] = static_cast<double>(sizes[s]) * p;
  std::array<std::size_t, 3> fakes = largest_remainder(fake_target, members[1].size());
  std::array<std::size_t, 3> reals{};
  for (std::size_t s = 0; s < 3; ++s) reals[s] = sizes[s] - fakes[s];

  // Every split receives at least one record of every present label; swaps keep sizes.
  if (both) {
    for (std::size_t s = 0; s < 3; ++s) {
      if (fakes[s] == 0) {
        const auto d = static_cast<std::size_t>(std::max_element(fakes.begin(), fakes.end()) - fakes.begin());
        --fakes[d], ++reals[d], ++fakes[s], --reals[s];
      }
      if (reals[s] == 0) {
        const auto d = static_cast<std::size_t>(std::max_element(reals.begin(), reals.end()) - reals.begin());
        --reals[d], ++fakes[d], ++reals[s], --fakes[s];
      }
    }
  }

  Rng rng(seed);
  for (int label : {0, 1}) {
    auto& ids = members[label];
    if (ids.empty()) continue;
    rng.shuffle(std::span(ids));
    const auto& counts = label == 0 ? reals : fakes;
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t j = 0; j < counts[s]; ++j) out.records[ids[cursor++]].split = static_cast<Split>(s);
    }
  }
  out.recount();
  return out;
}

PixelTensor to_pixels(const RgbImage& image, int size, std::string source_id) {
  if (image.width <= 0 || image.height <= 0) {
    throw Error(ErrorKind::Validation, "zero-area image '" + source_id + "'");
  }
  if (size <= 0) throw Error(ErrorKind::Argument, "target size must be positive");
  PixelTensor tensor;
  tensor.size = size;
  tensor.source_id = std::move(source_id);
  tensor.data.resize(static_cast<std::size_t>(size) * size * 3);
  const double sx = static_cast<double>(image.width) / size;
  const double sy = static_cast<double>(image.height) / size;
  for (int y = 0; y < size; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - wx) * image.at(y0, x0, c) + wx * image.at(y0, x1, c);
        const double bottom = (1 - wx) * image.at(y1, x0, c) + wx * image.at(y1, x1, c);
        const double value = ((1 - wy) * top + wy * bottom) / 255.0;
        tensor.data[(static_cast<std::size_t>(y) * size + x) * 3 + c] =
            static_cast<float>((value - kChannelMean[c]) / kChannelStd[c]);
      }
    }
  }
  return tensor;
}

PixelTensor load_pixels(const ImageRecord& record, int size) {
  return to_pixels(decode_image(record.path), size, record.id);
}

RgbImage crop(const RgbImage& image, int x0, int y0, int x1, int y1) {
  x0 = std::clamp(x0, 0, image.width);
  x1 = std::clamp(x1, 0, image.width);
  y0 = std::clamp(y0, 0, image.height);
  y1 = std::clamp(y1, 0, image.height);
  RgbImage out;
  out.width = std::max(0, x1 - x0);
  out.height = std::max(0, y1 - y0);
  out.data.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y0 + y, x0 + x, c);
    }
  }
  return out;
}

}  // namespace fakescope
