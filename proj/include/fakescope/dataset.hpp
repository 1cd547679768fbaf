#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fakescope/image_io.hpp"

namespace fakescope {

enum class Label : int { Real = 0, Fake = 1 };
enum class Split { Train, Val, Test };

std::string_view to_string(Label label);
std::string_view to_string(Split split);
std::optional<Split> parse_split(std::string_view text);

struct ImageRecord {
  std::string id;
  std::filesystem::path path;
  Label label = Label::Real;
  std::optional<Split> split;
  int height = 0;
  int width = 0;
};

struct DatasetManifest {
  std::string name;
  std::vector<ImageRecord> records;
  std::map<int, std::size_t> class_counts;

  void recount();
  std::vector<const ImageRecord*> in_split(Split split) const;
  const ImageRecord* find(std::string_view id) const;
};

/// Encoder input: size x size x 3, channel-normalized, interleaved HWC.
struct PixelTensor {
  int size = 0;
  std::vector<float> data;
  std::string source_id;

  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * size + x) * 3 + c]; }
};

/// CLIP image preprocessing constants.
inline constexpr std::array<float, 3> kChannelMean{0.48145466f, 0.4578275f, 0.40821073f};
inline constexpr std::array<float, 3> kChannelStd{0.26862954f, 0.26130258f, 0.27577711f};
inline constexpr int kDefaultInputSize = 224;

/// Accepts a JSON-lines manifest file or a directory with real/ and fake/ subfolders.
/// Relative paths in a manifest resolve against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Serializes a manifest back to JSON lines (paths written as stored).
std::string manifest_to_jsonl(const DatasetManifest& manifest);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

/// Seeded stratified split: each label is shuffled and apportioned by largest remainder.
DatasetManifest split_dataset(const DatasetManifest& manifest, SplitRatios ratios, std::uint64_t seed);

/// Bilinear resize (half-pixel centers) to size x size, then channel normalization.
PixelTensor load_pixels(const ImageRecord& record, int size = kDefaultInputSize);
PixelTensor to_pixels(const RgbImage& image, int size, std::string source_id);

/// Crop [x0,x1) x [y0,y1) of an image.
RgbImage crop(const RgbImage& image, int x0, int y0, int x1, int y1);

}  // namespace fakescope
