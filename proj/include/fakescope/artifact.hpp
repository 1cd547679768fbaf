#pragma once

// Artifact container shared by projection, checkpoint and relevance-cache files:
// a single-line UTF-8 JSON header terminated by '\n', followed by a raw
// little-endian float32 payload.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace fakescope {

struct Artifact {
  nlohmann::json header;
  std::vector<float> payload;
};

void write_artifact(const std::filesystem::path& path, const nlohmann::json& header,
                    std::span<const float> payload);

/// Serializes to bytes without touching the filesystem.
std::string encode_artifact(const nlohmann::json& header, std::span<const float> payload);

Artifact read_artifact(const std::filesystem::path& path);

/// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

std::string read_file(const std::filesystem::path& path);

}  // namespace fakescope
