#include "fakescope/artifact.hpp"

#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "fakescope/error.hpp"

namespace fakescope {
namespace {

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

}  // namespace

std::string encode_artifact(const nlohmann::json& header, std::span<const float> payload) {
  std::string out = header.dump();
  out.push_back('\n');
  const std::size_t offset = out.size();
  out.resize(offset + payload.size() * sizeof(float));
  for (std::size_t i = 0; i < payload.size(); ++i) {
    const std::uint32_t word = to_little(std::bit_cast<std::uint32_t>(payload[i]));
    std::memcpy(out.data() + offset + i * sizeof(float), &word, sizeof(word));
  }
  return out;
}

void write_artifact(const std::filesystem::path& path, const nlohmann::json& header,
                    std::span<const float> payload) {
  write_file_atomic(path, encode_artifact(header, payload));
}

Artifact read_artifact(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto newline = bytes.find('\n');
  if (newline == std::string::npos) {
    throw Error(ErrorKind::Load, "artifact has no header line: " + path.string());
  }
  Artifact artifact;
  try {
    artifact.header = nlohmann::json::parse(bytes.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Load, "malformed artifact header in " + path.string() + ": " + e.what());
  }
  const std::size_t body = bytes.size() - newline - 1;
  if (body % sizeof(float) != 0) {
    throw Error(ErrorKind::Load, "artifact payload is not a whole number of float32 values: " +
                                     path.string());
  }
  artifact.payload.resize(body / sizeof(float));
  for (std::size_t i = 0; i < artifact.payload.size(); ++i) {
    std::uint32_t word;
    std::memcpy(&word, bytes.data() + newline + 1 + i * sizeof(float), sizeof(word));
    artifact.payload[i] = std::bit_cast<float>(to_little(word));
  }
  return artifact;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  static std::atomic<std::uint64_t> counter{0};
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Load, "cannot open for writing: " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error(ErrorKind::Load, "short write: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Load, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

}  // namespace fakescope
