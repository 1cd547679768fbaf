#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fakescope {

/// 8-bit RGB image, row-major, interleaved (HWC).
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

struct ImageSize {
  int width = 0;
  int height = 0;
};

/// PNG or JPEG, detected from the file signature.
RgbImage decode_image(const std::filesystem::path& path);

/// Reads only the header to obtain dimensions.
ImageSize probe_image(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const RgbImage& image);

/// 8-bit grayscale PNG held in memory.
std::string encode_png_gray(int width, int height, const std::vector<std::uint8_t>& pixels);

}  // namespace fakescope
