#include "fakescope/image_io.hpp"

#include <array>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "fakescope/artifact.hpp"
#include "fakescope/error.hpp"

namespace fakescope {
namespace {

enum class Format { Png, Jpeg, Unknown };

Format sniff(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Load, "cannot open image " + path.string());
  std::array<unsigned char, 8> sig{};
  in.read(reinterpret_cast<char*>(sig.data()), sig.size());
  if (in.gcount() >= 8 && png_sig_cmp(sig.data(), 0, 8) == 0) return Format::Png;
  if (in.gcount() >= 3 && sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) return Format::Jpeg;
  return Format::Unknown;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

// Either decodes fully or, with header_only, stops after reading dimensions.
RgbImage read_jpeg(const std::filesystem::path& path, bool header_only) {
  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
  if (!file) throw Error(ErrorKind::Load, "cannot open image " + path.string());

  jpeg_decompress_struct cinfo{};
  JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  RgbImage image;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw Error(ErrorKind::Decode, "corrupt JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  image.width = static_cast<int>(cinfo.image_width);
  image.height = static_cast<int>(cinfo.image_height);
  if (header_only) {
    jpeg_destroy_decompress(&cinfo);
    return image;
  }
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  image.data.resize(static_cast<std::size_t>(image.width) * image.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = image.data.data() + static_cast<std::size_t>(cinfo.output_scanline) * image.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return image;
}

RgbImage read_png(const std::filesystem::path& path, bool header_only) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw Error(ErrorKind::Decode, "corrupt PNG " + path.string() + ": " + png.message);
  }
  RgbImage image;
  image.width = static_cast<int>(png.width);
  image.height = static_cast<int>(png.height);
  if (header_only) {
    png_image_free(&png);
    return image;
  }
  png.format = PNG_FORMAT_RGB;
  image.data.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, image.data.data(), 0, nullptr)) {
    png_image_free(&png);
    throw Error(ErrorKind::Decode, "corrupt PNG " + path.string() + ": " + png.message);
  }
  return image;
}

RgbImage read_any(const std::filesystem::path& path, bool header_only) {
  switch (sniff(path)) {
    case Format::Png: return read_png(path, header_only);
    case Format::Jpeg: return read_jpeg(path, header_only);
    case Format::Unknown: break;
  }
  throw Error(ErrorKind::Decode, "unrecognized image format " + path.string());
}

}  // namespace

RgbImage decode_image(const std::filesystem::path& path) { return read_any(path, false); }

ImageSize probe_image(const std::filesystem::path& path) {
  const RgbImage header = read_any(path, true);
  return {header.width, header.height};
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.data.data(), 0, nullptr)) {
    throw Error(ErrorKind::Internal, std::string("png sizing failed: ") + png.message);
  }
  std::string bytes(size, '\0');
  if (!png_image_write_to_memory(&png, bytes.data(), &size, 0, image.data.data(), 0, nullptr)) {
    throw Error(ErrorKind::Internal, std::string("png encoding failed: ") + png.message);
  }
  bytes.resize(size);
  write_file_atomic(path, bytes);
}

std::string encode_png_gray(int width, int height, const std::vector<std::uint8_t>& pixels) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(width);
  png.height = static_cast<png_uint_32>(height);
  png.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw Error(ErrorKind::Internal, std::string("png sizing failed: ") + png.message);
  }
  std::string bytes(size, '\0');
  if (!png_image_write_to_memory(&png, bytes.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw Error(ErrorKind::Internal, std::string("png encoding failed: ") + png.message);
  }
  bytes.resize(size);
  return bytes;
}

}  // namespace fakescope
