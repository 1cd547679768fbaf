#include "fakescope/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "fakescope/error.hpp"
#include "fakescope/image_io.hpp"
#include "fakescope/rng.hpp"

namespace fs = std::filesystem;

namespace fakescope {

std::vector<LabeledVector> two_gaussian_corpus(int n, std::uint64_t seed, GaussianCorpusOptions options) {
  if (options.informative > options.dims) throw Error(ErrorKind::Argument, "more informative dims than dims");
  Rng rng(seed);
  std::vector<LabeledVector> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Label label = i % 2 == 0 ? Label::Real : Label::Fake;
    const double mean = label == Label::Fake ? options.shift : -options.shift;
    Vector x(options.dims);
    for (int d = 0; d < options.dims; ++d) x(d) = rng.normal() + (d < options.informative ? mean : 0.0);
    out.push_back({std::move(x), label});
  }
  return out;
}

std::vector<LabeledVector> separable_corpus(int n, std::uint64_t seed, int dims) {
  Rng rng(seed);
  std::vector<LabeledVector> out;
  for (int i = 0; i < n; ++i) {
    const Label label = i % 2 == 0 ? Label::Real : Label::Fake;
    Vector x(dims);
    for (int d = 0; d < dims; ++d) x(d) = rng.normal();
    x(0) = label == Label::Fake ? 1.0 : -1.0;
    out.push_back({std::move(x), label});
  }
  return out;
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

RgbImage natural_image(Rng& rng, int size) {
  RgbImage img{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(60, 190);
    gx[c] = rng.uniform(-60, 60);
    gy[c] = rng.uniform(-60, 60);
  }
  struct Blob {
    double cx, cy, r, amp[3];
  };
  std::vector<Blob> blobs(2 + rng.below(3));
  for (auto& b : blobs) {
    b.cx = rng.uniform(0, size);
    b.cy = rng.uniform(0, size);
    b.r = rng.uniform(size / 10.0, size / 3.0);
    for (double& a : b.amp) a = rng.uniform(-70, 70);
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) / size - 0.5, v = static_cast<double>(y) / size - 0.5;
      for (int c = 0; c < 3; ++c) {
        double value = base[c] + gx[c] * u + gy[c] * v;
        for (const auto& b : blobs) {
          const double d2 = ((x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy)) / (b.r * b.r);
          value += b.amp[c] * std::exp(-d2);
        }
        img.at(y, x, c) = to_byte(value + rng.normal(0, 2));
      }
    }
  }
  return img;
}

// Upsampling-style checkerboard, localized to a random window.
void add_artifacts(RgbImage& img, Rng& rng) {
  const int cell = 1 + static_cast<int>(rng.below(2));
  const double strength = rng.uniform(18, 40);
  const int size = img.width;
  const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(size / 2)));
  const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(size / 2)));
  const int extent = size / 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size / 2)));
  for (int y = y0; y < std::min(size, y0 + extent); ++y) {
    for (int x = x0; x < std::min(size, x0 + extent); ++x) {
      const double sign = ((x / cell) + (y / cell)) % 2 == 0 ? 1.0 : -1.0;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = to_byte(img.at(y, x, c) + sign * strength);
    }
  }
}

// Blocky pseudo-glyph strokes.
void draw_text(RgbImage& img, Rng& rng, bool opaque_background) {
  const int size = img.width;
  const std::uint8_t ink = rng.uniform() < 0.5 ? 0 : 255;
  if (opaque_background) {
    std::fill(img.data.begin(), img.data.end(), static_cast<std::uint8_t>(255 - ink));
  }
  const int glyph = std::max(4, size / 10);
  const int rows = 1 + static_cast<int>(rng.below(3));
  for (int r = 0; r < rows; ++r) {
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(size - glyph)));
    int x = static_cast<int>(rng.below(static_cast<std::uint64_t>(size / 4)));
    while (x + glyph < size) {
      const int strokes = 1 + static_cast<int>(rng.below(3));
      for (int s = 0; s < strokes; ++s) {
        const bool vertical = rng.uniform() < 0.5;
        const int offset = static_cast<int>(rng.below(static_cast<std::uint64_t>(glyph - 1)));
        for (int t = 0; t < glyph; ++t) {
          const int py = vertical ? y + t : y + offset;
          const int px = vertical ? x + offset : x + t;
          for (int c = 0; c < 3; ++c) img.at(py, px, c) = ink;
        }
      }
      x += glyph + 1;
    }
  }
}

void save_numbered(const fs::path& dir, int i, const RgbImage& img) {
  char name[32];
  std::snprintf(name, sizeof name, "%05d.png", i);
  write_png(dir / name, img);
}

}  // namespace

void write_image_corpus(const fs::path& root, int n_real, int n_fake, std::uint64_t seed,
                        ImageCorpusOptions options) {
  if (options.size < 8) throw Error(ErrorKind::Argument, "synthetic images must be at least 8 pixels");
  fs::create_directories(root / "real");
  fs::create_directories(root / "fake");
  Rng rng(seed);
  for (int i = 0; i < n_real; ++i) save_numbered(root / "real", i, natural_image(rng, options.size));
  for (int i = 0; i < n_fake; ++i) {
    RgbImage img = natural_image(rng, options.size);
    add_artifacts(img, rng);
    save_numbered(root / "fake", i, img);
  }
}

void write_projection_corpus(const fs::path& root, int per_class, std::uint64_t seed, int size) {
  for (const char* sub : {"natural", "text", "overlaid"}) fs::create_directories(root / sub);
  Rng rng(seed);
  for (int i = 0; i < per_class; ++i) {
    save_numbered(root / "natural", i, natural_image(rng, size));
    RgbImage text = natural_image(rng, size);
    draw_text(text, rng, true);
    save_numbered(root / "text", i, text);
    RgbImage overlaid = natural_image(rng, size);
    draw_text(overlaid, rng, false);
    save_numbered(root / "overlaid", i, overlaid);
  }
}

}  // namespace fakescope
