#pragma once

// Seeded synthetic corpora for tests, demos and the acceptance suite.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fakescope/detector.hpp"
#include "fakescope/encoder.hpp"

namespace fakescope {

struct GaussianCorpusOptions {
  int dims = kVisualDim;
  int informative = 8;  // leading coordinates carrying the class shift
  double shift = 0.5;   // class means at +-shift on the informative coordinates
};

/// Alternating labels; class means -shift (real) and +shift (fake), unit covariance.
std::vector<LabeledVector> two_gaussian_corpus(int n, std::uint64_t seed, GaussianCorpusOptions options = {});

/// Coordinate 0 is exactly -1 (real) or +1 (fake); the rest is unit noise.
std::vector<LabeledVector> separable_corpus(int n, std::uint64_t seed, int dims = kVisualDim);

struct ImageCorpusOptions {
  int size = 64;
};

/// Writes real/ and fake/ PNG folders. Real images are smooth color fields with
/// soft blobs; fake images share that distribution plus periodic high-frequency
/// artifacts of random phase and strength.
void write_image_corpus(const std::filesystem::path& root, int n_real, int n_fake, std::uint64_t seed,
                        ImageCorpusOptions options = {});

/// Writes natural/, text/ and overlaid/ folders for the projection trainer.
void write_projection_corpus(const std::filesystem::path& root, int per_class, std::uint64_t seed, int size = 64);

}  // namespace fakescope
