#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fakescope/dataset.hpp"
#include "fakescope/transformer.hpp"

namespace fakescope {

inline constexpr int kGenericDim = 512;
inline constexpr int kVisualDim = 256;

struct GenericEmbedding {
  Vector vector;
  std::string source_id;
};

struct VisualEmbedding {
  Vector vector;
  std::string source_id;
};

struct AdapterInfo {
  std::string name;
  int input_size = kDefaultInputSize;
  int embed_dim = kGenericDim;
  int patch_grid = 7;
  int heads = 0;
  int layers = 0;
  bool supports_attention_capture = false;
};

/// Forward pass state retained for attention-gradient queries.
struct AttentionForward {
  Vector embedding;
  EncoderTrace trace;
  LayerNormTrace post_norm;
};

/// Frozen image encoder. Implementations are immutable after construction and
/// safe to call concurrently.
class BaseEncoderAdapter {
 public:
  virtual ~BaseEncoderAdapter() = default;

  virtual const AdapterInfo& info() const = 0;
  virtual Vector encode(const PixelTensor& pixels) const = 0;
  virtual std::uint64_t parameter_checksum() const = 0;

  /// Throws a capability error unless info().supports_attention_capture.
  virtual AttentionForward forward_with_attention(const PixelTensor& pixels) const;

  /// d(target)/d(attention) for every block and head, where d_embedding is
  /// d(target)/d(embedding).
  virtual std::vector<HeadMaps> attention_gradients(const AttentionForward& forward,
                                                    const Vector& d_embedding) const;
};

struct VisionTransformerWeights {
  int image_size = kDefaultInputSize;
  int patch = 32;
  EncoderConfig encoder;
  int out_dim = kGenericDim;
  Matrix patch_embed;  // D x (3 * patch * patch), input flattened as [c][py][px]
  Vector class_embedding;
  Matrix position;  // (grid^2 + 1) x D
  LayerNormWeights ln_pre;
  std::vector<BlockWeights> blocks;
  LayerNormWeights ln_post;
  Matrix proj;  // out_dim x D
};

/// ViT image tower in the CLIP layout: patch embedding, class token, pre-norm,
/// transformer blocks, post-norm on the class token, linear projection.
class VitAdapter final : public BaseEncoderAdapter {
 public:
  VitAdapter(std::string name, VisionTransformerWeights weights);

  const AdapterInfo& info() const override { return info_; }
  Vector encode(const PixelTensor& pixels) const override;
  std::uint64_t parameter_checksum() const override;
  AttentionForward forward_with_attention(const PixelTensor& pixels) const override;
  std::vector<HeadMaps> attention_gradients(const AttentionForward& forward,
                                            const Vector& d_embedding) const override;

  const VisionTransformerWeights& weights() const { return weights_; }
  const TransformerEncoder& encoder() const { return encoder_; }

  Matrix tokens(const PixelTensor& pixels) const;

 private:
  AdapterInfo info_;
  VisionTransformerWeights weights_;
  TransformerEncoder encoder_;
};

/// Small seeded ViT (224 input, 32 patch, 7x7 grid, 2 blocks, 4 heads, width 64).
std::unique_ptr<VitAdapter> make_mock_adapter(std::uint64_t seed);

/// Pooled-color random features; no attention, used to exercise capability checks.
std::unique_ptr<BaseEncoderAdapter> make_pooled_adapter(std::uint64_t seed);

/// CLIP ViT-B/32 vision tower from a Hugging Face safetensors checkpoint.
std::unique_ptr<VitAdapter> load_clip_adapter(const std::filesystem::path& weights);

void save_vit_safetensors(const std::filesystem::path& path, const VisionTransformerWeights& weights);

/// "mock", "mock:seed=N", "pooled:seed=N", "clip-vit-b32:weights=PATH".
std::unique_ptr<BaseEncoderAdapter> make_adapter(const std::string& spec);

GenericEmbedding encode_base(const PixelTensor& pixels, const BaseEncoderAdapter& adapter);

enum class ProjectionProvenance { Loaded, Trained, Bypass };

struct ForgetProjection {
  Matrix matrix;  // 256 x 512
  ProjectionProvenance provenance = ProjectionProvenance::Loaded;

  /// ||I - M M^T||_F^2
  double orthonormality_defect() const;
};

inline constexpr double kOrthonormalityTolerance = 0.05;

struct TestOnly {
  explicit TestOnly() = default;
};

/// Leading rows of the identity; not accepted by snapshot builds.
ForgetProjection bypass_projection(TestOnly);

ForgetProjection load_projection(const std::filesystem::path& path);
void save_projection(const std::filesystem::path& path, const ForgetProjection& projection);

/// Seeded matrix with orthonormal rows (QR of a Gaussian).
Matrix orthonormal_rows(int rows, int cols, std::uint64_t seed);

VisualEmbedding apply_forget_projection(const GenericEmbedding& embedding, const ForgetProjection& projection);

struct ProjectionCorpus {
  std::vector<std::filesystem::path> natural;
  std::vector<std::filesystem::path> text;
  std::vector<std::filesystem::path> overlaid;
};

/// Directory with natural/, text/ and overlaid/ subfolders.
ProjectionCorpus load_projection_corpus(const std::filesystem::path& root);

struct ProjectionTrainingOptions {
  int iterations = 200;
  double learning_rate = 1e-2;
  double lambda_ortho = 10.0;
};

/// Learns rows that suppress text-bearing directions while retaining natural-image
/// variance, under an orthogonality penalty.
ForgetProjection train_forget_projection(const ProjectionCorpus& corpus, const BaseEncoderAdapter& adapter,
                                         std::uint64_t seed, ProjectionTrainingOptions options = {});

struct BatchEntry {
  std::string source_id;
  std::optional<VisualEmbedding> embedding;
  std::string error;
};

std::vector<BatchEntry> encode_visual_batch(const std::vector<ImageRecord>& records,
                                            const BaseEncoderAdapter& adapter,
                                            const ForgetProjection& projection);

}  // namespace fakescope
