#include "fakescope/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "fakescope/artifact.hpp"
#include "fakescope/error.hpp"
#include "fakescope/parallel.hpp"
#include "fakescope/rng.hpp"

namespace fakescope {

namespace fs = std::filesystem;
using nlohmann::json;

AttentionForward BaseEncoderAdapter::forward_with_attention(const PixelTensor&) const {
  throw Error(ErrorKind::Capability, "adapter '" + info().name + "' does not expose attention maps");
}

std::vector<HeadMaps> BaseEncoderAdapter::attention_gradients(const AttentionForward&, const Vector&) const {
  throw Error(ErrorKind::Capability, "adapter '" + info().name + "' does not expose attention maps");
}

// ---------------------------------------------------------------------------
// ViT adapter

VitAdapter::VitAdapter(std::string name, VisionTransformerWeights weights)
    : weights_(std::move(weights)), encoder_(weights_.encoder, weights_.blocks) {
  const int grid = weights_.image_size / weights_.patch;
  const int d = weights_.encoder.width;
  if (grid * weights_.patch != weights_.image_size) {
    throw Error(ErrorKind::Adapter, "image size must be a multiple of the patch size");
  }
  if (weights_.patch_embed.rows() != d || weights_.patch_embed.cols() != 3 * weights_.patch * weights_.patch ||
      weights_.class_embedding.size() != d || weights_.position.rows() != grid * grid + 1 ||
      weights_.position.cols() != d || weights_.proj.cols() != d || weights_.proj.rows() != weights_.out_dim) {
    throw Error(ErrorKind::Adapter, "inconsistent vision transformer weight shapes");
  }
  info_.name = std::move(name);
  info_.input_size = weights_.image_size;
  info_.embed_dim = weights_.out_dim;
  info_.patch_grid = grid;
  info_.heads = weights_.encoder.heads;
  info_.layers = weights_.encoder.layers;
  info_.supports_attention_capture = true;
}

Matrix VitAdapter::tokens(const PixelTensor& pixels) const {
  if (pixels.size != weights_.image_size ||
      pixels.data.size() != static_cast<std::size_t>(pixels.size) * pixels.size * 3) {
    throw Error(ErrorKind::Argument, "pixel tensor is " + std::to_string(pixels.size) + "x" +
                                         std::to_string(pixels.size) + ", adapter expects " +
                                         std::to_string(weights_.image_size));
  }
  const int p = weights_.patch;
  const int grid = info_.patch_grid;
  const int d = weights_.encoder.width;
  Matrix patches(grid * grid, 3 * p * p);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      auto row = patches.row(gy * grid + gx);
      for (int c = 0; c < 3; ++c) {
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            row(c * p * p + py * p + px) = pixels.at(gy * p + py, gx * p + px, c);
          }
        }
      }
    }
  }
  Matrix tok(grid * grid + 1, d);
  tok.row(0) = weights_.class_embedding.transpose();
  tok.bottomRows(grid * grid) = patches * weights_.patch_embed.transpose();
  tok += weights_.position;
  return layer_norm(tok, weights_.ln_pre, weights_.encoder.ln_eps, nullptr);
}

AttentionForward VitAdapter::forward_with_attention(const PixelTensor& pixels) const {
  AttentionForward fwd;
  fwd.trace = encoder_.forward(tokens(pixels));
  const Matrix cls = fwd.trace.output.topRows(1);
  const Matrix normed = layer_norm(cls, weights_.ln_post, weights_.encoder.ln_eps, &fwd.post_norm);
  fwd.embedding = weights_.proj * normed.row(0).transpose();
  return fwd;
}

Vector VitAdapter::encode(const PixelTensor& pixels) const { return forward_with_attention(pixels).embedding; }

std::vector<HeadMaps> VitAdapter::attention_gradients(const AttentionForward& forward,
                                                      const Vector& d_embedding) const {
  if (d_embedding.size() != weights_.out_dim) {
    throw Error(ErrorKind::Argument, "embedding gradient has wrong length");
  }
  const Matrix d_normed = (weights_.proj.transpose() * d_embedding).transpose();
  const Matrix d_cls = layer_norm_backward(d_normed, weights_.ln_post, forward.post_norm);
  Matrix d_output = Matrix::Zero(forward.trace.output.rows(), forward.trace.output.cols());
  d_output.row(0) = d_cls.row(0);
  return encoder_.attention_gradients(forward.trace, d_output);
}

std::uint64_t VitAdapter::parameter_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const auto& m) {
    h = fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
  };
  mix(weights_.patch_embed);
  mix(weights_.class_embedding);
  mix(weights_.position);
  mix(weights_.ln_pre.gamma);
  mix(weights_.ln_pre.beta);
  mix(weights_.ln_post.gamma);
  mix(weights_.ln_post.beta);
  mix(weights_.proj);
  return encoder_.checksum(h);
}

std::unique_ptr<VitAdapter> make_mock_adapter(std::uint64_t seed) {
  VisionTransformerWeights w;
  w.image_size = kDefaultInputSize;
  w.patch = 32;
  w.encoder = EncoderConfig{.width = 64, .heads = 4, .layers = 2, .mlp = 128};
  w.out_dim = kGenericDim;
  const int d = w.encoder.width;
  const int grid = w.image_size / w.patch;
  const int patch_dim = 3 * w.patch * w.patch;

  Rng rng(seed);
  auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double stddev) {
    Matrix out(rows, cols);
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = rng.normal(0.0, stddev);
    return out;
  };
  w.patch_embed = gaussian(d, patch_dim, 1.0 / std::sqrt(static_cast<double>(patch_dim)));
  w.class_embedding = gaussian(d, 1, 0.5).col(0);
  w.position = gaussian(grid * grid + 1, d, 0.5);
  w.ln_pre = {Vector::Ones(d), Vector::Zero(d)};
  w.ln_post = {Vector::Ones(d), Vector::Zero(d)};
  w.proj = gaussian(w.out_dim, d, 1.0 / std::sqrt(static_cast<double>(d)));
  w.blocks = random_blocks(w.encoder, rng.next());
  return std::make_unique<VitAdapter>("mock:seed=" + std::to_string(seed), std::move(w));
}

// ---------------------------------------------------------------------------
// Pooled random-feature adapter

namespace {

class PooledAdapter final : public BaseEncoderAdapter {
 public:
  explicit PooledAdapter(std::uint64_t seed) {
    info_.name = "pooled:seed=" + std::to_string(seed);
    info_.heads = 0;
    info_.layers = 0;
    info_.supports_attention_capture = false;
    Rng rng(seed);
    features_ = Matrix(kGenericDim, kPool * kPool * 3);
    for (Eigen::Index i = 0; i < features_.size(); ++i) features_.data()[i] = rng.normal(0.0, 0.3);
  }

  const AdapterInfo& info() const override { return info_; }

  Vector encode(const PixelTensor& pixels) const override {
    if (pixels.size != info_.input_size) throw Error(ErrorKind::Argument, "pixel tensor has wrong size");
    Vector pooled = Vector::Zero(kPool * kPool * 3);
    const int cell = pixels.size / kPool;
    for (int y = 0; y < cell * kPool; ++y) {
      for (int x = 0; x < cell * kPool; ++x) {
        for (int c = 0; c < 3; ++c) {
          pooled(((y / cell) * kPool + x / cell) * 3 + c) += pixels.at(y, x, c);
        }
      }
    }
    pooled /= static_cast<double>(cell * cell);
    return (features_ * pooled).array().tanh();
  }

  std::uint64_t parameter_checksum() const override {
    return fnv1a(features_.data(), static_cast<std::size_t>(features_.size()) * sizeof(double));
  }

 private:
  static constexpr int kPool = 7;
  AdapterInfo info_;
  Matrix features_;
};

// --- safetensors -----------------------------------------------------------

struct TensorView {
  std::vector<std::int64_t> shape;
  std::vector<double> values;
};

double half_to_double(std::uint16_t h) {
  const int sign = (h >> 15) & 1;
  const int exponent = (h >> 10) & 0x1f;
  const int mantissa = h & 0x3ff;
  double v;
  if (exponent == 0) {
    v = std::ldexp(mantissa, -24);
  } else if (exponent == 31) {
    v = mantissa ? std::nan("") : INFINITY;
  } else {
    v = std::ldexp(mantissa + 1024, exponent - 25);
  }
  return sign ? -v : v;
}

std::map<std::string, TensorView> read_safetensors(const fs::path& path, json* metadata) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 8) throw Error(ErrorKind::Adapter, "truncated safetensors file " + path.string());
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | static_cast<unsigned char>(bytes[i]);
  if (8 + header_len > bytes.size()) throw Error(ErrorKind::Adapter, "bad safetensors header length");
  const json header = json::parse(bytes.substr(8, header_len));
  const char* base = bytes.data() + 8 + header_len;
  const std::size_t data_size = bytes.size() - 8 - header_len;

  std::map<std::string, TensorView> tensors;
  for (const auto& [name, spec] : header.items()) {
    if (name == "__metadata__") {
      if (metadata) *metadata = spec;
      continue;
    }
    TensorView view;
    view.shape = spec.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = spec.at("data_offsets").get<std::vector<std::size_t>>();
    const std::string dtype = spec.at("dtype").get<std::string>();
    if (offsets.size() != 2 || offsets[1] > data_size || offsets[0] > offsets[1]) {
      throw Error(ErrorKind::Adapter, "bad offsets for tensor " + name);
    }
    const char* p = base + offsets[0];
    const std::size_t nbytes = offsets[1] - offsets[0];
    if (dtype == "F32") {
      view.values.resize(nbytes / 4);
      for (std::size_t i = 0; i < view.values.size(); ++i) {
        float f;
        std::memcpy(&f, p + 4 * i, 4);
        view.values[i] = f;
      }
    } else if (dtype == "F16" || dtype == "BF16") {
      view.values.resize(nbytes / 2);
      for (std::size_t i = 0; i < view.values.size(); ++i) {
        std::uint16_t h;
        std::memcpy(&h, p + 2 * i, 2);
        if (dtype == "F16") {
          view.values[i] = half_to_double(h);
        } else {
          view.values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
        }
      }
    } else {
      throw Error(ErrorKind::Adapter, "unsupported dtype " + dtype + " for tensor " + name);
    }
    tensors.emplace(name, std::move(view));
  }
  return tensors;
}

class TensorSource {
 public:
  TensorSource(std::map<std::string, TensorView> tensors, std::string prefix)
      : tensors_(std::move(tensors)), prefix_(std::move(prefix)) {}

  bool has(const std::string& name) const { return tensors_.count(prefix_ + name) != 0; }

  Matrix matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
    const TensorView& t = get(name);
    if (static_cast<Eigen::Index>(t.values.size()) != rows * cols) {
      throw Error(ErrorKind::Adapter, "tensor " + name + " has unexpected size");
    }
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = t.values[static_cast<std::size_t>(r * cols + c)];
    }
    return m;
  }

  Vector vector(const std::string& name, Eigen::Index n) const { return matrix(name, n, 1).col(0); }

  const TensorView& get(const std::string& name) const {
    auto it = tensors_.find(prefix_ + name);
    if (it == tensors_.end()) throw Error(ErrorKind::Adapter, "missing tensor " + prefix_ + name);
    return it->second;
  }

 private:
  std::map<std::string, TensorView> tensors_;
  std::string prefix_;
};

std::string layer_prefix(int i) { return "vision_model.encoder.layers." + std::to_string(i) + "."; }

}  // namespace

std::unique_ptr<BaseEncoderAdapter> make_pooled_adapter(std::uint64_t seed) {
  return std::make_unique<PooledAdapter>(seed);
}

std::unique_ptr<VitAdapter> load_clip_adapter(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::Adapter, "encoder weights not found: " + path.string());
  json metadata = json::object();
  const TensorSource src(read_safetensors(path, &metadata), "");

  VisionTransformerWeights w;
  const TensorView& patch = src.get("vision_model.embeddings.patch_embedding.weight");
  if (patch.shape.size() != 4 || patch.shape[1] != 3 || patch.shape[2] != patch.shape[3]) {
    throw Error(ErrorKind::Adapter, "unexpected patch embedding shape");
  }
  const int d = static_cast<int>(patch.shape[0]);
  w.patch = static_cast<int>(patch.shape[2]);
  const auto positions = src.get("vision_model.embeddings.position_embedding.weight").shape.at(0);
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(positions - 1))));
  w.image_size = grid * w.patch;
  int layers = 0;
  while (src.has(layer_prefix(layers) + "layer_norm1.weight")) ++layers;
  const int mlp = static_cast<int>(src.get(layer_prefix(0) + "mlp.fc1.weight").shape.at(0));
  const TensorView& proj = src.get("visual_projection.weight");
  w.out_dim = static_cast<int>(proj.shape.at(0));

  auto meta_int = [&](const char* key, int fallback) {
    if (metadata.contains(key) && metadata[key].is_string()) return std::stoi(metadata[key].get<std::string>());
    return fallback;
  };
  w.encoder.width = d;
  w.encoder.heads = meta_int("heads", d / 64);
  w.encoder.layers = layers;
  w.encoder.mlp = mlp;
  w.encoder.activation = (metadata.contains("activation") && metadata["activation"] == "gelu")
                             ? Activation::Gelu
                             : Activation::QuickGelu;
  w.encoder.ln_eps = 1e-5;

  w.patch_embed = src.matrix("vision_model.embeddings.patch_embedding.weight", d, 3 * w.patch * w.patch);
  w.class_embedding = src.vector("vision_model.embeddings.class_embedding", d);
  w.position = src.matrix("vision_model.embeddings.position_embedding.weight", positions, d);
  w.ln_pre = {src.vector("vision_model.pre_layrnorm.weight", d), src.vector("vision_model.pre_layrnorm.bias", d)};
  w.ln_post = {src.vector("vision_model.post_layernorm.weight", d),
               src.vector("vision_model.post_layernorm.bias", d)};
  w.proj = src.matrix("visual_projection.weight", w.out_dim, d);
  for (int i = 0; i < layers; ++i) {
    const std::string p = layer_prefix(i);
    BlockWeights b;
    b.ln1 = {src.vector(p + "layer_norm1.weight", d), src.vector(p + "layer_norm1.bias", d)};
    b.ln2 = {src.vector(p + "layer_norm2.weight", d), src.vector(p + "layer_norm2.bias", d)};
    b.wq = src.matrix(p + "self_attn.q_proj.weight", d, d);
    b.bq = src.vector(p + "self_attn.q_proj.bias", d);
    b.wk = src.matrix(p + "self_attn.k_proj.weight", d, d);
    b.bk = src.vector(p + "self_attn.k_proj.bias", d);
    b.wv = src.matrix(p + "self_attn.v_proj.weight", d, d);
    b.bv = src.vector(p + "self_attn.v_proj.bias", d);
    b.wo = src.matrix(p + "self_attn.out_proj.weight", d, d);
    b.bo = src.vector(p + "self_attn.out_proj.bias", d);
    b.w1 = src.matrix(p + "mlp.fc1.weight", mlp, d);
    b.b1 = src.vector(p + "mlp.fc1.bias", mlp);
    b.w2 = src.matrix(p + "mlp.fc2.weight", d, mlp);
    b.b2 = src.vector(p + "mlp.fc2.bias", d);
    w.blocks.push_back(std::move(b));
  }
  return std::make_unique<VitAdapter>("clip-vit-b32", std::move(w));
}

void save_vit_safetensors(const fs::path& path, const VisionTransformerWeights& w) {
  json header = json::object();
  std::string data;
  const int d = w.encoder.width;
  auto add = [&](const std::string& name, const Eigen::MatrixXd& m, std::vector<std::int64_t> shape) {
    const std::size_t begin = data.size();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const float f = static_cast<float>(m(r, c));
        data.append(reinterpret_cast<const char*>(&f), sizeof(f));
      }
    }
    header[name] = {{"dtype", "F32"}, {"shape", shape}, {"data_offsets", {begin, data.size()}}};
  };
  auto add_vec = [&](const std::string& name, const Vector& v) {
    add(name, Matrix(v), {static_cast<std::int64_t>(v.size())});
  };
  add("vision_model.embeddings.patch_embedding.weight", w.patch_embed, {d, 3, w.patch, w.patch});
  add_vec("vision_model.embeddings.class_embedding", w.class_embedding);
  add("vision_model.embeddings.position_embedding.weight", w.position, {w.position.rows(), d});
  add_vec("vision_model.pre_layrnorm.weight", w.ln_pre.gamma);
  add_vec("vision_model.pre_layrnorm.bias", w.ln_pre.beta);
  add_vec("vision_model.post_layernorm.weight", w.ln_post.gamma);
  add_vec("vision_model.post_layernorm.bias", w.ln_post.beta);
  add("visual_projection.weight", w.proj, {w.out_dim, d});
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    const std::string p = layer_prefix(static_cast<int>(i));
    const BlockWeights& b = w.blocks[i];
    add_vec(p + "layer_norm1.weight", b.ln1.gamma);
    add_vec(p + "layer_norm1.bias", b.ln1.beta);
    add_vec(p + "layer_norm2.weight", b.ln2.gamma);
    add_vec(p + "layer_norm2.bias", b.ln2.beta);
    add(p + "self_attn.q_proj.weight", b.wq, {d, d});
    add_vec(p + "self_attn.q_proj.bias", b.bq);
    add(p + "self_attn.k_proj.weight", b.wk, {d, d});
    add_vec(p + "self_attn.k_proj.bias", b.bk);
    add(p + "self_attn.v_proj.weight", b.wv, {d, d});
    add_vec(p + "self_attn.v_proj.bias", b.bv);
    add(p + "self_attn.out_proj.weight", b.wo, {d, d});
    add_vec(p + "self_attn.out_proj.bias", b.bo);
    add(p + "mlp.fc1.weight", b.w1, {b.w1.rows(), d});
    add_vec(p + "mlp.fc1.bias", b.b1);
    add(p + "mlp.fc2.weight", b.w2, {d, b.w2.cols()});
    add_vec(p + "mlp.fc2.bias", b.b2);
  }
  header["__metadata__"] = {
      {"heads", std::to_string(w.encoder.heads)},
      {"activation", w.encoder.activation == Activation::Gelu ? "gelu" : "quick_gelu"}};
  const std::string text = header.dump();
  std::string out(8, '\0');
  std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((len >> (8 * i)) & 0xff);
  out += text;
  out += data;
  write_file_atomic(path, out);
}

std::unique_ptr<BaseEncoderAdapter> make_adapter(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  std::map<std::string, std::string> params;
  if (colon != std::string::npos) {
    std::string rest = spec.substr(colon + 1);
    std::size_t pos = 0;
    while (pos <= rest.size()) {
      const auto comma = rest.find(',', pos);
      const std::string item = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      if (const auto eq = item.find('='); eq != std::string::npos) {
        params[item.substr(0, eq)] = item.substr(eq + 1);
      } else if (!item.empty()) {
        throw Error(ErrorKind::Adapter, "malformed adapter parameter '" + item + "'");
      }
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  }
  auto seed = [&]() -> std::uint64_t { return params.count("seed") ? std::stoull(params["seed"]) : 1; };
  if (kind == "mock") return make_mock_adapter(seed());
  if (kind == "pooled") return make_pooled_adapter(seed());
  if (kind == "clip-vit-b32" || kind == "clip") {
    if (!params.count("weights")) {
      throw Error(ErrorKind::Adapter, "clip-vit-b32 requires weights=PATH to a safetensors checkpoint");
    }
    return load_clip_adapter(params["weights"]);
  }
  throw Error(ErrorKind::Adapter, "unknown adapter '" + kind + "'");
}

GenericEmbedding encode_base(const PixelTensor& pixels, const BaseEncoderAdapter& adapter) {
  if (pixels.size != adapter.info().input_size) {
    throw Error(ErrorKind::Argument, "pixel tensor size " + std::to_string(pixels.size) +
                                         " does not match adapter input " +
                                         std::to_string(adapter.info().input_size));
  }
  GenericEmbedding out{adapter.encode(pixels), pixels.source_id};
  if (!out.vector.allFinite()) throw Error(ErrorKind::Numeric, "non-finite base embedding for " + pixels.source_id);
  return out;
}

// ---------------------------------------------------------------------------
// Forget projection

double ForgetProjection::orthonormality_defect() const {
  const Matrix gram = matrix * matrix.transpose();
  return (Matrix::Identity(gram.rows(), gram.cols()) - gram).squaredNorm();
}

ForgetProjection bypass_projection(TestOnly) {
  return {Matrix::Identity(kVisualDim, kGenericDim), ProjectionProvenance::Bypass};
}

Matrix orthonormal_rows(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix g(cols, rows);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(cols, rows);
  // Fix column signs so the result does not depend on the QR sign convention.
  const Matrix r = qr.matrixQR().topRows(rows).triangularView<Eigen::Upper>();
  for (int j = 0; j < rows; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  return q.transpose();
}

ForgetProjection load_projection(const fs::path& path) {
  const Artifact a = read_artifact(path);
  const json& h = a.header;
  if (h.value("rows", 0) != kVisualDim || h.value("cols", 0) != kGenericDim || h.value("dtype", "") != "f32" ||
      h.value("layout", "") != "row-major") {
    throw Error(ErrorKind::Validation, "projection header must be {rows:256, cols:512, dtype:f32, layout:row-major}");
  }
  if (a.payload.size() != static_cast<std::size_t>(kVisualDim) * kGenericDim) {
    throw Error(ErrorKind::Validation, "projection payload has " + std::to_string(a.payload.size()) + " values");
  }
  ForgetProjection p;
  p.matrix.resize(kVisualDim, kGenericDim);
  for (int r = 0; r < kVisualDim; ++r) {
    for (int c = 0; c < kGenericDim; ++c) p.matrix(r, c) = a.payload[static_cast<std::size_t>(r) * kGenericDim + c];
  }
  const std::string provenance = h.value("provenance", "loaded");
  p.provenance = provenance == "bypass"    ? ProjectionProvenance::Bypass
                 : provenance == "trained" ? ProjectionProvenance::Trained
                                           : ProjectionProvenance::Loaded;
  if (!p.matrix.allFinite()) throw Error(ErrorKind::Validation, "projection contains non-finite values");
  if (const double defect = p.orthonormality_defect(); defect > kOrthonormalityTolerance) {
    throw Error(ErrorKind::Validation, "projection rows are not orthonormal (defect " + std::to_string(defect) + ")");
  }
  return p;
}

void save_projection(const fs::path& path, const ForgetProjection& projection) {
  if (projection.matrix.rows() != kVisualDim || projection.matrix.cols() != kGenericDim) {
    throw Error(ErrorKind::Argument, "projection must be 256x512");
  }
  std::vector<float> payload;
  payload.reserve(static_cast<std::size_t>(kVisualDim) * kGenericDim);
  for (int r = 0; r < kVisualDim; ++r) {
    for (int c = 0; c < kGenericDim; ++c) payload.push_back(static_cast<float>(projection.matrix(r, c)));
  }
  const char* provenance = projection.provenance == ProjectionProvenance::Trained ? "trained"
                           : projection.provenance == ProjectionProvenance::Bypass ? "bypass"
                                                                                   : "loaded";
  write_artifact(path,
                 {{"rows", kVisualDim}, {"cols", kGenericDim}, {"dtype", "f32"}, {"layout", "row-major"},
                  {"provenance", provenance}},
                 payload);
}

VisualEmbedding apply_forget_projection(const GenericEmbedding& embedding, const ForgetProjection& projection) {
  if (projection.matrix.rows() != kVisualDim || projection.matrix.cols() != embedding.vector.size()) {
    throw Error(ErrorKind::Argument, "projection shape does not match embedding");
  }
  VisualEmbedding out{projection.matrix * embedding.vector, embedding.source_id};
  if (!out.vector.allFinite()) {
    throw Error(ErrorKind::Numeric, "non-finite visual embedding for " + embedding.source_id);
  }
  return out;
}

ProjectionCorpus load_projection_corpus(const fs::path& root) {
  ProjectionCorpus corpus;
  auto collect = [&](const char* name, std::vector<fs::path>& out) {
    const fs::path dir = root / name;
    if (!fs::is_directory(dir)) return;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file()) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
  };
  collect("natural", corpus.natural);
  collect("text", corpus.text);
  collect("overlaid", corpus.overlaid);
  return corpus;
}

ForgetProjection train_forget_projection(const ProjectionCorpus& corpus, const BaseEncoderAdapter& adapter,
                                         std::uint64_t seed, ProjectionTrainingOptions options) {
  if (corpus.natural.empty() || corpus.text.empty() || corpus.overlaid.empty()) {
    throw Error(ErrorKind::TrainingData, "projection corpus needs natural, text and overlaid images");
  }
  if (adapter.info().embed_dim != kGenericDim) {
    throw Error(ErrorKind::Argument, "adapter must produce 512-d embeddings");
  }
  auto embed_all = [&](const std::vector<fs::path>& paths) {
    Matrix out(kGenericDim, static_cast<Eigen::Index>(paths.size()));
    for (std::size_t i = 0; i < paths.size(); ++i) {
      const PixelTensor px = to_pixels(decode_image(paths[i]), adapter.info().input_size, paths[i].string());
      out.col(static_cast<Eigen::Index>(i)) = adapter.encode(px);
    }
    return out;
  };
  const Matrix natural = embed_all(corpus.natural);
  const Matrix text = embed_all(corpus.text);
  const Matrix overlaid = embed_all(corpus.overlaid);

  // Text-bearing directions: text-only embeddings plus what overlaid text adds
  // on top of the average natural image. Natural variance is retained.
  const Vector natural_mean = natural.rowwise().mean();
  Matrix text_bearing(kGenericDim, text.cols() + overlaid.cols());
  text_bearing << text, overlaid.colwise() - natural_mean;
  const Matrix natural_centered = natural.colwise() - natural_mean;
  const Matrix objective = text_bearing * text_bearing.transpose() / static_cast<double>(text_bearing.cols()) -
                           natural_centered * natural_centered.transpose() / static_cast<double>(natural.cols());
  // Scale-free objective so the learning rate is meaningful for any encoder.
  const double scale = std::max(objective.cwiseAbs().maxCoeff(), 1e-12);
  const Matrix c = objective / scale;

  Matrix m = orthonormal_rows(kVisualDim, kGenericDim, seed);
  Matrix m1 = Matrix::Zero(m.rows(), m.cols());
  Matrix m2 = Matrix::Zero(m.rows(), m.cols());
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 1; it <= options.iterations; ++it) {
    const Matrix residual = Matrix::Identity(kVisualDim, kVisualDim) - m * m.transpose();
    const Matrix grad = 2.0 * m * c - 4.0 * options.lambda_ortho * residual * m;
    m1 = b1 * m1 + (1 - b1) * grad;
    m2 = b2 * m2 + (1 - b2) * grad.cwiseProduct(grad);
    const double c1 = 1 - std::pow(b1, it), c2 = 1 - std::pow(b2, it);
    m.array() -= options.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
    if (!m.allFinite()) throw Error(ErrorKind::Numeric, "projection training diverged at iteration " + std::to_string(it));
  }
  // Symmetric re-orthonormalization, M <- (M M^T)^{-1/2} M, removes the residual defect.
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m * m.transpose());
  const Vector inv_sqrt = eig.eigenvalues().cwiseMax(1e-12).cwiseSqrt().cwiseInverse();
  m = eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose() * m;

  ForgetProjection p{m, ProjectionProvenance::Trained};
  if (p.orthonormality_defect() > kOrthonormalityTolerance) {
    throw Error(ErrorKind::Numeric, "trained projection violates the orthonormality bound");
  }
  return p;
}

std::vector<BatchEntry> encode_visual_batch(const std::vector<ImageRecord>& records,
                                            const BaseEncoderAdapter& adapter,
                                            const ForgetProjection& projection) {
  std::vector<BatchEntry> out(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    BatchEntry& entry = out[i];
    entry.source_id = records[i].id;
    try {
      const PixelTensor px = load_pixels(records[i], adapter.info().input_size);
      entry.embedding = apply_forget_projection(encode_base(px, adapter), projection);
    } catch (const std::exception& e) {
      entry.error = e.what();
    }
  });
  return out;
}

}  // namespace fakescope
