#include "fakescope/relevance.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "fakescope/artifact.hpp"
#include "fakescope/error.hpp"

namespace fakescope {

using nlohmann::json;

namespace {

void check_dim(int dim) {
  if (dim < 1 || dim > kDistillDim) {
    throw Error(ErrorKind::Argument, "distilled dimension must be in 1..16, got " + std::to_string(dim));
  }
}

void require_capture(const BaseEncoderAdapter& adapter) {
  if (!adapter.info().supports_attention_capture) {
    throw Error(ErrorKind::Capability, "adapter '" + adapter.info().name + "' cannot capture attention");
  }
}

// d v_dim / d embedding = (W P)^T e_dim
Vector embedding_gradient(const DetectorPipeline& p, int dim) {
  return p.projection.matrix.transpose() * p.detector.W.row(dim - 1).transpose();
}

void check_rows(const HeadMaps& attention) {
  for (const Matrix& a : attention) {
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      if (std::abs(a.row(r).sum() - 1.0) > 1e-4) {
        throw Error(ErrorKind::Internal, "attention row does not sum to 1");
      }
    }
  }
}

std::vector<AttentionCapture> captures_from(const AttentionForward& fwd, const std::vector<HeadMaps>& grads, int k,
                                            int dim) {
  std::vector<AttentionCapture> out;
  for (std::size_t b = grads.size(); b-- > 0;) {
    AttentionCapture c;
    c.attention = fwd.trace.blocks[b].attention;
    c.gradient = grads[b];
    c.k = k;
    c.target_dim = dim;
    check_rows(c.attention);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

std::vector<AttentionCapture> capture_attention_chain(const PixelTensor& pixels, const DetectorPipeline& pipeline,
                                                      int dim) {
  check_dim(dim);
  require_capture(pipeline.adapter);
  const AttentionForward fwd = pipeline.adapter.forward_with_attention(pixels);
  const auto grads = pipeline.adapter.attention_gradients(fwd, embedding_gradient(pipeline, dim));
  return captures_from(fwd, grads, pipeline.adapter.info().patch_grid, dim);
}

AttentionCapture capture_attention(const PixelTensor& pixels, const DetectorPipeline& pipeline, int dim) {
  return std::move(capture_attention_chain(pixels, pipeline, dim).front());
}

Matrix gradient_weighted_attention(const AttentionCapture& capture) {
  if (capture.attention.empty() || capture.attention.size() != capture.gradient.size()) {
    throw Error(ErrorKind::Internal, "capture has mismatched head counts");
  }
  const auto t = capture.attention.front().rows();
  Matrix sum = Matrix::Zero(t, t);
  for (std::size_t h = 0; h < capture.attention.size(); ++h) {
    const Matrix& a = capture.attention[h];
    const Matrix& g = capture.gradient[h];
    if (a.rows() != t || a.cols() != t || g.rows() != t || g.cols() != t) {
      throw Error(ErrorKind::Internal, "capture tensors have inconsistent shapes");
    }
    // Clamp each head before averaging.
    sum += g.cwiseProduct(a).cwiseMax(0.0);
  }
  return sum / static_cast<double>(capture.attention.size());
}

Matrix class_row_grid(const Matrix& token_relevance, int k) {
  if (k < 1 || token_relevance.rows() != k * k + 1 || token_relevance.cols() != k * k + 1) {
    throw Error(ErrorKind::Internal, "token relevance is not (k^2+1) x (k^2+1) for k=" + std::to_string(k));
  }
  Matrix grid(k, k);
  for (int gy = 0; gy < k; ++gy) {
    for (int gx = 0; gx < k; ++gx) grid(gy, gx) = token_relevance(0, 1 + gy * k + gx);
  }
  return grid;
}

TokenRelevanceMap token_relevance_last(const AttentionCapture& capture) {
  return {class_row_grid(gradient_weighted_attention(capture), capture.k), capture.target_dim};
}

TokenRelevanceMap propagate_relevance_chain(const std::vector<AttentionCapture>& captures) {
  if (captures.empty()) throw Error(ErrorKind::Argument, "relevance chain needs at least one block");
  const auto t = captures.front().attention.empty() ? 0 : captures.front().attention.front().rows();
  for (const auto& c : captures) {
    if (c.attention.empty() || c.attention.front().rows() != t || c.k != captures.front().k) {
      throw Error(ErrorKind::Argument, "captures disagree on token count");
    }
  }
  Matrix r = Matrix::Ones(t, t);
  for (const auto& c : captures) r += gradient_weighted_attention(c) * r;
  return {class_row_grid(r, captures.front().k), captures.front().target_dim};
}

PixelRelevanceMap pixel_relevance(const TokenRelevanceMap& token_map, int height, int width) {
  const Matrix& g = token_map.grid;
  const auto k = static_cast<int>(g.rows());
  if (k < 1 || g.cols() != k) throw Error(ErrorKind::Argument, "token grid must be square");
  if (height < k || width < k) {
    throw Error(ErrorKind::Argument, "target size " + std::to_string(height) + "x" + std::to_string(width) +
                                         " is smaller than the " + std::to_string(k) + "x" + std::to_string(k) +
                                         " grid");
  }
  PixelRelevanceMap out;
  out.height = height;
  out.width = width;
  out.target_dim = token_map.target_dim;
  out.values.assign(static_cast<std::size_t>(height) * width, 0.0f);
  if (g.maxCoeff() == g.minCoeff()) {
    out.degenerate = true;
    return out;
  }

  auto source = [k](int i, int n) { return n == 1 ? 0.0 : static_cast<double>(i) * (k - 1) / (n - 1); };
  std::vector<double> up(out.values.size());
  for (int y = 0; y < height; ++y) {
    const double fy = source(y, height);
    const int y0 = std::min(static_cast<int>(fy), k - 1);
    const int y1 = std::min(y0 + 1, k - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = source(x, width);
      const int x0 = std::min(static_cast<int>(fx), k - 1);
      const int x1 = std::min(x0 + 1, k - 1);
      const double wx = fx - x0;
      up[static_cast<std::size_t>(y) * width + x] =
          (1 - wy) * ((1 - wx) * g(y0, x0) + wx * g(y0, x1)) + wy * ((1 - wx) * g(y1, x0) + wx * g(y1, x1));
    }
  }
  const auto [lo_it, hi_it] = std::minmax_element(up.begin(), up.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < up.size(); ++i) {
    out.values[i] = static_cast<float>(std::clamp((up[i] - lo) / (hi - lo), 0.0, 1.0));
  }
  return out;
}

RelevanceStack relevance_stack(const PixelTensor& pixels, const DetectorPipeline& pipeline, int height, int width,
                               RelevanceOptions options) {
  require_capture(pipeline.adapter);
  const AttentionForward fwd = pipeline.adapter.forward_with_attention(pixels);
  const int k = pipeline.adapter.info().patch_grid;
  RelevanceStack stack;
  stack.source_id = pixels.source_id;
  for (int dim = 1; dim <= kDistillDim; ++dim) {
    const auto grads = pipeline.adapter.attention_gradients(fwd, embedding_gradient(pipeline, dim));
    const auto captures = captures_from(fwd, grads, k, dim);
    const TokenRelevanceMap tokens =
        options.chain ? propagate_relevance_chain(captures) : token_relevance_last(captures.front());
    stack.maps.push_back(pixel_relevance(tokens, height, width));
  }
  return stack;
}

void save_relevance_cache(const std::filesystem::path& path, const RelevanceStack& stack, int k) {
  if (stack.maps.size() != static_cast<std::size_t>(kDistillDim)) {
    throw Error(ErrorKind::Argument, "relevance stack must hold 16 maps");
  }
  const int h = stack.maps.front().height, w = stack.maps.front().width;
  std::vector<float> payload;
  payload.reserve(static_cast<std::size_t>(kDistillDim) * h * w);
  json degenerate = json::array();
  for (const auto& m : stack.maps) {
    if (m.height != h || m.width != w) throw Error(ErrorKind::Argument, "relevance maps differ in size");
    payload.insert(payload.end(), m.values.begin(), m.values.end());
    degenerate.push_back(m.degenerate);
  }
  write_artifact(path,
                 {{"image_id", stack.source_id}, {"k", k}, {"H", h}, {"W", w}, {"dims", kDistillDim},
                  {"dtype", "f32"}, {"degenerate", degenerate}},
                 payload);
}

RelevanceStack load_relevance_cache(const std::filesystem::path& path) {
  const Artifact a = read_artifact(path);
  const int h = a.header.value("H", 0), w = a.header.value("W", 0), dims = a.header.value("dims", 0);
  if (dims != kDistillDim || h <= 0 || w <= 0 || a.header.value("dtype", "") != "f32" ||
      a.payload.size() != static_cast<std::size_t>(dims) * h * w) {
    throw Error(ErrorKind::Validation, "malformed relevance cache " + path.string());
  }
  RelevanceStack stack;
  stack.source_id = a.header.value("image_id", "");
  const json degenerate = a.header.value("degenerate", json::array());
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int d = 0; d < dims; ++d) {
    PixelRelevanceMap m;
    m.height = h;
    m.width = w;
    m.target_dim = d + 1;
    m.values.assign(a.payload.begin() + static_cast<std::ptrdiff_t>(d * plane),
                    a.payload.begin() + static_cast<std::ptrdiff_t>((d + 1) * plane));
    m.degenerate = degenerate.size() == static_cast<std::size_t>(dims)
                       ? degenerate[static_cast<std::size_t>(d)].get<bool>()
                       : std::all_of(m.values.begin(), m.values.end(), [](float v) { return v == 0.0f; });
    stack.maps.push_back(std::move(m));
  }
  return stack;
}

}  // namespace fakescope
