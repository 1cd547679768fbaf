#include "fakescope/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "fakescope/artifact.hpp"
#include "fakescope/encoder.hpp"
#include "fakescope/error.hpp"
#include "fakescope/rng.hpp"

namespace fakescope {

using nlohmann::json;

DistilledVector distill(const Vector& visual, const DetectorModel& model, std::string source_id) {
  if (visual.size() != model.W.cols()) {
    throw Error(ErrorKind::Argument, "distill expects a " + std::to_string(model.W.cols()) +
                                         "-d embedding, got " + std::to_string(visual.size()));
  }
  DistilledVector out{model.W * visual, std::move(source_id)};
  if (!out.values.allFinite()) throw Error(ErrorKind::Numeric, "non-finite distilled vector");
  return out;
}

double orthogonality_penalty(const Matrix& W) {
  if (W.rows() != kDistillDim || W.cols() != kVisualDim) {
    throw Error(ErrorKind::Argument, "distiller weights must be 16x256");
  }
  return (Matrix::Identity(W.rows(), W.rows()) - W * W.transpose()).squaredNorm();
}

Matrix orthogonality_gradient(const Matrix& W) {
  if (W.rows() != kDistillDim || W.cols() != kVisualDim) {
    throw Error(ErrorKind::Argument, "distiller weights must be 16x256");
  }
  return -4.0 * (Matrix::Identity(W.rows(), W.rows()) - W * W.transpose()) * W;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Prediction prediction_from_logit(double logit) {
  if (!std::isfinite(logit)) throw Error(ErrorKind::Numeric, "non-finite logit");
  Prediction p;
  p.logit = logit;
  p.prob_fake = sigmoid(logit);
  // Exactly 0.5 predicts real.
  p.label = p.prob_fake > 0.5 ? Label::Fake : Label::Real;
  p.confidence = std::max(p.prob_fake, 1.0 - p.prob_fake);
  return p;
}

Prediction predict(const DistilledVector& distilled, const DetectorModel& model) {
  if (distilled.values.size() != model.head_w.size()) {
    throw Error(ErrorKind::Argument, "distilled vector length does not match the head");
  }
  return prediction_from_logit(model.head_w.dot(distilled.values) + model.head_b);
}

namespace {

// Numerically stable BCE from a logit.
double bce_from_logit(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

struct Params {
  Matrix W;
  Vector w;
  double b = 0;
};

struct SplitLoss {
  double bce = 0;
  double accuracy = 0;
};

SplitLoss measure(std::span<const LabeledVector> data, const Params& p) {
  SplitLoss out;
  if (data.empty()) return out;
  const Vector head = p.W.transpose() * p.w;  // composite linear map
  std::size_t correct = 0;
  for (const auto& s : data) {
    const double z = head.dot(s.x) + p.b;
    const double y = s.label == Label::Fake ? 1.0 : 0.0;
    out.bce += bce_from_logit(z, y);
    correct += (prediction_from_logit(z).label == s.label) ? 1 : 0;
  }
  out.bce /= static_cast<double>(data.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return out;
}

}  // namespace

DetectorModel train_detector(std::span<const LabeledVector> train, std::span<const LabeledVector> val,
                             const TrainingConfig& config, std::uint64_t seed) {
  if (train.empty()) throw Error(ErrorKind::TrainingData, "empty training set");
  bool has_real = false, has_fake = false;
  for (const auto& s : train) {
    if (s.x.size() != kVisualDim) throw Error(ErrorKind::Argument, "training vectors must be 256-d");
    (s.label == Label::Fake ? has_fake : has_real) = true;
  }
  if (!has_real || !has_fake) throw Error(ErrorKind::TrainingData, "training set contains a single class");
  if (config.batch_size <= 0 || config.max_epochs < 0 || config.learning_rate <= 0) {
    throw Error(ErrorKind::Argument, "invalid training configuration");
  }

  Rng rng(seed);
  Params p;
  p.W = orthonormal_rows(kDistillDim, kVisualDim, rng.next());
  p.w.resize(kDistillDim);
  for (int i = 0; i < kDistillDim; ++i) p.w(i) = rng.uniform(-0.25, 0.25);
  p.b = 0.0;

  Params m1{Matrix::Zero(kDistillDim, kVisualDim), Vector::Zero(kDistillDim), 0.0};
  Params m2 = m1;
  long step = 0;

  TrainingMeta meta;
  meta.seed = seed;
  meta.config = config;

  auto record = [&](int epoch) {
    EpochRecord r;
    r.epoch = epoch;
    r.bce = measure(train, p).bce;
    r.ortho = orthogonality_penalty(p.W);
    r.total = config.lambda_bce * r.bce + config.lambda_ortho * r.ortho;
    if (!val.empty()) {
      const SplitLoss v = measure(val, p);
      r.val_bce = v.bce;
      r.val_accuracy = v.accuracy;
    }
    if (!std::isfinite(r.total) || (r.val_bce && !std::isfinite(*r.val_bce))) {
      throw Error(ErrorKind::Numeric, "loss diverged at epoch " + std::to_string(epoch));
    }
    meta.history.push_back(r);
    return r;
  };

  const EpochRecord initial = record(0);
  Params best = p;
  double best_val = initial.val_bce.value_or(initial.total);
  int best_epoch = 0;
  int since_best = 0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  int epoch = 1;
  for (; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(std::span(order));
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const double inv_n = 1.0 / static_cast<double>(end - start);

      // dL/dz per sample accumulates into the distiller as w * x^T.
      Vector grad_w = Vector::Zero(kDistillDim);
      Vector weighted_x = Vector::Zero(kVisualDim);
      double grad_b = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const LabeledVector& s = train[order[k]];
        const Vector v = p.W * s.x;
        const double z = p.w.dot(v) + p.b;
        const double y = s.label == Label::Fake ? 1.0 : 0.0;
        const double dz = config.lambda_bce * (sigmoid(z) - y) * inv_n;
        grad_w += dz * v;
        grad_b += dz;
        weighted_x += dz * s.x;
      }
      Matrix grad_W = p.w * weighted_x.transpose();
      grad_W += config.lambda_ortho * orthogonality_gradient(p.W);

      ++step;
      const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      auto adam = [&](auto& param, auto& mom1, auto& mom2, const auto& grad) {
        mom1 = config.beta1 * mom1 + (1 - config.beta1) * grad;
        mom2 = config.beta2 * mom2 + (1 - config.beta2) * grad.cwiseProduct(grad);
        param.array() -= config.learning_rate * (mom1.array() / c1) / ((mom2.array() / c2).sqrt() + config.adam_eps);
      };
      adam(p.W, m1.W, m2.W, grad_W);
      adam(p.w, m1.w, m2.w, grad_w);
      m1.b = config.beta1 * m1.b + (1 - config.beta1) * grad_b;
      m2.b = config.beta2 * m2.b + (1 - config.beta2) * grad_b * grad_b;
      p.b -= config.learning_rate * (m1.b / c1) / (std::sqrt(m2.b / c2) + config.adam_eps);
    }

    const EpochRecord r = record(epoch);
    const double score = r.val_bce.value_or(r.total);
    if (score < best_val) {
      best_val = score;
      best = p;
      best_epoch = epoch;
      since_best = 0;
    } else if (!val.empty() && ++since_best >= config.patience) {
      ++epoch;
      break;
    }
  }
  if (val.empty()) {
    best = p;
    best_epoch = epoch - 1;
  }

  meta.epochs = epoch - 1;
  meta.best_epoch = best_epoch;

  DetectorModel model;
  model.W = best.W;
  model.head_w = best.w;
  model.head_b = best.b;
  model.lambda_bce = config.lambda_bce;
  model.lambda_ortho = config.lambda_ortho;
  model.training = std::move(meta);
  if (model.head_w.cwiseAbs().maxCoeff() == 0.0) {
    throw Error(ErrorKind::Numeric, "training produced an all-zero classification head");
  }
  return model;
}

ConfusionStats confusion(std::span<const Label> truth, std::span<const Label> predicted) {
  if (truth.size() != predicted.size()) throw Error(ErrorKind::Internal, "label count mismatch");
  if (truth.empty()) throw Error(ErrorKind::Argument, "cannot evaluate an empty split");
  ConfusionStats s;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool fake = truth[i] == Label::Fake;
    const bool said_fake = predicted[i] == Label::Fake;
    if (fake && said_fake) ++s.tp;
    else if (!fake && !said_fake) ++s.tn;
    else if (!fake && said_fake) ++s.fp;
    else ++s.fn;
  }
  s.accuracy = static_cast<double>(s.tp + s.tn) / static_cast<double>(s.total());
  if (s.tp + s.fn > 0) s.sensitivity = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn);
  if (s.tn + s.fp > 0) s.specificity = static_cast<double>(s.tn) / static_cast<double>(s.tn + s.fp);
  return s;
}

ConfusionStats evaluate(std::span<const LabeledDistilled> split, const DetectorModel& model) {
  if (split.empty()) throw Error(ErrorKind::Argument, "cannot evaluate an empty split");
  std::vector<Label> truth, predicted;
  truth.reserve(split.size());
  predicted.reserve(split.size());
  for (const auto& item : split) {
    truth.push_back(item.label);
    predicted.push_back(predict(item.vector, model).label);
  }
  return confusion(truth, predicted);
}

void save_checkpoint(const std::filesystem::path& path, const DetectorModel& model) {
  if (model.W.rows() != kDistillDim || model.W.cols() != kVisualDim || model.head_w.size() != kDistillDim) {
    throw Error(ErrorKind::Argument, "model has wrong dimensions");
  }
  json history = json::array();
  for (const auto& r : model.training.history) {
    json e{{"epoch", r.epoch}, {"bce", r.bce}, {"ortho", r.ortho}, {"total", r.total}};
    e["val_bce"] = r.val_bce ? json(*r.val_bce) : json(nullptr);
    e["val_accuracy"] = r.val_accuracy ? json(*r.val_accuracy) : json(nullptr);
    history.push_back(e);
  }
  const TrainingConfig& c = model.training.config;
  json header{{"schema", 1},
              {"dims", {{"in", kVisualDim}, {"distill", kDistillDim}}},
              {"lambda_bce", model.lambda_bce},
              {"lambda_ortho", model.lambda_ortho},
              {"seed", model.training.seed},
              {"training",
               {{"epochs", model.training.epochs},
                {"best_epoch", model.training.best_epoch},
                {"batch", c.batch_size},
                {"lr", c.learning_rate},
                {"optimizer", "adam"},
                {"max_epochs", c.max_epochs},
                {"patience", c.patience},
                {"history", history}}},
              {"adapter", model.adapter},
              {"projection", model.projection}};
  std::vector<float> payload;
  payload.reserve(kDistillDim * kVisualDim + kDistillDim + 1);
  for (int r = 0; r < kDistillDim; ++r) {
    for (int col = 0; col < kVisualDim; ++col) payload.push_back(static_cast<float>(model.W(r, col)));
  }
  for (int i = 0; i < kDistillDim; ++i) payload.push_back(static_cast<float>(model.head_w(i)));
  payload.push_back(static_cast<float>(model.head_b));
  write_artifact(path, header, payload);
}

DetectorModel load_checkpoint(const std::filesystem::path& path) {
  const Artifact a = read_artifact(path);
  const json& h = a.header;
  if (h.value("schema", 0) != 1 || !h.contains("dims") || h["dims"].value("in", 0) != kVisualDim ||
      h["dims"].value("distill", 0) != kDistillDim) {
    throw Error(ErrorKind::Validation, "unsupported checkpoint header in " + path.string());
  }
  if (a.payload.size() != static_cast<std::size_t>(kDistillDim * kVisualDim + kDistillDim + 1)) {
    throw Error(ErrorKind::Validation, "checkpoint payload has wrong size");
  }
  DetectorModel m;
  m.W.resize(kDistillDim, kVisualDim);
  std::size_t k = 0;
  for (int r = 0; r < kDistillDim; ++r) {
    for (int col = 0; col < kVisualDim; ++col) m.W(r, col) = a.payload[k++];
  }
  m.head_w.resize(kDistillDim);
  for (int i = 0; i < kDistillDim; ++i) m.head_w(i) = a.payload[k++];
  m.head_b = a.payload[k];
  m.lambda_bce = h.value("lambda_bce", 3.0);
  m.lambda_ortho = h.value("lambda_ortho", 1.0);
  m.training.seed = h.value("seed", std::uint64_t{0});
  if (h.contains("training")) {
    const json& t = h["training"];
    m.training.epochs = t.value("epochs", 0);
    m.training.best_epoch = t.value("best_epoch", 0);
    m.training.config.batch_size = t.value("batch", 32);
    m.training.config.learning_rate = t.value("lr", 1e-3);
    m.training.config.max_epochs = t.value("max_epochs", 50);
    m.training.config.patience = t.value("patience", 3);
    m.training.config.lambda_bce = m.lambda_bce;
    m.training.config.lambda_ortho = m.lambda_ortho;
    for (const auto& e : t.value("history", json::array())) {
      EpochRecord r;
      r.epoch = e.value("epoch", 0);
      r.bce = e.value("bce", 0.0);
      r.ortho = e.value("ortho", 0.0);
      r.total = e.value("total", 0.0);
      if (e.contains("val_bce") && e["val_bce"].is_number()) r.val_bce = e["val_bce"].get<double>();
      if (e.contains("val_accuracy") && e["val_accuracy"].is_number()) r.val_accuracy = e["val_accuracy"].get<double>();
      m.training.history.push_back(r);
    }
  }
  m.adapter = h.value("adapter", "");
  m.projection = h.value("projection", "");
  if (!m.W.allFinite() || !m.head_w.allFinite() || !std::isfinite(m.head_b)) {
    throw Error(ErrorKind::Validation, "checkpoint contains non-finite weights");
  }
  return m;
}

}  // namespace fakescope
