#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fakescope/dataset.hpp"
#include "fakescope/transformer.hpp"

namespace fakescope {

inline constexpr int kDistillDim = 16;

struct TrainingConfig {
  double lambda_bce = 3.0;
  double lambda_ortho = 1.0;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int max_epochs = 50;
  int patience = 3;  // epochs without validation-BCE improvement
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct EpochRecord {
  int epoch = 0;  // 0 is the untrained initialization
  double bce = 0;
  double ortho = 0;
  double total = 0;
  std::optional<double> val_bce;
  std::optional<double> val_accuracy;
};

struct TrainingMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  int best_epoch = 0;
  TrainingConfig config;
  std::vector<EpochRecord> history;
};

struct DetectorModel {
  Matrix W;       // 16 x 256 distiller, no bias
  Vector head_w;  // 16
  double head_b = 0.0;
  double lambda_bce = 3.0;
  double lambda_ortho = 1.0;
  TrainingMeta training;
  std::string adapter;     // adapter spec the embeddings came from
  std::string projection;  // forget-projection artifact path
};

struct DistilledVector {
  Vector values;
  std::string source_id;
};

struct Prediction {
  double logit = 0;
  double prob_fake = 0.5;
  Label label = Label::Real;
  double confidence = 0.5;
};

struct ConfusionStats {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  double accuracy = 0;
  std::optional<double> sensitivity;  // undefined without fake members
  std::optional<double> specificity;  // undefined without real members

  std::size_t total() const { return tp + tn + fp + fn; }
};

struct LabeledVector {
  Vector x;
  Label label;
};

DistilledVector distill(const Vector& visual, const DetectorModel& model, std::string source_id = {});

/// R(W) = ||I - W W^T||_F^2
double orthogonality_penalty(const Matrix& W);

/// dR/dW = -4 (I - W W^T) W
Matrix orthogonality_gradient(const Matrix& W);

double sigmoid(double z);

Prediction predict(const DistilledVector& distilled, const DetectorModel& model);
Prediction prediction_from_logit(double logit);

/// Adam on lambda_bce * BCE + lambda_ortho * R(W); early stopping on validation BCE,
/// restoring the best epoch's weights.
DetectorModel train_detector(std::span<const LabeledVector> train, std::span<const LabeledVector> val,
                             const TrainingConfig& config, std::uint64_t seed);

struct LabeledDistilled {
  DistilledVector vector;
  Label label;
};

ConfusionStats evaluate(std::span<const LabeledDistilled> split, const DetectorModel& model);

/// Fake is the positive class.
ConfusionStats confusion(std::span<const Label> truth, std::span<const Label> predicted);

void save_checkpoint(const std::filesystem::path& path, const DetectorModel& model);
DetectorModel load_checkpoint(const std::filesystem::path& path);

}  // namespace fakescope
