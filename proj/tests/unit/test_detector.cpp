#include <doctest.h>

#include "fakescope/artifact.hpp"
#include "fakescope/detector.hpp"
#include "fakescope/encoder.hpp"
#include "fakescope/error.hpp"
#include "fakescope/synthetic.hpp"
#include "../support/oracles.hpp"

using namespace fakescope;

namespace {

DetectorModel identity_model() {
  DetectorModel m;
  m.W = Matrix::Identity(16, 256);
  m.head_w = Vector::Zero(16);
  m.head_w(0) = 1;
  return m;
}

std::vector<LabeledDistilled> distill_all(std::span<const LabeledVector> data, const DetectorModel& model) {
  std::vector<LabeledDistilled> out;
  for (const auto& s : data) out.push_back({distill(s.x, model), s.label});
  return out;
}

}  // namespace

TEST_CASE("distill is a bias-free linear map") {
  const DetectorModel m = identity_model();
  Vector e3 = Vector::Zero(256);
  e3(2) = 1;
  Vector expected = Vector::Zero(16);
  expected(2) = 1;
  CHECK(distill(e3, m).values == expected);
  CHECK(distill(Vector::Zero(256), m, "z").values.isZero(0));
  CHECK(distill(Vector::Zero(256), m, "z").source_id == "z");
  try {
    distill(Vector::Zero(255), m);
    FAIL("expected an argument error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Argument);
  }
}

TEST_CASE("orthogonality penalty examples") {
  const Matrix rows = Matrix::Identity(16, 256);
  CHECK(orthogonality_penalty(rows) == 0.0);
  CHECK(orthogonality_penalty(2 * rows) == doctest::Approx(144.0).epsilon(1e-14));
  CHECK(orthogonality_penalty(Matrix::Zero(16, 256)) == 16.0);
  CHECK(orthogonality_penalty(orthonormal_rows(16, 256, 4)) < 1e-20);
  CHECK_THROWS_AS(orthogonality_penalty(Matrix::Zero(16, 255)), Error);
}

TEST_CASE("orthogonality gradient matches central differences") {
  std::mt19937_64 gen(41);
  std::normal_distribution<double> normal(0, 0.1);
  Matrix w(16, 256);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(gen);
  const Matrix grad = orthogonality_gradient(w);
  std::uniform_int_distribution<int> row(0, 15), col(0, 255);
  for (int trial = 0; trial < 5; ++trial) {
    const int r = row(gen), c = col(gen);
    // Direct Frobenius evaluation, independent of the library routine.
    auto penalty = [&](double value) {
      Matrix x = w;
      x(r, c) = value;
      return (Matrix::Identity(16, 16) - x * x.transpose()).squaredNorm();
    };
    const double h = 1e-5;
    const double fd = (penalty(w(r, c) + h) - penalty(w(r, c) - h)) / (2 * h);
    CHECK(oracle::relative_error(grad(r, c), fd) <= 1e-4);
  }
}

TEST_CASE("prediction examples and invariants") {
  const Prediction tie = prediction_from_logit(0);
  CHECK(tie.prob_fake == 0.5);
  CHECK(tie.label == Label::Real);
  CHECK(tie.confidence == 0.5);

  DetectorModel m = identity_model();
  DistilledVector v{Vector::Zero(16), "x"};
  v.values(0) = 4;
  const Prediction p = predict(v, m);
  CHECK(p.logit == 4.0);
  CHECK(p.prob_fake == doctest::Approx(1.0 / (1.0 + std::exp(-4.0))).epsilon(1e-15));
  CHECK(p.prob_fake == doctest::Approx(0.982).epsilon(1e-3));
  CHECK(p.label == Label::Fake);

  std::mt19937_64 gen(5);
  std::normal_distribution<double> normal(0, 5);
  for (int i = 0; i < 200; ++i) {
    const double z = normal(gen);
    const Prediction a = prediction_from_logit(z), b = prediction_from_logit(-z);
    CHECK((a.label == Label::Fake) == (z > 0));
    CHECK(a.label != b.label);
    CHECK(a.confidence == doctest::Approx(b.confidence).epsilon(1e-12));
    CHECK(a.confidence == std::max(a.prob_fake, 1 - a.prob_fake));
    CHECK(a.confidence >= 0.5);
  }
}

TEST_CASE("confusion counting") {
  SUBCASE("all fakes correct") {
    const std::vector<Label> truth(10, Label::Fake);
    const ConfusionStats s = confusion(truth, truth);
    CHECK(s.tp == 10);
    CHECK(s.sensitivity.value() == 1.0);
    CHECK_FALSE(s.specificity.has_value());
  }
  SUBCASE("three fakes missed") {
    const std::vector<Label> truth(10, Label::Fake);
    std::vector<Label> predicted(10, Label::Fake);
    predicted[1] = predicted[4] = predicted[8] = Label::Real;
    const ConfusionStats s = confusion(truth, predicted);
    CHECK(s.fn == 3);
    CHECK(s.sensitivity.value() == doctest::Approx(0.7));
  }
  SUBCASE("random cases agree with a per-record tally") {
    std::mt19937_64 gen(8);
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 1 + static_cast<int>(gen() % 50);
      std::vector<int> t(n), p(n);
      std::vector<Label> truth, predicted;
      for (int i = 0; i < n; ++i) {
        t[i] = static_cast<int>(gen() % 2);
        p[i] = static_cast<int>(gen() % 2);
        truth.push_back(static_cast<Label>(t[i]));
        predicted.push_back(static_cast<Label>(p[i]));
      }
      const auto ref = oracle::tally(t, p);
      const ConfusionStats s = confusion(truth, predicted);
      CHECK(s.tp == ref.tp);
      CHECK(s.tn == ref.tn);
      CHECK(s.fp == ref.fp);
      CHECK(s.fn == ref.fn);
      CHECK(s.total() == static_cast<std::size_t>(n));
      CHECK(s.accuracy == doctest::Approx(static_cast<double>(ref.tp + ref.tn) / n));
    }
  }
  CHECK_THROWS_AS(confusion({}, {}), Error);
}

TEST_CASE("training defaults") {
  const TrainingConfig c;
  CHECK(c.lambda_bce == 3.0);
  CHECK(c.lambda_ortho == 1.0);
  CHECK(c.batch_size == 32);
  CHECK(c.learning_rate == 1e-3);
}

TEST_CASE("separable corpus is learned exactly") {
  const auto data = separable_corpus(600, 3);
  const std::span<const LabeledVector> all(data);
  const auto train = all.subspan(0, 400), val = all.subspan(400, 100), test = all.subspan(500);
  const DetectorModel model = train_detector(train, val, {}, 7);
  CHECK(orthogonality_penalty(model.W) <= 0.05);
  CHECK(model.head_w.cwiseAbs().maxCoeff() > 0);
  const auto held_out = distill_all(test, model);
  CHECK(evaluate(held_out, model).accuracy == 1.0);

  const auto& history = model.training.history;
  REQUIRE(history.size() >= 6);
  CHECK(history[0].epoch == 0);
  CHECK(history[5].total < history[0].total);
  for (const auto& e : history) {
    CHECK(e.total == doctest::Approx(3.0 * e.bce + 1.0 * e.ortho).epsilon(1e-9));
  }
}

TEST_CASE("training is deterministic for a seed") {
  const auto data = two_gaussian_corpus(400, 11);
  const std::span<const LabeledVector> all(data);
  TrainingConfig config;
  config.max_epochs = 4;
  const DetectorModel a = train_detector(all.subspan(0, 320), all.subspan(320), config, 5);
  const DetectorModel b = train_detector(all.subspan(0, 320), all.subspan(320), config, 5);
  const DetectorModel c = train_detector(all.subspan(0, 320), all.subspan(320), config, 6);
  CHECK(a.W == b.W);
  CHECK(a.head_w == b.head_w);
  CHECK(a.head_b == b.head_b);
  CHECK(a.W != c.W);
}

TEST_CASE("single-class training data is rejected") {
  auto data = separable_corpus(40, 1);
  std::vector<LabeledVector> reals;
  for (const auto& s : data) {
    if (s.label == Label::Real) reals.push_back(s);
  }
  try {
    train_detector(reals, reals, {}, 1);
    FAIL("expected a training-data error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::TrainingData);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto data = separable_corpus(100, 9);
  const std::span<const LabeledVector> all(data);
  TrainingConfig config;
  config.max_epochs = 2;
  DetectorModel model = train_detector(all.subspan(0, 80), all.subspan(80), config, 3);
  model.adapter = "mock:seed=2";
  model.projection = "/tmp/p.bin";
  oracle::TempDir dir("ckpt");
  save_checkpoint(dir.path / "m.ckpt", model);
  const Artifact raw = read_artifact(dir.path / "m.ckpt");
  CHECK(raw.header.at("schema") == 1);
  CHECK(raw.header.at("dims").at("in") == 256);
  CHECK(raw.header.at("dims").at("distill") == 16);
  CHECK(raw.header.at("seed") == 3);
  CHECK(raw.payload.size() == 16u * 256u + 16u + 1u);
  const DetectorModel back = load_checkpoint(dir.path / "m.ckpt");
  CHECK((back.W - model.W).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((back.head_w - model.head_w).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(back.head_b == doctest::Approx(model.head_b).epsilon(1e-6));
  CHECK(back.lambda_bce == 3.0);
  CHECK(back.adapter == "mock:seed=2");
  CHECK(back.projection == "/tmp/p.bin");
  CHECK(back.training.seed == 3);

  write_file_atomic(dir.path / "bad.ckpt", "{\"schema\":9}\n");
  CHECK_THROWS_AS(load_checkpoint(dir.path / "bad.ckpt"), Error);
}
