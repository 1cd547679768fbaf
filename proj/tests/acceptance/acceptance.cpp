// Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion.
//
//   acceptance [criterion...]   (default: all)

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "fakescope/analytics.hpp"
#include "fakescope/artifact.hpp"
#include "fakescope/contribution.hpp"
#include "fakescope/detector.hpp"
#include "fakescope/pipeline.hpp"
#include "fakescope/relevance.hpp"
#include "fakescope/synthetic.hpp"
#include "../support/oracles.hpp"

using namespace fakescope;
namespace fs = std::filesystem;

namespace {

enum class Outcome { Pass, Fail, Skip };

struct Result {
  Outcome outcome = Outcome::Pass;
  std::string detail;
};

// Collects checks; the first failing check's message is reported.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failure_.empty()) failure_ = what;
  }
  void note(const std::string& text) { notes_ += (notes_.empty() ? "" : "; ") + text; }
  Result result() const {
    if (!failure_.empty()) return {Outcome::Fail, failure_ + (notes_.empty() ? "" : " | " + notes_)};
    return {Outcome::Pass, notes_};
  }

 private:
  std::string failure_;
  std::string notes_;
};

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(6);
  out << v;
  return out.str();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string command = std::string("\"") + FAKESCOPE_CLI + "\" " + args + " >>\"" + log.string() + "\" 2>&1";
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<EmbeddingRecord> fixed_split(const std::vector<LabeledVector>& data) {
  std::vector<EmbeddingRecord> records;
  const std::size_t n = data.size(), n_train = n * 8 / 10, n_val = n / 10;
  for (std::size_t i = 0; i < n; ++i) {
    const Split s = i < n_train ? Split::Train : i < n_train + n_val ? Split::Val : Split::Test;
    records.push_back({"g" + std::to_string(i), data[i].label, s, data[i].x});
  }
  return records;
}

// ---------------------------------------------------------------------------

Result orthogonality() {
  Checks c;
  oracle::TempDir dir("acc-ortho");
  const fs::path log = dir.path / "cli.log";
  const auto start = std::chrono::steady_clock::now();
  c.expect(run_cli("make-corpus --gaussian -n 2000 --seed 1 --out \"" + (dir.path / "toy.jsonl").string() + "\"", log) == 0,
           "make-corpus failed");
  c.expect(run_cli("train --embeddings \"" + (dir.path / "toy.jsonl").string() + "\" --lambda-ortho 1 --seed 1 --out \"" +
                       (dir.path / "toy.ckpt").string() + "\"",
                   log) == 0,
           "train failed (see " + log.string() + ")");
  const double elapsed = seconds_since(start);
  if (!fs::exists(dir.path / "toy.ckpt")) return c.result();

  const DetectorModel model = load_checkpoint(dir.path / "toy.ckpt");
  const double r = orthogonality_penalty(model.W);
  c.note("R(W)=" + fmt(r));
  c.expect(r <= 0.05, "R(W)=" + fmt(r) + " > 0.05");

  const Matrix grad = orthogonality_gradient(model.W);
  std::mt19937_64 gen(3);
  std::uniform_int_distribution<int> row(0, 15), col(0, 255);
  double worst = 0;
  for (int i = 0; i < 5; ++i) {
    const int a = row(gen), b = col(gen);
    auto penalty = [&](double value) {
      Matrix w = model.W;
      w(a, b) = value;
      return (Matrix::Identity(16, 16) - w * w.transpose()).squaredNorm();
    };
    const double h = 1e-5;
    const double fd = (penalty(model.W(a, b) + h) - penalty(model.W(a, b) - h)) / (2 * h);
    worst = std::max(worst, oracle::relative_error(grad(a, b), fd));
  }
  c.note("gradient rel err=" + fmt(worst));
  c.expect(worst <= 1e-4, "gradient relative error " + fmt(worst) + " > 1e-4");
  c.note("runtime=" + fmt(elapsed) + "s");
  c.expect(elapsed < 120, "runtime " + fmt(elapsed) + "s >= 120s");
  return c.result();
}

Result toy_detection() {
  Checks c;
  const auto data = two_gaussian_corpus(2000, 1);
  TrainingConfig config;
  config.max_epochs = 5;
  const TrainReport report = train_from_embeddings(fixed_split(data), config, 1);
  const double accuracy = report.val.accuracy;

  Matrix x_train(static_cast<Eigen::Index>(report.train_size), kVisualDim);
  Matrix x_val(static_cast<Eigen::Index>(report.val_size), kVisualDim);
  std::vector<int> y_train, y_val;
  for (std::size_t i = 0; i < report.train_size; ++i) {
    x_train.row(static_cast<Eigen::Index>(i)) = data[i].x.transpose();
    y_train.push_back(static_cast<int>(data[i].label));
  }
  for (std::size_t i = 0; i < report.val_size; ++i) {
    const auto& s = data[report.train_size + i];
    x_val.row(static_cast<Eigen::Index>(i)) = s.x.transpose();
    y_val.push_back(static_cast<int>(s.label));
  }
  const double oracle_accuracy = oracle::logistic_accuracy(oracle::logistic_irls(x_train, y_train, 25, 1.0), x_val,
                                                           y_val);

  c.note("val accuracy=" + fmt(accuracy) + " after " + std::to_string(report.model.training.epochs) + " epochs");
  c.note("logistic oracle=" + fmt(oracle_accuracy));
  // Best achievable accuracy for two unit-covariance Gaussians: Phi(|mu_1 - mu_0| / 2).
  const GaussianCorpusOptions toy;
  const double bayes = 0.5 * std::erfc(-toy.shift * std::sqrt(static_cast<double>(toy.informative)) / std::sqrt(2.0));
  c.note("Bayes accuracy=" + fmt(bayes));
  c.expect(accuracy >= 0.98, "val accuracy " + fmt(accuracy) + " < 0.98");
  c.expect(std::abs(accuracy - oracle_accuracy) <= 0.02,
           "differs from logistic oracle by " + fmt(std::abs(accuracy - oracle_accuracy)));
  return c.result();
}

Result contribution_metric() {
  Checks c;
  std::mt19937_64 gen(2024);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  double worst_sum = 0, worst_scale = 0;
  int sign_errors = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    DetectorModel model;
    model.head_w = Vector(16);
    Vector v(16);
    for (int i = 0; i < 16; ++i) {
      v(i) = normal(gen);
      model.head_w(i) = normal(gen);
    }
    const auto cv = contribution_scores({v, ""}, model);
    worst_sum = std::max(worst_sum, std::abs(cv.c.cwiseAbs().sum() - 1));
    for (int i = 0; i < 16; ++i) {
      const double s = v(i) * model.head_w(i);
      if ((s > 0) != (cv.c(i) > 0) || (s < 0) != (cv.c(i) < 0)) ++sign_errors;
    }
    const auto scaled = contribution_scores({scale(gen) * v, ""}, model);
    worst_scale = std::max(worst_scale, (scaled.c - cv.c).cwiseAbs().maxCoeff());
  }
  c.note("max |sum|c|-1|=" + fmt(worst_sum) + ", max scale drift=" + fmt(worst_scale));
  c.expect(worst_sum <= 1e-6, "sum of |c| off by " + fmt(worst_sum));
  c.expect(sign_errors == 0, std::to_string(sign_errors) + " sign mismatches");
  c.expect(worst_scale <= 1e-9, "scaling changed c by " + fmt(worst_scale));
  return c.result();
}

Result relevance_correctness() {
  Checks c;
  // Tiny transformer: 1 block, 1 head, 3 tokens.
  EncoderConfig config;
  config.width = 4;
  config.heads = 1;
  config.layers = 1;
  config.mlp = 8;
  auto blocks = random_blocks(config, 17);
  blocks[0].wq *= 6;
  blocks[0].wk *= 6;
  blocks[0].wv *= 4;
  const TransformerEncoder encoder(config, blocks);
  std::mt19937_64 gen(23);
  std::normal_distribution<double> normal;
  Matrix tokens(3, 4), weight(3, 4);
  for (Eigen::Index i = 0; i < tokens.size(); ++i) {
    tokens.data()[i] = normal(gen);
    weight.data()[i] = normal(gen);
  }
  const EncoderTrace trace = encoder.forward(tokens);
  const Matrix grad = encoder.attention_gradients(trace, weight)[0][0];
  const Matrix a = trace.blocks[0].attention[0];
  auto target = [&](const Matrix& attention) {
    AttentionOverrides overrides{{0, HeadMaps{attention}}};
    return encoder.forward(tokens, &overrides).output.cwiseProduct(weight).sum();
  };
  double worst = 0;
  std::uniform_int_distribution<int> pick(0, 8);
  for (int i = 0; i < 10; ++i) {
    const int e = pick(gen);
    Matrix up = a, down = a;
    up(e / 3, e % 3) += 1e-4;
    down(e / 3, e % 3) -= 1e-4;
    const double fd = (target(up) - target(down)) / 2e-4;
    worst = std::max(worst, oracle::relative_error(grad(e / 3, e % 3), fd));
  }
  c.note("attention gradient rel err=" + fmt(worst));
  c.expect(worst <= 1e-4, "attention gradient relative error " + fmt(worst));

  AttentionCapture hand;
  hand.attention = {(Matrix(2, 2) << 0.6, 0.4, 0.3, 0.7).finished()};
  hand.gradient = {(Matrix(2, 2) << 0.2, -0.1, 0.5, 0.1).finished()};
  hand.k = 1;
  hand.target_dim = 1;
  const Matrix clamped = gradient_weighted_attention(hand);
  const Matrix expected = (Matrix(2, 2) << 0.6 * 0.2, 0.0, 0.3 * 0.5, 0.7 * 0.1).finished();
  c.expect(clamped == expected, "clamp example differs from the hand computation");
  c.expect(token_relevance_last(hand).grid(0, 0) == 0.0, "clamp example patch relevance is not 0");

  const auto adapter = make_mock_adapter(3);
  const ForgetProjection projection{orthonormal_rows(kVisualDim, kGenericDim, 1), ProjectionProvenance::Loaded};
  DetectorModel model;
  model.W = orthonormal_rows(kDistillDim, kVisualDim, 2);
  model.head_w = Vector::Ones(kDistillDim);
  oracle::TempDir dir("acc-rel");
  write_image_corpus(dir.path, 3, 3, 5, {48});
  const DatasetManifest manifest = load_manifest(dir.path);
  int maps = 0, degenerate = 0, bad = 0;
  for (const auto& record : manifest.records) {
    const RelevanceStack stack =
        relevance_stack(load_pixels(record), {*adapter, projection, model}, record.height, record.width);
    if (stack.maps.size() != 16) ++bad;
    for (const auto& m : stack.maps) {
      ++maps;
      const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
      if (m.degenerate) {
        ++degenerate;
        if (*hi != 0.0f) ++bad;
      } else if (*lo != 0.0f || *hi != 1.0f) {
        ++bad;
      }
    }
  }
  c.note(std::to_string(maps) + " maps over " + std::to_string(manifest.records.size()) + " images, " +
         std::to_string(degenerate) + " degenerate");
  c.expect(bad == 0, std::to_string(bad) + " maps violate the 16-map / [0,1] contract");
  return c.result();
}

Result counterfactual() {
  Checks c;
  std::mt19937_64 gen(99);
  std::normal_distribution<double> normal;
  double worst_angle = 0, worst_ratio = std::numeric_limits<double>::infinity();
  int unflipped = 0;
  for (int trial = 0; trial < 100; ++trial) {
    DetectorModel model;
    model.head_w = Vector(16);
    Vector v(16);
    for (int i = 0; i < 16; ++i) {
      model.head_w(i) = normal(gen);
      v(i) = 2 * normal(gen);
    }
    model.head_b = normal(gen);
    const WhatIfResult r = whatif_counterfactual({v, ""}, model);
    const double new_logit = model.head_w.dot(v + r.delta) + model.head_b;
    const double old_logit = model.head_w.dot(v) + model.head_b;
    if ((new_logit > 0) == (old_logit > 0)) ++unflipped;
    const double cosine = std::abs(r.delta.dot(model.head_w)) / (r.delta.norm() * model.head_w.norm());
    worst_angle = std::max(worst_angle, std::acos(std::min(1.0, cosine)));
    const double bound = r.delta.norm() / (1 + r.epsilon) * (1 - 1e-6);
    const double shortest = oracle::brute_force_flip_distance(v, model.head_w, model.head_b, 10000, gen);
    worst_ratio = std::min(worst_ratio, shortest / bound);
  }
  c.note("max angle=" + fmt(worst_angle) + " rad, min brute-force/bound=" + fmt(worst_ratio));
  c.expect(unflipped == 0, std::to_string(unflipped) + " instances did not flip");
  c.expect(worst_angle <= 1e-6, "delta not parallel to head_w: " + fmt(worst_angle));
  c.expect(worst_ratio >= 1.0, "brute force found a shorter flip");
  return c.result();
}

Result analytics() {
  Checks c;
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> normal;

  // Grid partition.
  std::vector<ProjectedPoint> pts;
  for (int i = 0; i < 1000; ++i) pts.push_back({"p" + std::to_string(i), u(gen), u(gen)});
  pts.push_back({"corner0", 0, 0});
  pts.push_back({"corner1", 1, 1});
  std::size_t total = 0;
  std::set<std::size_t> seen;
  for (const auto& cell : assign_grid(pts, 30)) {
    total += cell.members.size();
    seen.insert(cell.members.begin(), cell.members.end());
  }
  c.expect(total == pts.size() && seen.size() == pts.size(), "grid cells do not partition the points");

  // KL ordering with an identical-distribution dimension.
  std::vector<Vector> vectors;
  std::vector<Label> labels;
  for (int i = 0; i < 400; ++i) {
    const bool fake = i % 2 == 1;
    Vector v(16);
    for (int d = 0; d < 16; ++d) v(d) = normal(gen) + (fake ? 0.15 * d : 0.0);
    v(6) = static_cast<double>((i / 2) % 11);
    vectors.push_back(v);
    labels.push_back(fake ? Label::Fake : Label::Real);
  }
  const auto dists = dimension_distributions(vectors, labels, global_ranges(vectors), "global");
  bool ascending = true;
  for (std::size_t r = 0; r + 1 < dists.size(); ++r) ascending = ascending && *dists[r].kl <= *dists[r + 1].kl;
  c.expect(ascending, "KL ordering is not ascending");
  c.expect(dists.front().dim == 7 && dists.front().kl == 0.0, "identical-distribution dimension is not first at kl=0");

  // IsoMatch against exhaustive search and random permutations.
  auto cost_of = [](const std::vector<ProjectedPoint>& p, int side) {
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto& q : p) {
      x0 = std::min(x0, q.x);
      x1 = std::max(x1, q.x);
      y0 = std::min(y0, q.y);
      y1 = std::max(y1, q.y);
    }
    Matrix m(static_cast<Eigen::Index>(p.size()), side * side);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double px = x1 > x0 ? (p[i].x - x0) / (x1 - x0) : 0, py = y1 > y0 ? (p[i].y - y0) / (y1 - y0) : 0;
      for (int s = 0; s < side * side; ++s) {
        const double cx = side > 1 ? double(s % side) / (side - 1) : 0, cy = side > 1 ? double(s / side) / (side - 1) : 0;
        m(static_cast<Eigen::Index>(i), s) = (px - cx) * (px - cx) + (py - cy) * (py - cy);
      }
    }
    return m;
  };
  int iso_failures = 0;
  for (int n = 1; n <= 50; ++n) {
    std::vector<ProjectedPoint> cell;
    for (int i = 0; i < n; ++i) cell.push_back({"q" + std::to_string(i), u(gen), u(gen)});
    const CellLayout layout = isomatch_layout(cell);
    const Matrix cost = cost_of(cell, layout.rows);
    if (n <= 7 && std::abs(layout.cost - oracle::exhaustive_assignment_cost(cost)) > 1e-9) ++iso_failures;
    std::vector<int> slots(static_cast<std::size_t>(cost.cols()));
    std::iota(slots.begin(), slots.end(), 0);
    for (int t = 0; t < 100; ++t) {
      std::shuffle(slots.begin(), slots.end(), gen);
      double random_cost = 0;
      for (int i = 0; i < n; ++i) random_cost += cost(i, slots[static_cast<std::size_t>(i)]);
      if (layout.cost > random_cost + 1e-12) ++iso_failures;
    }
  }
  c.expect(iso_failures == 0, std::to_string(iso_failures) + " IsoMatch optimality violations");

  // k-means on the 9-point fixture.
  std::vector<Vector> nine;
  std::normal_distribution<double> jitter(0, 0.3);
  for (int i = 0; i < 9; ++i) {
    Vector v(16);
    for (int d = 0; d < 16; ++d) v(d) = jitter(gen) + (d == (i * 2) % 3 ? 8.0 : 0.0);
    nine.push_back(v);
  }
  const auto best = oracle::exhaustive_partition(nine, 3);
  const KMeansResult km = kmeans(nine, 3, 1);
  c.expect(oracle::canonical_labels(km.assignment) == best.labels, "k-means differs from the exhaustive partition");
  c.note("k-means inertia=" + fmt(km.inertia) + " oracle=" + fmt(best.inertia));
  return c.result();
}

Result end_to_end() {
  Checks c;
  oracle::TempDir dir("acc-e2e");
  const fs::path log = dir.path / "cli.log";
  const std::string corpus = (dir.path / "corpus").string();
  const std::string ckpt = (dir.path / "model.ckpt").string();
  c.expect(run_cli("make-corpus --real 200 --fake 200 --seed 1 --out \"" + corpus + "\"", log) == 0, "make-corpus failed");
  const auto start = std::chrono::steady_clock::now();
  c.expect(run_cli("train --manifest \"" + corpus + "\" --seed 1 --out \"" + ckpt + "\"", log) == 0, "train failed");
  for (const char* run : {"run1", "run2"}) {
    c.expect(run_cli("analyze --manifest \"" + corpus + "\" --checkpoint \"" + ckpt + "\" --seed 1 --out \"" +
                         (dir.path / "store" / run).string() + "\"",
                     log) == 0,
             std::string("analyze ") + run + " failed (see " + log.string() + ")");
  }
  const double elapsed = seconds_since(start);
  for (const char* name : {"cells.json", "dimensions.json"}) {
    const fs::path a = dir.path / "store" / "run1" / name, b = dir.path / "store" / "run2" / name;
    c.expect(fs::exists(a) && fs::exists(b) && read_file(a) == read_file(b), std::string(name) + " differs between runs");
  }
  c.note("train + 2x analyze on 400 images: " + fmt(elapsed) + "s");
  c.expect(elapsed < 120, "runtime " + fmt(elapsed) + "s >= 120s");
  return c.result();
}

Result real_data_smoke() {
  const char* path = std::getenv("FAKESCOPE_PROGAN_EMBEDDINGS");
  if (!path || !*path) return {Outcome::Skip, "set FAKESCOPE_PROGAN_EMBEDDINGS to a 256-d embeddings file"};
  Checks c;
  const auto start = std::chrono::steady_clock::now();
  const TrainReport report = train_from_embeddings(load_embeddings(path), {}, 1);
  const double elapsed = seconds_since(start);
  c.note("held-out accuracy=" + fmt(report.test.accuracy) + " on " + std::to_string(report.test_size) +
         ", runtime=" + fmt(elapsed) + "s");
  c.expect(report.test.accuracy >= 0.90, "held-out accuracy " + fmt(report.test.accuracy) + " < 0.90");
  c.expect(elapsed < 1200, "runtime " + fmt(elapsed) + "s >= 1200s");
  return c.result();
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Result()>>> criteria{
      {"orthogonality", orthogonality},
      {"toy-detection", toy_detection},
      {"contribution-metric", contribution_metric},
      {"relevance-correctness", relevance_correctness},
      {"counterfactual", counterfactual},
      {"analytics", analytics},
      {"end-to-end-determinism", end_to_end},
      {"real-data-smoke", real_data_smoke},
  };
  std::set<std::string> wanted(argv + 1, argv + argc);
  for (const auto& name : wanted) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](const auto& c) { return c.first == name; })) {
      std::cerr << "unknown criterion " << name << "\n";
      return 2;
    }
  }
  int failed = 0, skipped = 0, ran = 0;
  for (const auto& [name, fn] : criteria) {
    if (!wanted.empty() && !wanted.count(name)) continue;
    ++ran;
    Result r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r = {Outcome::Fail, std::string("exception: ") + e.what()};
    }
    const char* tag = r.outcome == Outcome::Pass ? "PASS" : r.outcome == Outcome::Fail ? "FAIL" : "SKIP";
    std::cout << tag << " " << name << (r.detail.empty() ? "" : ": " + r.detail) << std::endl;
    failed += r.outcome == Outcome::Fail;
    skipped += r.outcome == Outcome::Skip;
  }
  if (failed) return 1;
  return ran > 0 && skipped == ran ? 77 : 0;
}
