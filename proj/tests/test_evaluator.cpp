#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oslo/errors.hpp"
#include "oslo/evaluator.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace oslo;
using oslo::testing::make_tiny_task;
using oslo::testing::random_image;
using oslo::testing::random_matrix;

namespace {

// Perturbs every prompt group so predictions are not an artefact of init.
void jitter(PromptModel& model, std::uint64_t seed) {
  Rng rng(seed);
  for (Parameter* p : model.parameters()) p->value += random_matrix(rng, p->value.rows(), p->value.cols(), 0.3);
}

// Brute force: encode, normalize and compare with explicit loops.
int oracle_predict(const PromptTask& task, const PromptModel& model, const Image& image) {
  const Backbone& bb = task.backbone();
  std::vector<std::string> labels = task.classes();
  labels.push_back("unknown");
  const RowVector img = bb.encode_image(image, model.visual()).vector;
  double img_norm = 0;
  for (Eigen::Index i = 0; i < img.size(); ++i) img_norm += img(i) * img(i);
  img_norm = std::sqrt(img_norm);
  int best = -1;
  double best_score = -1e300;
  for (size_t c = 0; c < labels.size(); ++c) {
    const RowVector txt =
        bb.encode_text(assemble_generic_prompt(model.generic, model.visual(), model.projector, labels[c])).vector;
    double dot = 0, tn = 0;
    for (Eigen::Index i = 0; i < txt.size(); ++i) {
      dot += img(i) * txt(i);
      tn += txt(i) * txt(i);
    }
    const double score = dot / (img_norm * std::sqrt(tn));
    if (score > best_score + 1e-15) {
      best_score = score;
      best = static_cast<int>(c);
    }
  }
  return best;
}

}  // namespace

TEST(HScore, UnitValues) {
  EXPECT_DOUBLE_EQ(compute_h_score(0.5, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(compute_h_score(0.9, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(compute_h_score(0.0, 0.7), 0.0);
  EXPECT_DOUBLE_EQ(compute_h_score(0.0, 0.0), 0.0);
  EXPECT_NEAR(compute_h_score(0.8, 0.6), 0.685714, 1e-6);
}

TEST(HScore, RejectsRatesOutsideTheUnitInterval) {
  EXPECT_THROW(compute_h_score(1.1, 0.5), InputError);
  EXPECT_THROW(compute_h_score(0.5, -0.1), InputError);
  EXPECT_THROW(compute_h_score(std::nan(""), 0.5), InputError);
}

TEST(HScore, SymmetricBoundedAndIdempotentOnTheDiagonal) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(), b = rng.uniform();
    const double h = compute_h_score(a, b);
    EXPECT_DOUBLE_EQ(h, compute_h_score(b, a));
    EXPECT_LE(h, 2.0 * std::min(a, b) + 1e-15);
    EXPECT_LE(h, std::max(a, b) + 1e-15);
    EXPECT_NEAR(compute_h_score(a, a), a, 1e-15);
  }
}

TEST(Argmax, LowestIndexWinsTies) {
  RowVector s(4);
  s << 0.2, 0.7, 0.7, 0.1;
  EXPECT_EQ(argmax_lowest(s), 1);
  s << 0.5, 0.5, 0.5, 0.5;
  EXPECT_EQ(argmax_lowest(s), 0);
  EXPECT_THROW(argmax_lowest(RowVector()), InputError);
}

TEST(Classifier, PredictMatchesScalarOracleOnRandomInstances) {
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto t = make_tiny_task(100 + seed);
    jitter(t.model, seed);
    const Classifier cls(*t.task, t.model);
    Rng rng(seed);
    for (int i = 0; i < 12; ++i, ++checked) {
      const Image img = random_image(rng, 8);
      EXPECT_EQ(cls.predict(img), oracle_predict(*t.task, t.model, img)) << "seed " << seed << " item " << i;
    }
  }
  EXPECT_GE(checked, 100);
}

TEST(Classifier, PosteriorIsASoftmaxOverLabelsWithUnknownLast) {
  auto t = make_tiny_task(5);
  jitter(t.model, 5);
  const Classifier cls(*t.task, t.model);
  ASSERT_EQ(cls.labels().size(), 4u);
  EXPECT_EQ(cls.labels().back(), "unknown");
  EXPECT_EQ(cls.unknown_label(), 3);
  EXPECT_EQ(cls.unknown_label(), t.task->unknown_label());
  for (Eigen::Index r = 0; r < cls.text_embeddings().rows(); ++r) {
    EXPECT_NEAR(cls.text_embeddings().row(r).norm(), 1.0, 1e-12);
  }
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const Image img = random_image(rng, 8);
    const RowVector p = cls.posterior(img);
    const RowVector s = cls.similarities(img);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    double z = 0;
    for (Eigen::Index c = 0; c < s.size(); ++c) z += std::exp((s(c) - s.maxCoeff()) / 0.01);
    for (Eigen::Index c = 0; c < s.size(); ++c) EXPECT_NEAR(p(c), std::exp((s(c) - s.maxCoeff()) / 0.01) / z, 1e-12);
    EXPECT_EQ(cls.predict_name(img), cls.labels()[static_cast<size_t>(cls.predict(img))]);
  }
}

TEST(Classifier, PredictionIgnoresTemperatureAndIsRepeatable) {
  auto t = make_tiny_task(6);
  jitter(t.model, 6);
  LossConfig warm;
  warm.temperature = 0.5;
  const Classifier a(*t.task, t.model);
  const Classifier b(*t.task, t.model, warm);
  Rng rng(2);
  for (int i = 0; i < 30; ++i) {
    const Image img = random_image(rng, 8);
    EXPECT_EQ(a.predict(img), b.predict(img));
    EXPECT_EQ(a.predict(img), a.predict(img));
  }
}

TEST(Report, CountsMatchAHandCountedConfusion) {
  const std::vector<std::string> labels{"a", "b", "unknown"};
  // truth:      a a a b b novel novel novel novel
  // predicted:  a b u b b u     u     a     u
  const std::vector<int> truth{0, 0, 0, 1, 1, 2, 2, 2, 2};
  const std::vector<int> pred{0, 1, 2, 1, 1, 2, 2, 0, 2};
  const EvalReport r = report_from_predictions(labels, truth, pred);
  EXPECT_EQ(r.known_items, 5);
  EXPECT_EQ(r.known_correct, 3);
  EXPECT_EQ(r.novel_items, 4);
  EXPECT_EQ(r.novel_rejected, 3);
  EXPECT_DOUBLE_EQ(r.closed_acc, 0.6);
  EXPECT_DOUBLE_EQ(r.novel_acc, 0.75);
  EXPECT_DOUBLE_EQ(r.h_score, compute_h_score(0.6, 0.75));
  EXPECT_EQ(r.confusion[0], (std::vector<int>{1, 1, 1}));
  EXPECT_EQ(r.confusion[2], (std::vector<int>{1, 0, 3}));
}

TEST(Report, KnownItemsPredictedUnknownCountAsErrors) {
  const EvalReport r = report_from_predictions({"a", "unknown"}, std::vector<int>{0, 0, 1}, std::vector<int>{1, 1, 1});
  EXPECT_DOUBLE_EQ(r.closed_acc, 0.0);
  EXPECT_DOUBLE_EQ(r.novel_acc, 1.0);
  EXPECT_DOUBLE_EQ(r.h_score, 0.0);
}

TEST(Report, RecomputingFromStoredCountsIsExact) {
  Rng rng(9);
  const std::vector<std::string> labels{"a", "b", "c", "unknown"};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> truth, pred;
    for (int i = 0; i < 40; ++i) {
      truth.push_back(static_cast<int>(rng.index(4)));
      pred.push_back(static_cast<int>(rng.index(4)));
    }
    const EvalReport r = report_from_predictions(labels, truth, pred);
    const EvalReport back = report_from_json(nlohmann::json::parse(to_json(r).dump()));
    EXPECT_EQ(back.closed_acc, r.closed_acc);
    EXPECT_EQ(back.novel_acc, r.novel_acc);
    EXPECT_EQ(back.h_score, r.h_score);
    EXPECT_EQ(back.confusion, r.confusion);
  }
  EXPECT_THROW(report_from_json(nlohmann::json{{"labels", {"a"}}}), SchemaError);
}

TEST(Report, RejectsMismatchedInputs) {
  EXPECT_THROW(report_from_predictions({"a", "unknown"}, std::vector<int>{0}, std::vector<int>{0, 1}), InputError);
  EXPECT_THROW(report_from_predictions({"a", "unknown"}, std::vector<int>{2}, std::vector<int>{0}), InputError);
  EXPECT_THROW(report_from_confusion({"a", "unknown"}, {{1, 0}}), InputError);
}

namespace {

struct SweepFixture {
  oslo::testing::TinyTask t;
  std::vector<LabeledItem> target;
  std::vector<int> target_class;  // dataset indices: 0..2 known, 3..8 novel
};

SweepFixture sweep_fixture() {
  SweepFixture f{make_tiny_task(21), {}, {}};
  jitter(f.t.model, 21);
  Rng rng(4);
  for (int c = 0; c < 9; ++c) {
    for (int i = 0; i < 4; ++i) {
      f.target.push_back({random_image(rng, 8), c < 3 ? c : f.t.task->unknown_label(), -1});
      f.target_class.push_back(c);
    }
  }
  return f;
}

}  // namespace

TEST(Evaluate, ThreadCountDoesNotChangeTheReport) {
  auto f = sweep_fixture();
  const Classifier cls(*f.t.task, f.t.model);
  const EvalReport one = evaluate(cls, f.target, 1);
  const EvalReport three = evaluate(cls, f.target, 3);
  EXPECT_EQ(one.confusion, three.confusion);
  EXPECT_EQ(one.h_score, three.h_score);
  EXPECT_EQ(one.known_items, 12);
  EXPECT_EQ(one.novel_items, 24);
  EXPECT_THROW(evaluate(cls, std::vector<LabeledItem>{}), InputError);
}

TEST(Sweep, FullRatioReproducesEvaluate) {
  auto f = sweep_fixture();
  const Classifier cls(*f.t.task, f.t.model);
  const EvalReport full = evaluate(cls, f.target);
  const auto rows = openness_sweep(cls, f.target, f.target_class, {2.0}, 1);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].novel_classes, 6);
  EXPECT_EQ(rows[0].known_classes, 3);
  EXPECT_EQ(rows[0].report.confusion, full.confusion);
  EXPECT_EQ(rows[0].report.h_score, full.h_score);
}

TEST(Sweep, SeedsChangeTheSubsampleAndRowsAreSorted) {
  auto f = sweep_fixture();
  const Classifier cls(*f.t.task, f.t.model);
  const auto a = openness_sweep(cls, f.target, f.target_class, {1.0, 0.0, 1.0 / 3.0, 5.0}, 1);
  const auto b = openness_sweep(cls, f.target, f.target_class, {1.0, 0.0, 1.0 / 3.0, 5.0}, 2);
  // 5.0 needs 15 novel classes and is skipped.
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a[0].ratio, 0.0);
  EXPECT_EQ(a[1].novel_classes, 1);
  EXPECT_EQ(a[2].novel_classes, 3);
  EXPECT_EQ(a[0].report.novel_items, 0);
  EXPECT_EQ(a[2].report.novel_items, 12);
  EXPECT_NE(a[2].novel_kept, b[2].novel_kept);
  EXPECT_NE(a[2].seed, b[2].seed);
  for (int c : a[2].novel_kept) EXPECT_TRUE(c >= 3 && c <= 8);
  // Known items are never dropped.
  for (const auto& row : a) EXPECT_EQ(row.report.known_items, 12);
}

TEST(Sweep, TableIsPlotReady) {
  auto f = sweep_fixture();
  const Classifier cls(*f.t.task, f.t.model);
  const auto rows = openness_sweep(cls, f.target, f.target_class, {2.0, 1.0}, 7);
  const fs::path path = fs::temp_directory_path() / "oslo_test_evaluator" / "sweep.tsv";
  write_sweep_table(path, rows);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "ratio\tknown_classes\tnovel_classes\tseed\tclosed_acc\tnovel_acc\th_score\tnovel_kept");
  int lines = 0;
  double last_ratio = -1;
  for (std::string line; std::getline(in, line); ++lines) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, '\t');) cells.push_back(cell);
    ASSERT_EQ(cells.size(), 8u) << line;
    const double ratio = std::stod(cells[0]);
    EXPECT_GT(ratio, last_ratio);
    last_ratio = ratio;
    const double h = std::stod(cells[6]);
    EXPECT_NEAR(h, compute_h_score(std::stod(cells[4]), std::stod(cells[5])), 1e-6);
  }
  EXPECT_EQ(lines, 2);
}
