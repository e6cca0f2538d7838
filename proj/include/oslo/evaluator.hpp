#pragma once

// Inference with the generic prompts over the known classes plus "unknown",
// closed-set accuracy, H-score and openness sweeps.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oslo/losses.hpp"
#include "oslo/model.hpp"

namespace oslo {

// Index of the largest entry; the lowest index wins ties.
int argmax_lowest(const RowVector& scores);

// Scores images against the generic prompts. Text embeddings are computed
// once at construction; predict is const and safe to call concurrently.
class Classifier {
 public:
  Classifier(const PromptTask& task, const PromptModel& model, const LossConfig& loss = {});

  // Cosine similarity to each of the |C| + 1 prompts, "unknown" last.
  RowVector similarities(const Image& image) const;
  RowVector posterior(const Image& image) const;
  // Known-class index, or unknown_label() for "unknown".
  int predict(const Image& image) const;
  std::string predict_name(const Image& image) const;
  int unknown_label() const { return static_cast<int>(labels_.size()) - 1; }
  const std::vector<std::string>& labels() const { return labels_; }
  // Rows are L2-normalized prompt embeddings.
  const Matrix& text_embeddings() const { return texts_; }

 private:
  const PromptTask* task_;
  VisualPrompt visual_;
  Matrix texts_;
  double temperature_;
  std::vector<std::string> labels_;
};

// 2ab / (a + b), 0 when both are 0. Throws InputError outside [0, 1].
double compute_h_score(double closed_acc, double novel_acc);

struct EvalReport {
  double closed_acc = 0.0;
  double novel_acc = 0.0;
  double h_score = 0.0;
  int known_items = 0;
  int known_correct = 0;
  int novel_items = 0;
  int novel_rejected = 0;
  // Predicted labels: known classes then "unknown". Truth rows: known classes
  // then "novel".
  std::vector<std::string> labels;
  std::vector<std::vector<int>> confusion;  // [truth][predicted]
};

// Rebuilds every rate from the confusion counts.
EvalReport report_from_confusion(std::vector<std::string> labels, std::vector<std::vector<int>> confusion);
// truth and predicted use known indices with `unknown_label` for novel / "unknown".
EvalReport report_from_predictions(const std::vector<std::string>& labels, std::span<const int> truth,
                                   std::span<const int> predicted);

// Throws InputError on an empty target set. Items are scored on `workers`
// threads and reduced in input order.
EvalReport evaluate(const Classifier& classifier, std::span<const LabeledItem> target, int workers = 1);

nlohmann::ordered_json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

struct SweepRow {
  double ratio = 0.0;  // novel classes / known classes kept in the target
  int known_classes = 0;
  int novel_classes = 0;
  std::vector<int> novel_kept;  // dataset class indices
  std::uint64_t seed = 0;
  EvalReport report;
};

// For each ratio, keeps every known class and round(ratio * known) novel
// classes drawn with mix_seed(seed, ratio index). Ratios that need more novel
// classes than exist (or a negative count) are skipped with a warning. Rows
// come back sorted by ratio. target_class holds each item's dataset class
// index; novel items are those labeled unknown.
std::vector<SweepRow> openness_sweep(const Classifier& classifier, std::span<const LabeledItem> target,
                                     std::span<const int> target_class, const std::vector<double>& ratios,
                                     std::uint64_t seed, int workers = 1);

// Tab-separated: ratio, known_classes, novel_classes, seed, closed_acc,
// novel_acc, h_score, novel_kept (comma list).
void write_sweep_table(const std::filesystem::path& path, const std::vector<SweepRow>& rows);

}  // namespace oslo
