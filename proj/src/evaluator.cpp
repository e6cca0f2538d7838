#include "oslo/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <map>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "oslo/errors.hpp"
#include "oslo/rng.hpp"

namespace oslo {

int argmax_lowest(const RowVector& scores) {
  if (scores.size() == 0) throw InputError("argmax of an empty score vector");
  int best = 0;
  for (Eigen::Index i = 1; i < scores.size(); ++i) {
    if (scores(i) > scores(best)) best = static_cast<int>(i);
  }
  return best;
}

Classifier::Classifier(const PromptTask& task, const PromptModel& model, const LossConfig& loss)
    : task_(&task), visual_(model.visual()), temperature_(loss.temperature) {
  validate(loss);
  labels_ = task.classes();
  labels_.push_back(kUnknownClass);
  texts_.resize(static_cast<Eigen::Index>(labels_.size()), task.backbone().config().dims.d_joint);
  for (size_t i = 0; i < labels_.size(); ++i) {
    const TokenSeq prompt = assemble_generic_prompt(model.generic, visual_, model.projector, labels_[i]);
    texts_.row(static_cast<Eigen::Index>(i)) = task.backbone().encode_text(prompt).vector.normalized();
  }
}

RowVector Classifier::similarities(const Image& image) const {
  const RowVector img = task_->backbone().encode_image(image, visual_).vector.normalized();
  return img * texts_.transpose();
}

RowVector Classifier::posterior(const Image& image) const {
  RowVector logits = similarities(image) / temperature_;
  logits.array() -= logits.maxCoeff();
  RowVector p = logits.array().exp();
  return p / p.sum();
}

// Argmax over the cosine similarities; softmax is monotone so the posterior
// argmax is the same but ties are judged before any rounding.
int Classifier::predict(const Image& image) const { return argmax_lowest(similarities(image)); }

std::string Classifier::predict_name(const Image& image) const {
  return labels_[static_cast<size_t>(predict(image))];
}

double compute_h_score(double closed_acc, double novel_acc) {
  auto check = [](double v, const char* what) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError(fmt::format("{} must lie in [0, 1], got {}", what, v));
  };
  check(closed_acc, "closed-set accuracy");
  check(novel_acc, "novel accuracy");
  if (closed_acc + novel_acc == 0.0) return 0.0;
  return 2.0 * closed_acc * novel_acc / (closed_acc + novel_acc);
}

EvalReport report_from_confusion(std::vector<std::string> labels, std::vector<std::vector<int>> confusion) {
  const size_t n = labels.size();
  if (n < 2 || confusion.size() != n) throw InputError("confusion matrix does not match the label list");
  EvalReport r;
  for (size_t t = 0; t < n; ++t) {
    if (confusion[t].size() != n) throw InputError("confusion matrix is not square");
    const int row = std::accumulate(confusion[t].begin(), confusion[t].end(), 0);
    if (t + 1 < n) {
      r.known_items += row;
      r.known_correct += confusion[t][t];
    } else {
      r.novel_items += row;
      r.novel_rejected += confusion[t][n - 1];
    }
  }
  r.closed_acc = r.known_items > 0 ? static_cast<double>(r.known_correct) / r.known_items : 0.0;
  r.novel_acc = r.novel_items > 0 ? static_cast<double>(r.novel_rejected) / r.novel_items : 0.0;
  r.h_score = compute_h_score(r.closed_acc, r.novel_acc);
  r.labels = std::move(labels);
  r.confusion = std::move(confusion);
  return r;
}

EvalReport report_from_predictions(const std::vector<std::string>& labels, std::span<const int> truth,
                                   std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw InputError("truth and prediction counts differ");
  const int n = static_cast<int>(labels.size());
  std::vector<std::vector<int>> confusion(labels.size(), std::vector<int>(labels.size(), 0));
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= n || predicted[i] < 0 || predicted[i] >= n) {
      throw InputError(fmt::format("label out of range at item {}", i));
    }
    ++confusion[static_cast<size_t>(truth[i])][static_cast<size_t>(predicted[i])];
  }
  return report_from_confusion(labels, std::move(confusion));
}

namespace {

std::vector<int> predict_all(const Classifier& classifier, std::span<const LabeledItem> items, int workers) {
  std::vector<int> out(items.size());
  const size_t w = static_cast<size_t>(std::clamp(workers, 1, 64));
  if (w == 1 || items.size() < 2) {
    for (size_t i = 0; i < items.size(); ++i) out[i] = classifier.predict(items[i].image);
    return out;
  }
  // Strided partition; each slot is written by exactly one thread.
  std::vector<std::exception_ptr> errors(w);
  {
    std::vector<std::jthread> threads;
    for (size_t t = 0; t < w; ++t) {
      threads.emplace_back([&, t] {
        try {
          for (size_t i = t; i < items.size(); i += w) out[i] = classifier.predict(items[i].image);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace

EvalReport evaluate(const Classifier& classifier, std::span<const LabeledItem> target, int workers) {
  if (target.empty()) throw InputError("cannot evaluate an empty target set");
  std::vector<int> truth;
  truth.reserve(target.size());
  for (const auto& it : target) truth.push_back(it.label);
  const auto predicted = predict_all(classifier, target, workers);
  return report_from_predictions(classifier.labels(), truth, predicted);
}

nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["closed_acc"] = r.closed_acc;
  j["novel_acc"] = r.novel_acc;
  j["h_score"] = r.h_score;
  j["known_items"] = r.known_items;
  j["known_correct"] = r.known_correct;
  j["novel_items"] = r.novel_items;
  j["novel_rejected"] = r.novel_rejected;
  j["labels"] = r.labels;
  j["confusion"] = r.confusion;
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  try {
    return report_from_confusion(j.at("labels").get<std::vector<std::string>>(),
                                 j.at("confusion").get<std::vector<std::vector<int>>>());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("malformed evaluation report: {}", e.what()));
  }
}

std::vector<SweepRow> openness_sweep(const Classifier& classifier, std::span<const LabeledItem> target,
                                     std::span<const int> target_class, const std::vector<double>& ratios,
                                     std::uint64_t seed, int workers) {
  if (target.size() != target_class.size()) throw InputError("target items and class indices differ in count");
  if (target.empty()) throw InputError("cannot sweep an empty target set");
  const int unknown = classifier.unknown_label();
  std::set<int> known_set, novel_set;
  for (size_t i = 0; i < target.size(); ++i) (target[i].label == unknown ? novel_set : known_set).insert(target_class[i]);
  const std::vector<int> novel(novel_set.begin(), novel_set.end());
  const int n_known = static_cast<int>(known_set.size());

  // Predictions do not depend on the subset, so score everything once.
  const auto predicted = predict_all(classifier, target, workers);

  std::vector<SweepRow> rows;
  for (size_t r = 0; r < ratios.size(); ++r) {
    const double want = ratios[r] * n_known;
    const long count = std::lround(want);
    if (!std::isfinite(want) || count < 0 || count > static_cast<long>(novel.size())) {
      spdlog::warn("openness ratio {} needs {} novel classes, {} available; skipped", ratios[r], want, novel.size());
      continue;
    }
    SweepRow row;
    row.ratio = ratios[r];
    row.known_classes = n_known;
    row.novel_classes = static_cast<int>(count);
    row.seed = mix_seed(seed, r);
    std::vector<int> pool = novel;
    Rng rng(row.seed);
    rng.shuffle(pool);
    pool.resize(static_cast<size_t>(count));
    std::sort(pool.begin(), pool.end());
    row.novel_kept = pool;

    std::vector<int> truth, pred;
    for (size_t i = 0; i < target.size(); ++i) {
      if (target[i].label == unknown && !std::binary_search(pool.begin(), pool.end(), target_class[i])) continue;
      truth.push_back(target[i].label);
      pred.push_back(predicted[i]);
    }
    row.report = report_from_predictions(classifier.labels(), truth, pred);
    spdlog::info("openness {:.3f}: {} known / {} novel classes (kept {}), H = {:.4f}", row.ratio, n_known, count,
                 fmt::join(pool, ","), row.report.h_score);
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.ratio < b.ratio; });
  return rows;
}

void write_sweep_table(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError(fmt::format("cannot write sweep table '{}'", path.string()));
  out << "ratio\tknown_classes\tnovel_classes\tseed\tclosed_acc\tnovel_acc\th_score\tnovel_kept\n";
  for (const auto& r : rows) {
    out << fmt::format("{}\t{}\t{}\t{}\t{:.6f}\t{:.6f}\t{:.6f}\t{}\n", r.ratio, r.known_classes, r.novel_classes,
                       r.seed, r.report.closed_acc, r.report.novel_acc, r.report.h_score, fmt::join(r.novel_kept, ","));
  }
}

}  // namespace oslo
