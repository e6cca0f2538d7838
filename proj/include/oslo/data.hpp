#pragma once

// Dataset registry, known/novel splits, folder ingestion, k-shot sampling and
// batch assembly for the leave-one-domain-out protocol.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "oslo/image.hpp"
#include "oslo/model.hpp"

namespace oslo {

struct DatasetInfo {
  std::string key;                       // registry key, e.g. "pacs"
  std::string display_name;
  std::vector<std::string> class_names;  // index order = sorted (case-insensitive) names
  std::vector<std::string> domains;      // folder names, registry order
  std::vector<std::string> prompt_names; // text used in the domain prompt, per domain
  std::vector<std::vector<int>> source_rows;  // Source 1..3 class sets
  std::vector<int> target_row;
  bool ambiguous = false;  // table row layout does not pin down the protocol
  std::string note;
};

std::vector<std::string> registered_datasets();
// Case-insensitive; '-' and ' ' match '_'. Throws InputError for unknown names.
const DatasetInfo& dataset_info(const std::string& name);

// Expands "0–14, 21–31" style cells (hyphen or en dash) in written order.
std::vector<int> parse_index_cell(const std::string& cell);

struct SplitSpec {
  std::string dataset_name;
  std::string target_domain;
  std::vector<std::string> class_names;       // every dataset class
  std::vector<std::string> source_domains;    // remaining domains, registry order
  std::vector<std::string> source_prompts;
  std::string target_prompt;
  std::vector<std::vector<int>> per_source_classes;  // sorted dataset indices
  std::vector<int> target_classes;  // classes present in the target split
  std::vector<int> target_known;    // union of per_source_classes
  std::vector<int> target_novel;    // target_classes minus target_known
  bool ambiguous = false;

  // Known classes in index order; the position of a class in this list is
  // its training label.
  std::vector<std::string> known_class_names() const;
  // Position of a dataset class index in target_known, or -1.
  int known_position(int dataset_index) const;
};

// Sources are the registered domains other than the target, assigned to the
// table's Source 1..3 rows in registry order.
SplitSpec build_splits(const std::string& dataset_name, const std::string& target_domain);

// Plain-text rendering of the table rows (class names, Source 1..3, target,
// known, novel) that the shipped data/splits fixtures are compared against.
std::string render_split_table(const SplitSpec& spec);

// Source domains for PromptTask, class sets as known positions.
std::vector<SourceDomain> source_domains(const SplitSpec& spec);

// One image of a dataset, on disk or already in memory.
struct PoolItem {
  std::string domain;
  int class_index = -1;  // dataset class index
  std::filesystem::path path;
  std::optional<Image> image;
};

using DataPool = std::vector<PoolItem>;

// Loads (or copies) the image, converts to RGB and resizes/center-crops to
// image_size with area interpolation.
Image materialize(const PoolItem& item, int image_size);

// Scans root/<domain>/<class>/<image files>. Folder names match registry
// names case-insensitively; unmatched folders are skipped with a warning.
// Items are sorted by path.
DataPool ingest_folder(const std::filesystem::path& root, const DatasetInfo& info);

struct ShotConfig {
  int k = 1;
  std::uint64_t seed = 0;
};

// Exactly k images per class of each source's class set. The draw for each
// (domain, class) pair depends only on the seed and the pair. Throws
// InputError naming the pair when it has fewer than k images.
std::vector<LabeledItem> sample_k_shot(const SplitSpec& split, const ShotConfig& shots, const DataPool& pool,
                                       int image_size);

// Target-domain items of the split's target classes: known classes carry
// their known position, novel classes carry `unknown_label`. Each item's
// dataset class index is appended to `dataset_classes` when given.
std::vector<LabeledItem> target_items(const SplitSpec& split, const DataPool& pool, int unknown_label, int image_size,
                                      std::vector<int>* dataset_classes = nullptr);

struct BatchPlan {
  int known_batch_size = 6;
  int pseudo_open_per_source_domain = 3;
  // true: pseudo-open items are added to known_batch_size known items.
  // false: they take known_batch_size's place, leaving fewer known items.
  bool pseudo_open_in_addition = true;
};

void validate(const BatchPlan& plan, int n_sources);

// Known items (label != unknown_label) are shuffled with the epoch seed and
// cut into batches; each batch then receives pseudo_open_per_source_domain
// unknown items from every source domain. Per-domain pools are drawn without
// replacement and reshuffled when exhausted. Unknown items with domain -1
// back any source domain whose own pool is empty. The last batch may be short
// and is flagged partial.
std::vector<LabeledBatch> make_batches(const std::vector<LabeledItem>& augmented, const BatchPlan& plan,
                                       int n_sources, int unknown_label, std::uint64_t epoch_seed);

// Single-consumer view over a planned epoch.
class BatchStream {
 public:
  explicit BatchStream(std::vector<LabeledBatch> batches) : batches_(std::move(batches)) {}
  std::optional<LabeledBatch> next();
  size_t remaining() const { return batches_.size() - pos_; }

 private:
  std::vector<LabeledBatch> batches_;
  size_t pos_ = 0;
};

}  // namespace oslo
