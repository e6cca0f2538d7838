#include "oslo/data.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "oslo/errors.hpp"
#include "oslo/rng.hpp"

namespace oslo {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string registry_key(const std::string& name) {
  std::string k = lower(name);
  std::replace(k.begin(), k.end(), '-', '_');
  std::replace(k.begin(), k.end(), ' ', '_');
  return k;
}

std::vector<std::string> sorted_names(std::vector<std::string> names) {
  std::stable_sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) { return lower(a) < lower(b); });
  return names;
}

std::vector<std::string> index_names(int count) {
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) out.push_back(fmt::format("class_{:03d}", i));
  return out;
}

DatasetInfo make_info(std::string key, std::string display, std::vector<std::string> classes,
                      std::vector<std::string> domains, std::vector<std::string> prompts,
                      std::vector<std::string> source_cells, std::string target_cell, bool ambiguous = false,
                      std::string note = {}) {
  DatasetInfo info;
  info.key = std::move(key);
  info.display_name = std::move(display);
  info.class_names = sorted_names(std::move(classes));
  info.domains = std::move(domains);
  info.prompt_names = std::move(prompts);
  for (const auto& c : source_cells) info.source_rows.push_back(parse_index_cell(c));
  info.target_row = parse_index_cell(target_cell);
  info.ambiguous = ambiguous;
  info.note = std::move(note);
  return info;
}

const std::vector<DatasetInfo>& registry() {
  static const std::vector<DatasetInfo> infos = [] {
    std::vector<DatasetInfo> v;
    v.push_back(make_info("pacs", "PACS", {"dog", "elephant", "giraffe", "guitar", "horse", "house", "person"},
                          {"art_painting", "cartoon", "photo", "sketch"},
                          {"art painting", "cartoon", "photo", "sketch"}, {"3, 0, 1", "4, 0, 2", "5, 1, 2"}, "0–6"));
    v.push_back(make_info("vlcs", "VLCS", {"bird", "car", "chair", "dog", "person"},
                          {"Caltech101", "LabelMe", "SUN09", "VOC2007"}, {"photo", "photo", "photo", "photo"},
                          {"0, 1", "1, 2", "2, 3"}, "0–4"));
    v.push_back(make_info(
        "office_home", "Office-Home",
        {"Alarm_Clock", "Backpack",   "Batteries",  "Bed",          "Bike",         "Bottle",      "Bucket",
         "Calculator",  "Calendar",   "Candles",    "Chair",        "Clipboards",   "Computer",    "Couch",
         "Curtains",    "Desk_Lamp",  "Drill",      "Eraser",       "Exit_Sign",    "Fan",         "File_Cabinet",
         "Flipflops",   "Flowers",    "Folder",     "Fork",         "Glasses",      "Hammer",      "Helmet",
         "Kettle",      "Keyboard",   "Knives",     "Lamp_Shade",   "Laptop",       "Marker",      "Monitor",
         "Mop",         "Mouse",      "Mug",        "Notebook",     "Oven",         "Pan",         "Paper_Clip",
         "Pen",         "Pencil",     "Postit_Notes", "Printer",    "Push_Pin",     "Radio",       "Refrigerator",
         "Ruler",       "Scissors",   "Screwdriver", "Shelf",       "Sink",         "Sneakers",    "Soda",
         "Speaker",     "Spoon",      "TV",         "Table",        "Telephone",    "ToothBrush",  "Toys",
         "Trash_Can",   "Webcam"},
        {"Art", "Clipart", "Product", "Real_World"}, {"art", "clipart", "product", "real world"},
        {"0–14, 21–31", "0–8, 15–20, 32–42", "0–2, 9–20, 43–53"},
        "0, 3–4, 9–10, 15–16, 21–23, 32–34, 43–45, 54–64"));
    v.push_back(make_info("multi_dataset", "Multi-Dataset", index_names(68),
                          {"office31", "stl10", "visda2017", "domainnet"}, {"photo", "photo", "photo", "photo"},
                          {"0–30", "1, 31–41", "31, 33–34, 41–47"},
                          "0, 1, 5–6, 10–11, 14, 17, 20, 26, 31–36, 39–43, 45–46, 48–67", true,
                          "rows encoded verbatim; the table does not say which constituent dataset is each source, "
                          "and class names are index placeholders"));
    v.push_back(make_info("mini_domainnet", "Mini-DomainNet", index_names(126),
                          {"clipart", "painting", "real", "sketch"}, {"clipart", "painting", "real", "sketch"},
                          {"0–19, 40–59", "0–9, 20–39, 80–89", "10–19, 40–49, 60–79"},
                          "0–4, 8–17, 25–34, 43–47, 75–79, 83–87, 90–125", true,
                          "rows encoded verbatim; the target row reaches index 125 although the dataset has 125 "
                          "classes, and class names are index placeholders"));
    v.push_back(make_info("synthetic_shapes", "Synthetic shapes", {"circle", "cross", "square", "star", "triangle"},
                          {"flat", "outline", "striped", "dotted"}, {"flat", "outline", "striped", "dotted"},
                          {"0, 1, 2, 4", "0, 1, 2, 4", "0, 1, 2, 4"}, "0–4"));
    return v;
  }();
  return infos;
}

std::vector<int> sorted_unique(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace

std::vector<std::string> registered_datasets() {
  std::vector<std::string> out;
  for (const auto& i : registry()) out.push_back(i.key);
  return out;
}

const DatasetInfo& dataset_info(const std::string& name) {
  const std::string key = registry_key(name);
  for (const auto& i : registry()) {
    if (i.key == key || registry_key(i.display_name) == key) return i;
  }
  throw InputError(fmt::format("unknown dataset '{}' (registered: {})", name, fmt::join(registered_datasets(), ", ")));
}

std::vector<int> parse_index_cell(const std::string& cell) {
  std::string s;
  for (size_t i = 0; i < cell.size(); ++i) {
    // En dash (U+2013) reads as a hyphen.
    if (static_cast<unsigned char>(cell[i]) == 0xE2 && i + 2 < cell.size() &&
        static_cast<unsigned char>(cell[i + 1]) == 0x80 && static_cast<unsigned char>(cell[i + 2]) == 0x93) {
      s.push_back('-');
      i += 2;
    } else {
      s.push_back(cell[i]);
    }
  }
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part.erase(std::remove_if(part.begin(), part.end(), [](unsigned char c) { return std::isspace(c); }), part.end());
    if (part.empty()) continue;
    try {
      const auto dash = part.find('-');
      if (dash == std::string::npos) {
        out.push_back(std::stoi(part));
      } else {
        const int a = std::stoi(part.substr(0, dash));
        const int b = std::stoi(part.substr(dash + 1));
        if (b < a) throw InputError(fmt::format("descending range '{}'", part));
        for (int i = a; i <= b; ++i) out.push_back(i);
      }
    } catch (const std::logic_error&) {
      throw InputError(fmt::format("cannot parse index cell '{}'", cell));
    }
  }
  return out;
}

std::vector<std::string> SplitSpec::known_class_names() const {
  std::vector<std::string> out;
  for (int i : target_known) out.push_back(class_names.at(static_cast<size_t>(i)));
  return out;
}

int SplitSpec::known_position(int dataset_index) const {
  auto it = std::lower_bound(target_known.begin(), target_known.end(), dataset_index);
  if (it == target_known.end() || *it != dataset_index) return -1;
  return static_cast<int>(it - target_known.begin());
}

SplitSpec build_splits(const std::string& dataset_name, const std::string& target_domain) {
  const DatasetInfo& info = dataset_info(dataset_name);
  int target = -1;
  for (size_t d = 0; d < info.domains.size(); ++d) {
    if (lower(info.domains[d]) == lower(target_domain)) target = static_cast<int>(d);
  }
  if (target < 0) {
    throw InputError(fmt::format("dataset '{}' has no domain '{}' (domains: {})", info.key, target_domain,
                                 fmt::join(info.domains, ", ")));
  }
  SplitSpec spec;
  spec.dataset_name = info.key;
  spec.target_domain = info.domains[static_cast<size_t>(target)];
  spec.target_prompt = info.prompt_names[static_cast<size_t>(target)];
  spec.class_names = info.class_names;
  spec.ambiguous = info.ambiguous;
  size_t row = 0;
  for (size_t d = 0; d < info.domains.size(); ++d) {
    if (static_cast<int>(d) == target) continue;
    spec.source_domains.push_back(info.domains[d]);
    spec.source_prompts.push_back(info.prompt_names[d]);
    spec.per_source_classes.push_back(sorted_unique(info.source_rows.at(row++)));
  }
  std::vector<int> known;
  for (const auto& r : spec.per_source_classes) known.insert(known.end(), r.begin(), r.end());
  spec.target_known = sorted_unique(known);
  spec.target_classes = sorted_unique(info.target_row);
  for (int c : spec.target_classes) {
    if (!std::binary_search(spec.target_known.begin(), spec.target_known.end(), c)) spec.target_novel.push_back(c);
  }
  const int n = static_cast<int>(spec.class_names.size());
  for (int c : spec.target_classes) {
    if (c < 0 || c >= n) throw ConfigError(fmt::format("split index {} outside {} classes", c, n));
  }
  return spec;
}

std::string render_split_table(const SplitSpec& spec) {
  const DatasetInfo& info = dataset_info(spec.dataset_name);
  std::string out = fmt::format("dataset\t{}\n", info.display_name);
  for (size_t i = 0; i < spec.class_names.size(); ++i) out += fmt::format("class\t{}\t{}\n", i, spec.class_names[i]);
  for (size_t s = 0; s < spec.per_source_classes.size(); ++s) {
    out += fmt::format("source_{}\t{}\n", s + 1, fmt::join(spec.per_source_classes[s], ","));
  }
  out += fmt::format("target\t{}\n", fmt::join(spec.target_classes, ","));
  out += fmt::format("known\t{}\n", fmt::join(spec.target_known, ","));
  out += fmt::format("novel\t{}\n", fmt::join(spec.target_novel, ","));
  out += fmt::format("ambiguous\t{}\n", spec.ambiguous ? "yes" : "no");
  return out;
}

std::vector<SourceDomain> source_domains(const SplitSpec& spec) {
  std::vector<SourceDomain> out;
  for (size_t s = 0; s < spec.source_domains.size(); ++s) {
    SourceDomain d{spec.source_domains[s], spec.source_prompts[s], {}};
    for (int c : spec.per_source_classes[s]) d.classes.push_back(spec.known_position(c));
    out.push_back(std::move(d));
  }
  return out;
}

Image materialize(const PoolItem& item, int image_size) {
  Image img = item.image ? *item.image : load_image(item.path);
  img = resize_center_crop(to_rgb(std::move(img)), image_size);
  img.domain_tag = item.domain;
  return img;
}

DataPool ingest_folder(const std::filesystem::path& root, const DatasetInfo& info) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw InputError(fmt::format("dataset root '{}' is not a directory", root.string()));
  static const std::set<std::string> extensions{".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"};
  std::map<std::string, std::string> domain_of;
  for (const auto& d : info.domains) domain_of[lower(d)] = d;
  std::map<std::string, int> class_of;
  for (size_t i = 0; i < info.class_names.size(); ++i) class_of[lower(info.class_names[i])] = static_cast<int>(i);

  DataPool pool;
  for (const auto& dentry : fs::directory_iterator(root)) {
    if (!dentry.is_directory()) continue;
    auto d = domain_of.find(lower(dentry.path().filename().string()));
    if (d == domain_of.end()) {
      spdlog::warn("skipping folder '{}': not a domain of {}", dentry.path().string(), info.display_name);
      continue;
    }
    for (const auto& centry : fs::directory_iterator(dentry.path())) {
      if (!centry.is_directory()) continue;
      auto c = class_of.find(lower(centry.path().filename().string()));
      if (c == class_of.end()) {
        spdlog::warn("skipping folder '{}': not a class of {}", centry.path().string(), info.display_name);
        continue;
      }
      for (const auto& f : fs::recursive_directory_iterator(centry.path())) {
        if (!f.is_regular_file() || !extensions.count(lower(f.path().extension().string()))) continue;
        pool.push_back({d->second, c->second, f.path(), std::nullopt});
      }
    }
  }
  std::sort(pool.begin(), pool.end(), [](const PoolItem& a, const PoolItem& b) { return a.path < b.path; });
  return pool;
}

std::vector<LabeledItem> sample_k_shot(const SplitSpec& split, const ShotConfig& shots, const DataPool& pool,
                                       int image_size) {
  if (shots.k < 1) throw InputError(fmt::format("k must be at least 1, got {}", shots.k));
  std::vector<LabeledItem> out;
  for (size_t s = 0; s < split.source_domains.size(); ++s) {
    const std::string& domain = split.source_domains[s];
    for (int c : split.per_source_classes[s]) {
      std::vector<size_t> candidates;
      for (size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].class_index == c && lower(pool[i].domain) == lower(domain)) candidates.push_back(i);
      }
      const std::string& cls = split.class_names.at(static_cast<size_t>(c));
      if (static_cast<int>(candidates.size()) < shots.k) {
        throw InputError(fmt::format("domain '{}' class '{}' has {} images, {}-shot sampling needs {}", domain, cls,
                                     candidates.size(), shots.k, shots.k));
      }
      Rng rng(mix_seed(shots.seed, fnv1a(lower(domain) + "/" + lower(cls))));
      rng.shuffle(candidates);
      for (int j = 0; j < shots.k; ++j) {
        out.push_back({materialize(pool[candidates[static_cast<size_t>(j)]], image_size), split.known_position(c),
                       static_cast<int>(s)});
      }
    }
  }
  return out;
}

std::vector<LabeledItem> target_items(const SplitSpec& split, const DataPool& pool, int unknown_label, int image_size,
                                      std::vector<int>* dataset_classes) {
  std::vector<LabeledItem> out;
  for (const auto& item : pool) {
    if (lower(item.domain) != lower(split.target_domain)) continue;
    if (!std::binary_search(split.target_classes.begin(), split.target_classes.end(), item.class_index)) continue;
    const int pos = split.known_position(item.class_index);
    out.push_back({materialize(item, image_size), pos >= 0 ? pos : unknown_label, -1});
    if (dataset_classes != nullptr) dataset_classes->push_back(item.class_index);
  }
  return out;
}

void validate(const BatchPlan& plan, int n_sources) {
  if (plan.known_batch_size < 0 || plan.pseudo_open_per_source_domain < 0) {
    throw ConfigError("batch plan counts must be non-negative");
  }
  const int open = plan.pseudo_open_per_source_domain * n_sources;
  const int known = plan.pseudo_open_in_addition ? plan.known_batch_size : plan.known_batch_size - open;
  if (known <= 0) {
    throw ConfigError(fmt::format("batch plan leaves {} known items per batch (size {}, {} pseudo-open)", known,
                                  plan.known_batch_size, open));
  }
}

std::vector<LabeledBatch> make_batches(const std::vector<LabeledItem>& augmented, const BatchPlan& plan,
                                       int n_sources, int unknown_label, std::uint64_t epoch_seed) {
  validate(plan, n_sources);
  const int per_domain = plan.pseudo_open_per_source_domain;
  const int known_per_batch = plan.pseudo_open_in_addition ? plan.known_batch_size
                                                           : plan.known_batch_size - per_domain * n_sources;
  std::vector<size_t> known;
  std::map<int, std::vector<size_t>> open_by_domain;
  for (size_t i = 0; i < augmented.size(); ++i) {
    if (augmented[i].label == unknown_label) {
      open_by_domain[augmented[i].domain].push_back(i);
    } else {
      known.push_back(i);
    }
  }
  if (known.empty()) throw InputError("no known-class items to batch");

  Rng rng(mix_seed(epoch_seed, 0xba7c));
  rng.shuffle(known);

  // Draw queues per source; an empty source pool falls back to unassigned items.
  struct Queue {
    std::vector<size_t> items;
    std::vector<size_t> order;
    size_t pos = 0;
  };
  std::vector<Queue> queues(static_cast<size_t>(n_sources));
  if (per_domain > 0) {
    for (int s = 0; s < n_sources; ++s) {
      auto it = open_by_domain.find(s);
      if (it != open_by_domain.end() && !it->second.empty()) {
        queues[static_cast<size_t>(s)].items = it->second;
      } else if (auto u = open_by_domain.find(-1); u != open_by_domain.end() && !u->second.empty()) {
        queues[static_cast<size_t>(s)].items = u->second;
      } else {
        throw InputError(fmt::format(
            "no pseudo-open items for source domain {} and the batch plan asks for {} per domain", s, per_domain));
      }
    }
  }
  auto draw = [&](Queue& q) {
    if (q.pos == q.order.size()) {
      q.order = q.items;
      rng.shuffle(q.order);
      q.pos = 0;
    }
    return q.order[q.pos++];
  };

  std::vector<LabeledBatch> batches;
  for (size_t start = 0; start < known.size(); start += static_cast<size_t>(known_per_batch)) {
    const size_t end = std::min(known.size(), start + static_cast<size_t>(known_per_batch));
    LabeledBatch b;
    b.partial = end - start < static_cast<size_t>(known_per_batch);
    for (size_t i = start; i < end; ++i) b.items.push_back(augmented[known[i]]);
    for (int s = 0; s < n_sources && per_domain > 0; ++s) {
      for (int j = 0; j < per_domain; ++j) {
        LabeledItem item = augmented[draw(queues[static_cast<size_t>(s)])];
        item.domain = s;
        b.items.push_back(std::move(item));
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

std::optional<LabeledBatch> BatchStream::next() {
  if (pos_ >= batches_.size()) return std::nullopt;
  return std::move(batches_[pos_++]);
}

}  // namespace oslo
