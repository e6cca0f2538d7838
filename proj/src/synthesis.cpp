#include "oslo/synthesis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace oslo {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string slug(const std::string& s) {
  std::string out;
  for (unsigned char c : s) out.push_back(std::isalnum(c) ? static_cast<char>(std::tolower(c)) : '_');
  return out;
}

}  // namespace

std::string open_class_name_prompt(const std::string& known_class) {
  return fmt::format(
      "Generate semantic category names closely related but visually distinct from classes in {{{}}}. "
      "Answer with one category name per line.",
      known_class);
}

std::string attribute_prompt(const std::string& class_name, int count) {
  return fmt::format(
      "Generate {} distinguishable attributes for the category {} in an image. Answer with a comma-separated list.",
      count, class_name);
}

std::string image_prompt(const std::string& domain_style, const std::string& name) {
  return fmt::format("Generate images in the style of {} depicting {}", domain_style, name);
}

std::vector<std::string> parse_name_list(const std::string& reply) {
  std::vector<std::string> out;
  std::string item;
  auto flush = [&] {
    std::string s = trim(item);
    item.clear();
    // List markers: "-", "*", "1.", "2)".
    size_t i = 0;
    while (i < s.size() && (s[i] == '-' || s[i] == '*' || s[i] == ' ')) ++i;
    size_t d = i;
    while (d < s.size() && std::isdigit(static_cast<unsigned char>(s[d]))) ++d;
    if (d > i && d < s.size() && (s[d] == '.' || s[d] == ')')) i = d + 1;
    s = trim(s.substr(i));
    while (!s.empty() && (s.back() == '.' || s.back() == ';')) s.pop_back();
    if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) s = s.substr(1, s.size() - 2);
    s = trim(s);
    if (!s.empty()) out.push_back(s);
  };
  for (char c : reply) {
    if (c == '\n' || c == ',') {
      flush();
    } else {
      item.push_back(c);
    }
  }
  flush();
  return out;
}

namespace {

// Adds valid names from `candidates` to `set`, tracking lowercase forms in
// `seen`. Returns how many were added.
int admit_names(const std::vector<std::string>& candidates, const std::set<std::string>& known_lower,
                std::set<std::string>& seen, const std::string& related, int cap, OpenClassNameSet& set) {
  int added = 0;
  for (const auto& name : candidates) {
    if (cap > 0 && added >= cap) break;
    const std::string key = lower(name);
    if (known_lower.count(key)) {
      spdlog::info("rejected pseudo-open name '{}': collides with a known class", name);
      continue;
    }
    if (!seen.insert(key).second) {
      spdlog::info("rejected pseudo-open name '{}': duplicate", name);
      continue;
    }
    set.names.push_back(name);
    if (!related.empty()) set.related_to[name] = related;
    ++added;
  }
  return added;
}

std::set<std::string> lowered(const std::vector<std::string>& v) {
  std::set<std::string> out;
  for (const auto& s : v) out.insert(lower(s));
  return out;
}

}  // namespace

OpenClassNameSet generate_open_class_names(const std::vector<std::string>& known, LlmClient& client,
                                           const NameGenerationOptions& options) {
  if (known.empty()) throw InputError("cannot generate pseudo-open names for an empty known-class set");
  const auto known_lower = lowered(known);
  std::set<std::string> seen;
  OpenClassNameSet set;
  set.provenance = NameProvenance::Llm;
  for (size_t i = 0; i < known.size(); ++i) {
    std::string reply;
    try {
      reply = client.complete(open_class_name_prompt(known[i]), mix_seed(options.seed, i));
    } catch (const ServiceError& e) {
      throw PartialResultError(
          fmt::format("pseudo-open name request for '{}' failed: {} ({} names gathered before the failure)", known[i],
                      e.what(), set.names.size()),
          set);
    }
    admit_names(parse_name_list(reply), known_lower, seen, known[i], options.max_per_class, set);
  }
  return set;
}

OpenClassNameSet validate_open_class_names(const std::vector<std::string>& candidates,
                                           const std::vector<std::string>& known) {
  std::set<std::string> seen;
  OpenClassNameSet set;
  set.provenance = NameProvenance::Manifest;
  std::vector<std::string> trimmed;
  for (const auto& c : candidates) {
    std::string t = trim(c);
    if (t.empty()) {
      spdlog::info("rejected empty pseudo-open name");
      continue;
    }
    trimmed.push_back(std::move(t));
  }
  admit_names(trimmed, lowered(known), seen, "", 0, set);
  return set;
}

AttributeSet generate_attribute_set(const std::string& class_name, int count, LlmClient& client, std::uint64_t seed) {
  if (count <= 0) throw InputError("attribute count must be positive");
  const auto phrases = parse_name_list(client.complete(attribute_prompt(class_name, count), seed));
  AttributeSet set;
  set.class_name = class_name;
  set.provenance = AttributeProvenance::LlmGenerated;
  std::set<std::string> seen;
  for (const auto& p : phrases) {
    if (static_cast<int>(set.phrases.size()) == count) break;
    if (seen.insert(lower(p)).second) set.phrases.push_back(p);
  }
  if (static_cast<int>(set.phrases.size()) < count) {
    throw ServiceError(fmt::format("attribute reply for '{}' holds {} distinct phrases, expected {}", class_name,
                                   set.phrases.size(), count));
  }
  validate(set, static_cast<size_t>(count));
  return set;
}

double grey_entropy(const Image& image) {
  validate(image);
  std::array<std::size_t, 256> hist{};
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const double v = std::clamp(luminance(image, y, x), 0.0, 1.0);
      ++hist[static_cast<size_t>(std::lround(v * 255.0))];
    }
  }
  const double n = static_cast<double>(image.height) * image.width;
  double h = 0.0;
  for (std::size_t c : hist) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  return h;
}

PseudoOpenManifest synthesize_open_images(const OpenClassNameSet& names, const std::string& domain_style,
                                          int count_per_name, ImageClient& client,
                                          const std::filesystem::path& output_dir, const SynthesisOptions& options,
                                          SynthesisReport* report) {
  if (count_per_name < 1) throw InputError("count_per_name must be at least 1");
  struct Job {
    std::string name;
    int index;
    std::uint64_t seed;
    std::optional<Image> image;
  };
  std::vector<Job> jobs;
  for (const auto& name : names.names) {
    const std::uint64_t base = mix_seed(options.seed, fnv1a(domain_style + "\x1f" + name));
    for (int j = 0; j < count_per_name; ++j) jobs.push_back({name, j, mix_seed(base, static_cast<std::uint64_t>(j)), {}});
  }

  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next++; i < jobs.size(); i = next++) {
      Job& job = jobs[i];
      try {
        Image img = client.generate(image_prompt(domain_style, job.name), job.seed);
        validate(img);
        job.image = to_rgb(quantize_8bit(std::move(img)));
      } catch (const std::exception& e) {
        spdlog::warn("image for '{}' ({} #{}) skipped: {}", job.name, domain_style, job.index, e.what());
      }
    }
  };
  {
    const int n = std::max(1, std::min<int>(options.workers, static_cast<int>(jobs.size())));
    std::vector<std::jthread> pool;
    for (int t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
  }

  SynthesisReport r;
  r.requested = static_cast<int>(jobs.size());
  PseudoOpenManifest manifest;
  for (Job& job : jobs) {
    if (!job.image) {
      ++r.failed;
      continue;
    }
    const double h = grey_entropy(*job.image);
    if (h <= options.entropy_threshold) {
      ++r.filtered;
      spdlog::info("image for '{}' ({} #{}) filtered: grey entropy {:.4f}", job.name, domain_style, job.index, h);
      continue;
    }
    const std::filesystem::path rel =
        std::filesystem::path(slug(domain_style)) / fmt::format("{}_{}.png", slug(job.name), job.index);
    save_png(*job.image, output_dir / rel);
    manifest.records.push_back({job.name, domain_style, rel.generic_string(), client.id(), job.seed, h});
    ++r.kept;
  }
  if (report) *report = r;
  if (r.requested > 0 && r.failed == r.requested) {
    throw ServiceError(fmt::format("all {} image requests for style '{}' failed", r.requested, domain_style));
  }
  return manifest;
}

void save_manifest(const std::filesystem::path& path, const PseudoOpenManifest& manifest) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  for (const auto& r : manifest.records) {
    nlohmann::ordered_json j;
    j["open_class_name"] = r.open_class_name;
    j["domain_style"] = r.domain_style;
    j["image_path"] = r.image_path;
    j["generator_id"] = r.generator_id;
    j["seed"] = r.seed;
    j["entropy"] = r.entropy;
    out << j.dump() << '\n';
  }
}

PseudoOpenManifest load_manifest(const std::filesystem::path& path, double entropy_threshold) {
  std::ifstream in(path);
  if (!in) throw InputError(fmt::format("cannot open manifest '{}'", path.string()));
  PseudoOpenManifest m;
  std::vector<std::string> problems;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (trim(line).empty()) continue;
    ManifestRecord r;
    try {
      const auto j = nlohmann::json::parse(line);
      r.open_class_name = j.at("open_class_name").get<std::string>();
      r.domain_style = j.at("domain_style").get<std::string>();
      r.image_path = j.at("image_path").get<std::string>();
      r.generator_id = j.at("generator_id").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.entropy = j.at("entropy").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
    const std::filesystem::path p = std::filesystem::path(r.image_path).is_absolute()
                                        ? std::filesystem::path(r.image_path)
                                        : path.parent_path() / r.image_path;
    if (!std::filesystem::exists(p)) problems.push_back(fmt::format("missing file {}", p.string()));
    if (!(r.entropy > entropy_threshold)) {
      problems.push_back(fmt::format("line {}: entropy {} not above {}", lineno, r.entropy, entropy_threshold));
    }
    m.records.push_back(std::move(r));
  }
  if (!problems.empty()) {
    throw InputError(fmt::format("manifest '{}' is invalid:\n  {}", path.string(), fmt::join(problems, "\n  ")));
  }
  return m;
}

Image mixup_pseudo_open(const Image& a, const Image& b, double lambda) {
  if (!a.same_shape(b)) {
    throw InputError(fmt::format("mixup needs equal shapes, got {}x{}x{} and {}x{}x{}", a.height, a.width, a.channels,
                                 b.height, b.width, b.channels));
  }
  if (!(lambda >= 0.3 && lambda <= 0.7)) throw InputError(fmt::format("mixup lambda {} outside [0.3, 0.7]", lambda));
  Image out = a;
  for (size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = std::clamp(lambda * a.pixels[i] + (1.0 - lambda) * b.pixels[i], 0.0, 1.0);
  }
  return out;
}

double sample_mixup_lambda(Rng& rng) { return rng.uniform(0.3, 0.7); }

std::vector<LabeledItem> mixup_pseudo_open_set(const std::vector<LabeledItem>& known, int count_per_domain,
                                               int unknown_label, std::uint64_t seed) {
  if (count_per_domain < 0) throw InputError("mixup count must be non-negative");
  std::map<int, std::vector<size_t>> by_domain;
  for (size_t i = 0; i < known.size(); ++i) {
    if (known[i].label != unknown_label) by_domain[known[i].domain].push_back(i);
  }
  std::vector<LabeledItem> out;
  if (count_per_domain == 0) return out;
  if (by_domain.size() < 2) throw InputError("mixup pseudo-open samples need items from two source domains");
  Rng rng(mix_seed(seed, 0x6d69));
  for (const auto& [domain, idx] : by_domain) {
    std::vector<size_t> others;
    for (const auto& [d, v] : by_domain) {
      if (d != domain) others.insert(others.end(), v.begin(), v.end());
    }
    for (int c = 0; c < count_per_domain; ++c) {
      const LabeledItem& a = known[idx[rng.index(idx.size())]];
      const LabeledItem& b = known[others[rng.index(others.size())]];
      LabeledItem item{mixup_pseudo_open(a.image, b.image, sample_mixup_lambda(rng)), unknown_label, domain};
      item.image.domain_tag = a.image.domain_tag;
      out.push_back(std::move(item));
    }
  }
  return out;
}

std::vector<LabeledItem> build_augmented_dataset(std::vector<LabeledItem> known, const PseudoOpenManifest& manifest,
                                                 const std::filesystem::path& manifest_dir,
                                                 const std::vector<std::string>& source_names, int unknown_label,
                                                 int image_size) {
  std::vector<std::filesystem::path> paths;
  std::vector<std::string> missing;
  for (const auto& r : manifest.records) {
    std::filesystem::path p = std::filesystem::path(r.image_path).is_absolute()
                                  ? std::filesystem::path(r.image_path)
                                  : manifest_dir / r.image_path;
    if (!std::filesystem::exists(p)) missing.push_back(p.string());
    paths.push_back(std::move(p));
  }
  if (!missing.empty()) {
    throw InputError(fmt::format("pseudo-open images not found:\n  {}", fmt::join(missing, "\n  ")));
  }
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    // A style shared by several sources (VLCS prompts are all "photo") goes
    // to the unassigned pool that backs every source.
    int domain = -1;
    int matches = 0;
    for (size_t s = 0; s < source_names.size(); ++s) {
      if (lower(source_names[s]) == lower(r.domain_style)) {
        domain = static_cast<int>(s);
        ++matches;
      }
    }
    if (matches > 1) domain = -1;
    Image img = resize_center_crop(to_rgb(load_image(paths[i])), image_size);
    img.domain_tag = r.domain_style;
    known.push_back({std::move(img), unknown_label, domain});
  }
  return known;
}

}  // namespace oslo
