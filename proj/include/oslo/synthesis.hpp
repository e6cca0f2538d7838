#pragma once

// Pseudo-open data: class names near the known classes from a language-model
// service, domain-styled images of those names from a text-to-image service,
// the grey-entropy filter, the mixup baseline, and the augmented source set.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "oslo/attributes.hpp"
#include "oslo/errors.hpp"
#include "oslo/image.hpp"
#include "oslo/model.hpp"
#include "oslo/rng.hpp"

namespace oslo {

inline constexpr double kEntropyThreshold = 0.2;

// Requests that left the process, over every HTTP client.
std::uint64_t network_call_count();

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  virtual std::string complete(const std::string& prompt, std::uint64_t seed) = 0;
  virtual std::string id() const = 0;
};

class ImageClient {
 public:
  virtual ~ImageClient() = default;
  virtual Image generate(const std::string& prompt, std::uint64_t seed) = 0;
  virtual std::string id() const = 0;
};

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds initial_backoff{500};
  double backoff_factor = 2.0;
};

// Spaces requests at least 1 / requests_per_second apart across threads.
class RateLimiter {
 public:
  explicit RateLimiter(double requests_per_second);
  void acquire();

 private:
  std::mutex mutex_;
  std::chrono::steady_clock::duration interval_;
  std::chrono::steady_clock::time_point next_;
};

struct HttpServiceConfig {
  std::string url;             // scheme://host[:port]/path
  std::string model;
  std::string credential_env;  // name of the variable holding the API key
  double requests_per_second = 1.0;
  RetryPolicy retry;
  int timeout_seconds = 120;
  int image_size = 512;        // diffusion only
};

// Chat-completion style endpoint: {"model", "messages": [{"role": "user",
// "content"}], "seed"} -> choices[0].message.content.
class HttpLlmClient : public LlmClient {
 public:
  // Throws ConfigError naming the variable when the credential is unset.
  explicit HttpLlmClient(HttpServiceConfig config);
  std::string complete(const std::string& prompt, std::uint64_t seed) override;
  std::string id() const override { return "llm:" + config_.model; }

 private:
  HttpServiceConfig config_;
  std::string key_;
  RateLimiter limiter_;
};

// Text-to-image endpoint: {"prompt", "seed", "width", "height", "model"} ->
// {"images": [base64 PNG, ...]}.
class HttpDiffusionClient : public ImageClient {
 public:
  explicit HttpDiffusionClient(HttpServiceConfig config);
  Image generate(const std::string& prompt, std::uint64_t seed) override;
  std::string id() const override { return "diffusion:" + config_.model; }

 private:
  HttpServiceConfig config_;
  std::string key_;
  RateLimiter limiter_;
};

// Recorded responses, keyed by prompt. Unrecorded prompts throw ServiceError.
// File: {"generator_id": str, "responses": [{"prompt": str, "response": str}]}.
class ReplayLlmClient : public LlmClient {
 public:
  explicit ReplayLlmClient(const std::filesystem::path& path);
  ReplayLlmClient(std::string generator_id, std::map<std::string, std::string> responses);
  std::string complete(const std::string& prompt, std::uint64_t seed) override;
  std::string id() const override { return id_; }

 private:
  std::string id_;
  std::map<std::string, std::string> responses_;
};

// Recorded images: {"generator_id": str, "images": [{"prompt": str, "seed":
// int, "path": str}]}, paths relative to the index file. Entries without a
// seed answer every seed.
class ReplayImageClient : public ImageClient {
 public:
  explicit ReplayImageClient(const std::filesystem::path& path);
  Image generate(const std::string& prompt, std::uint64_t seed) override;
  std::string id() const override { return id_; }

 private:
  std::string id_;
  std::map<std::pair<std::string, std::int64_t>, std::filesystem::path> entries_;
};

// Wraps a client with a (prompt, seed) response cache. Concurrent readers,
// exclusive writers; only successful responses are cached.
class CachingLlmClient : public LlmClient {
 public:
  explicit CachingLlmClient(std::shared_ptr<LlmClient> inner) : inner_(std::move(inner)) {}
  std::string complete(const std::string& prompt, std::uint64_t seed) override;
  std::string id() const override { return inner_->id(); }
  std::uint64_t upstream_calls() const { return upstream_calls_; }

 private:
  std::shared_ptr<LlmClient> inner_;
  std::shared_mutex mutex_;
  std::map<std::pair<std::string, std::uint64_t>, std::string> cache_;
  std::atomic<std::uint64_t> upstream_calls_{0};
};

class CachingImageClient : public ImageClient {
 public:
  explicit CachingImageClient(std::shared_ptr<ImageClient> inner) : inner_(std::move(inner)) {}
  Image generate(const std::string& prompt, std::uint64_t seed) override;
  std::string id() const override { return inner_->id(); }
  std::uint64_t upstream_calls() const { return upstream_calls_; }

 private:
  std::shared_ptr<ImageClient> inner_;
  std::shared_mutex mutex_;
  std::map<std::pair<std::string, std::uint64_t>, Image> cache_;
  std::atomic<std::uint64_t> upstream_calls_{0};
};

enum class NameProvenance { Llm, Manifest };

struct OpenClassNameSet {
  std::vector<std::string> names;
  std::map<std::string, std::string> related_to;  // name -> known class it was requested for
  NameProvenance provenance = NameProvenance::Llm;
};

// Raised when the service keeps failing; `partial` holds the names gathered
// before the failure.
class PartialResultError : public ServiceError {
 public:
  PartialResultError(const std::string& what, OpenClassNameSet partial)
      : ServiceError(what), partial(std::move(partial)) {}
  OpenClassNameSet partial;
};

struct NameGenerationOptions {
  int max_per_class = 8;  // 0 keeps every valid name
  std::uint64_t seed = 0;
};

std::string open_class_name_prompt(const std::string& known_class);
std::string attribute_prompt(const std::string& class_name, int count);
std::string image_prompt(const std::string& domain_style, const std::string& name);

// Splits a free-form reply into candidate names: one per line or comma,
// list markers and surrounding quotes removed.
std::vector<std::string> parse_name_list(const std::string& reply);

// One request per known class. Names colliding with a known class or with an
// earlier name (case-insensitive) are dropped and logged.
OpenClassNameSet generate_open_class_names(const std::vector<std::string>& known, LlmClient& client,
                                           const NameGenerationOptions& options = {});
OpenClassNameSet validate_open_class_names(const std::vector<std::string>& candidates,
                                           const std::vector<std::string>& known);

// Requests `count` attributes and keeps the first `count` distinct phrases.
// Throws ServiceError when the reply has fewer.
AttributeSet generate_attribute_set(const std::string& class_name, int count, LlmClient& client,
                                    std::uint64_t seed = 0);

// Shannon entropy (bits) of the 256-bin histogram of round(255 * luminance).
double grey_entropy(const Image& image);

struct ManifestRecord {
  std::string open_class_name;
  std::string domain_style;
  std::string image_path;  // relative to the manifest's directory unless absolute
  std::string generator_id;
  std::uint64_t seed = 0;
  double entropy = 0.0;
};

struct PseudoOpenManifest {
  std::vector<ManifestRecord> records;
};

struct SynthesisOptions {
  std::uint64_t seed = 0;
  double entropy_threshold = kEntropyThreshold;
  int workers = 1;
};

struct SynthesisReport {
  int requested = 0;
  int kept = 0;
  int filtered = 0;  // rejected by the entropy filter
  int failed = 0;    // generation errors
};

// Generates count_per_name images per name with the prompt
// "Generate images in the style of <style> depicting <name>", writes the
// admitted ones as PNG under output_dir/<style>/ and returns their records
// (paths relative to output_dir). Throws ServiceError when every request fails.
PseudoOpenManifest synthesize_open_images(const OpenClassNameSet& names, const std::string& domain_style,
                                          int count_per_name, ImageClient& client,
                                          const std::filesystem::path& output_dir,
                                          const SynthesisOptions& options = {}, SynthesisReport* report = nullptr);

// One JSON object per line, fields in the order open_class_name, domain_style,
// image_path, generator_id, seed, entropy.
void save_manifest(const std::filesystem::path& path, const PseudoOpenManifest& manifest);
// Throws SchemaError on malformed lines and InputError listing every missing
// image file or record at or below the entropy threshold.
PseudoOpenManifest load_manifest(const std::filesystem::path& path, double entropy_threshold = kEntropyThreshold);

// lambda * a + (1 - lambda) * b. Throws InputError on shape mismatch or lambda
// outside [0.3, 0.7].
Image mixup_pseudo_open(const Image& a, const Image& b, double lambda);
double sample_mixup_lambda(Rng& rng);

// Mixup pseudo-open items from pairs of known items drawn from two different
// source domains; labeled unknown and tagged with the first item's domain.
std::vector<LabeledItem> mixup_pseudo_open_set(const std::vector<LabeledItem>& known, int count_per_domain,
                                               int unknown_label, std::uint64_t seed);

// The known set plus one unknown-labeled item per manifest record. Images
// are resized to image_size; the record's style selects the source index
// through a case-insensitive match against source_names (-1 when absent or
// ambiguous). Throws InputError listing every missing file.
std::vector<LabeledItem> build_augmented_dataset(std::vector<LabeledItem> known, const PseudoOpenManifest& manifest,
                                                 const std::filesystem::path& manifest_dir,
                                                 const std::vector<std::string>& source_names, int unknown_label,
                                                 int image_size);

}  // namespace oslo
