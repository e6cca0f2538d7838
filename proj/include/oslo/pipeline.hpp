#pragma once

// Run configuration and the synthesize / train / evaluate steps behind the
// command-line tool. Relative paths in a config resolve against the working
// directory.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oslo/backbone.hpp"
#include "oslo/data.hpp"
#include "oslo/evaluator.hpp"
#include "oslo/synthesis.hpp"
#include "oslo/trainer.hpp"

namespace oslo {

struct BackboneSpec {
  std::string kind = "tiny";  // tiny | pretrained
  std::uint64_t seed = 0;     // tiny only
  BackboneConfig config;      // tiny only
  std::filesystem::path path; // pretrained only
};

struct SynthesisSpec {
  static HttpServiceConfig service(std::string url, std::string model, std::string credential_env) {
    HttpServiceConfig c;
    c.url = std::move(url);
    c.model = std::move(model);
    c.credential_env = std::move(credential_env);
    return c;
  }

  // live: HTTP services. manifest: an existing manifest, or recorded LLM
  // replies plus an offline image source. mixup: mixed source images.
  std::string mode = "manifest";
  std::filesystem::path manifest;    // read by train; written by synthesize
  std::filesystem::path llm_replay;  // manifest mode without a manifest file
  std::string image_source = "renderer";  // renderer | path to a replay index
  HttpServiceConfig llm = service("https://api.openai.com/v1/chat/completions", "gpt-4o", "OPENAI_API_KEY");
  HttpServiceConfig diffusion = service("http://127.0.0.1:7860/generate", "stable-diffusion", "DIFFUSION_API_KEY");
  int images_per_name = 3;
  int max_names_per_class = 8;
  int mixup_per_domain = 3;
  int workers = 1;
};

struct EvalSpec {
  std::vector<double> openness_ratios;  // empty: no sweep
  int workers = 1;
};

struct RunConfig {
  std::string dataset;
  std::filesystem::path data_root;
  std::string target_domain;  // a domain name or "all"
  int k = 1;
  std::vector<std::uint64_t> seeds{0};
  BackboneSpec backbone;
  std::filesystem::path attributes;
  SynthesisSpec synthesis;
  ModelConfig model;
  TrainConfig train;
  EvalSpec eval;
  std::filesystem::path output;
  bool offline = false;
};

// Reads a JSON config and applies "dotted.key=value" overrides; values parse
// as JSON when they can and as strings otherwise. Throws ConfigError for
// unknown keys, wrong types and unparseable files.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const RunConfig& config);

// Checks values and that every input path the command needs exists.
enum class Command { Synthesize, Train, Eval };
void validate(const RunConfig& config, Command command);

std::vector<std::string> resolve_targets(const RunConfig& config);
std::unique_ptr<Backbone> make_backbone(const BackboneSpec& spec);

// Holds <dir>/.lock for its lifetime; a second holder gets ConfigError.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct SynthesisSummary {
  std::filesystem::path manifest;
  int names = 0;
  SynthesisReport images;
  std::uint64_t network_calls = 0;
};

// Pseudo-open names for the dataset's known classes, then images in the style
// of every domain, written to config.synthesis.manifest (default
// <output>/pseudo_open/manifest.jsonl).
SynthesisSummary run_synthesis(const RunConfig& config, const Backbone& backbone);

struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::filesystem::path report;
  std::filesystem::path sweep;
};
RunPaths run_paths(const RunConfig& config, const std::string& target, std::uint64_t seed);

// Everything a train or eval step needs for one (target, seed).
struct PreparedRun {
  SplitSpec split;
  std::unique_ptr<PromptTask> task;
  std::vector<LabeledItem> augmented;  // k-shot set plus pseudo-open items
  std::vector<LabeledItem> target;
  std::vector<int> target_class;
  RunInfo info;
};

PreparedRun prepare_run(const RunConfig& config, const Backbone& backbone, const std::string& target,
                        std::uint64_t seed, bool need_training_data = true);

struct RunResult {
  std::string target;
  std::uint64_t seed = 0;
  std::vector<EpochSummary> epochs;
  EvalReport report;
  std::vector<SweepRow> sweep;
};

// Trains (or resumes from an existing checkpoint when `resume` is set) and
// evaluates one (target, seed).
RunResult run_train(const RunConfig& config, const Backbone& backbone, const std::string& target,
                    std::uint64_t seed, bool resume = false);
// Evaluates the checkpoint of one (target, seed). Throws ConfigError when the
// checkpoint belongs to another dataset or target.
RunResult run_eval(const RunConfig& config, const Backbone& backbone, const std::string& target, std::uint64_t seed,
                   const std::filesystem::path& checkpoint = {});

// Rows per seed, a mean row per target, and an "average" row over targets
// when there are several. Columns: target, seed, closed_acc, novel_acc,
// h_score.
void write_summary(const std::filesystem::path& path, const std::vector<RunResult>& results);

}  // namespace oslo
