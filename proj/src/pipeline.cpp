#include "oslo/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "oslo/errors.hpp"
#include "oslo/rng.hpp"
#include "oslo/synthetic.hpp"

namespace oslo {

namespace fs = std::filesystem;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// Reads one JSON object, remembering which keys were consumed so that typos
// surface as errors instead of silently falling back to defaults.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(fmt::format("{} must be a JSON object", label()));
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(fmt::format("config key {} has the wrong type ({})", path(key), it->type_name()));
    }
  }

  void get_path(const std::string& key, fs::path& out) {
    std::string s;
    if (j_.contains(key)) {
      get(key, s);
      out = s;
    }
  }

  void get_seed(const std::string& key, std::uint64_t& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    if (!it->is_number_unsigned() && !(it->is_number_integer() && it->template get<std::int64_t>() >= 0)) {
      throw ConfigError(fmt::format("config key {} must be a non-negative integer", path(key)));
    }
    out = it->template get<std::uint64_t>();
  }

  // Nested object, or nullptr when absent.
  const nlohmann::json* child(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError(fmt::format("unknown config key '{}'", path(key)));
    }
  }

 private:
  std::string label() const { return where_.empty() ? "config" : "config section '" + where_ + "'"; }

  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> used_;
};

void read_service(const nlohmann::json& j, const std::string& where, HttpServiceConfig& s) {
  ObjectReader r(j, where);
  r.get("url", s.url);
  r.get("model", s.model);
  r.get("credential_env", s.credential_env);
  r.get("requests_per_second", s.requests_per_second);
  r.get("max_attempts", s.retry.max_attempts);
  int backoff_ms = static_cast<int>(s.retry.initial_backoff.count());
  r.get("initial_backoff_ms", backoff_ms);
  s.retry.initial_backoff = std::chrono::milliseconds(backoff_ms);
  r.get("timeout_seconds", s.timeout_seconds);
  r.get("image_size", s.image_size);
  r.finish();
}

nlohmann::ordered_json service_json(const HttpServiceConfig& s) {
  nlohmann::ordered_json j;
  j["url"] = s.url;
  j["model"] = s.model;
  j["credential_env"] = s.credential_env;
  j["requests_per_second"] = s.requests_per_second;
  j["max_attempts"] = s.retry.max_attempts;
  j["initial_backoff_ms"] = s.retry.initial_backoff.count();
  j["timeout_seconds"] = s.timeout_seconds;
  j["image_size"] = s.image_size;
  return j;
}

// Sets j[a][b][c] = value for "a.b.c".
void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(fmt::format("override '{}' is not of the form key=value", assignment));
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json* node = &j;
  size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(fmt::format("override key '{}' has an empty component", key));
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError(fmt::format("override key '{}' descends into a non-object", key));
    start = dot + 1;
  }
}

fs::path manifest_path(const RunConfig& c) {
  return c.synthesis.manifest.empty() ? c.output / "pseudo_open" / "manifest.jsonl" : c.synthesis.manifest;
}

fs::path attributes_path(const RunConfig& c) {
  return c.attributes.empty() ? c.output / "attributes.jsonl" : c.attributes;
}

std::vector<std::string> dataset_known_classes(const DatasetInfo& info) {
  std::set<int> known;
  for (const auto& row : info.source_rows) known.insert(row.begin(), row.end());
  std::vector<std::string> out;
  for (int i : known) out.push_back(info.class_names.at(static_cast<size_t>(i)));
  return out;
}

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(fmt::format("{} is not configured", what));
  if (!fs::exists(p)) throw ConfigError(fmt::format("{} '{}' does not exist", what, p.string()));
}

nlohmann::ordered_json run_identity(const RunConfig& config, const std::string& target, std::uint64_t seed) {
  nlohmann::ordered_json j = to_json(config);
  // Paths and seed lists do not change what a single run computes.
  j.erase("output");
  j.erase("seeds");
  j.erase("target_domain");
  j.erase("offline");
  j["eval"].erase("workers");
  j["synthesis"].erase("workers");
  j["run_target"] = target;
  j["run_seed"] = seed;
  return j;
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  ObjectReader r(j, "");
  r.get("dataset", c.dataset);
  r.get_path("data_root", c.data_root);
  r.get("target_domain", c.target_domain);
  r.get("k", c.k);
  if (const auto* seeds = r.child("seeds")) {
    if (!seeds->is_array()) throw ConfigError("config key seeds must be a list of non-negative integers");
    c.seeds.clear();
    for (const auto& s : *seeds) {
      if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<std::int64_t>() >= 0)) {
        throw ConfigError("config key seeds must be a list of non-negative integers");
      }
      c.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  r.get_path("attributes", c.attributes);
  r.get_path("output", c.output);
  r.get("offline", c.offline);

  if (const auto* b = r.child("backbone")) {
    ObjectReader br(*b, "backbone");
    br.get("kind", c.backbone.kind);
    br.get_seed("seed", c.backbone.seed);
    br.get_path("path", c.backbone.path);
    auto& bc = c.backbone.config;
    br.get("d_patch", bc.dims.d_patch);
    br.get("d_tok", bc.dims.d_tok);
    br.get("d_joint", bc.dims.d_joint);
    br.get("depth", bc.depth);
    br.get("image_heads", bc.image_heads);
    br.get("text_heads", bc.text_heads);
    br.get("image_size", bc.image_size);
    br.get("patch_size", bc.patch_size);
    br.get("context_length", bc.context_length);
    br.get("mlp_ratio", bc.mlp_ratio);
    br.finish();
  }
  if (const auto* s = r.child("synthesis")) {
    ObjectReader sr(*s, "synthesis");
    auto& sy = c.synthesis;
    sr.get("mode", sy.mode);
    sr.get_path("manifest", sy.manifest);
    sr.get_path("llm_replay", sy.llm_replay);
    sr.get("image_source", sy.image_source);
    sr.get("images_per_name", sy.images_per_name);
    sr.get("max_names_per_class", sy.max_names_per_class);
    sr.get("mixup_per_domain", sy.mixup_per_domain);
    sr.get("workers", sy.workers);
    if (const auto* llm = sr.child("llm")) read_service(*llm, "synthesis.llm", sy.llm);
    if (const auto* dif = sr.child("diffusion")) read_service(*dif, "synthesis.diffusion", sy.diffusion);
    sr.finish();
  }
  if (const auto* m = r.child("model")) {
    ObjectReader mr(*m, "model");
    mr.get("context_length", c.model.context_length);
    mr.get("learnable_tokens", c.model.learnable_tokens);
    mr.get("visual_prompt_tokens", c.model.visual_prompt_tokens);
    mr.get("projector_hidden", c.model.projector_hidden);
    mr.get("attention_dim", c.model.attention_dim);
    mr.get("attributes_per_class", c.model.attributes_per_class);
    mr.finish();
  }
  if (const auto* t = r.child("train")) {
    ObjectReader tr(*t, "train");
    auto& tc = c.train;
    tr.get("epochs", tc.epochs);
    std::string opt = to_string(tc.optimizer.kind);
    tr.get("optimizer", opt);
    tc.optimizer.kind = parse_optimizer(opt);
    tr.get("learning_rate", tc.optimizer.learning_rate);
    tr.get("weight_decay", tc.optimizer.weight_decay);
    tr.get("beta1", tc.optimizer.beta1);
    tr.get("beta2", tc.optimizer.beta2);
    tr.get("epsilon", tc.optimizer.epsilon);
    tr.get("momentum", tc.optimizer.momentum);
    tr.get("known_batch_size", tc.batches.known_batch_size);
    tr.get("pseudo_open_per_source_domain", tc.batches.pseudo_open_per_source_domain);
    tr.get("pseudo_open_in_addition", tc.batches.pseudo_open_in_addition);
    tr.get("temperature", tc.loss.temperature);
    tr.get("stop_align_grad", tc.loss.stop_align_grad);
    tr.finish();
  }
  if (const auto* e = r.child("eval")) {
    ObjectReader er(*e, "eval");
    er.get("openness_ratios", c.eval.openness_ratios);
    er.get("workers", c.eval.workers);
    er.finish();
  }
  r.finish();
  return c;
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(fmt::format("config '{}' is not valid JSON: {}", path.string(), e.what()));
  }
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["dataset"] = c.dataset;
  j["data_root"] = c.data_root.string();
  j["target_domain"] = c.target_domain;
  j["k"] = c.k;
  j["seeds"] = c.seeds;
  const auto& bc = c.backbone.config;
  j["backbone"] = {{"kind", c.backbone.kind},       {"seed", c.backbone.seed},
                   {"path", c.backbone.path.string()}, {"d_patch", bc.dims.d_patch},
                   {"d_tok", bc.dims.d_tok},         {"d_joint", bc.dims.d_joint},
                   {"depth", bc.depth},              {"image_heads", bc.image_heads},
                   {"text_heads", bc.text_heads},    {"image_size", bc.image_size},
                   {"patch_size", bc.patch_size},    {"context_length", bc.context_length},
                   {"mlp_ratio", bc.mlp_ratio}};
  j["attributes"] = c.attributes.string();
  nlohmann::ordered_json s;
  s["mode"] = c.synthesis.mode;
  s["manifest"] = c.synthesis.manifest.string();
  s["llm_replay"] = c.synthesis.llm_replay.string();
  s["image_source"] = c.synthesis.image_source;
  s["images_per_name"] = c.synthesis.images_per_name;
  s["max_names_per_class"] = c.synthesis.max_names_per_class;
  s["mixup_per_domain"] = c.synthesis.mixup_per_domain;
  s["workers"] = c.synthesis.workers;
  s["llm"] = service_json(c.synthesis.llm);
  s["diffusion"] = service_json(c.synthesis.diffusion);
  j["synthesis"] = s;
  j["model"] = to_json(c.model);
  auto t = to_json(c.train);
  t.erase("seed");
  j["train"] = t;
  j["eval"] = {{"openness_ratios", c.eval.openness_ratios}, {"workers", c.eval.workers}};
  j["output"] = c.output.string();
  j["offline"] = c.offline;
  return j;
}

void validate(const RunConfig& c, Command command) {
  const DatasetInfo& info = dataset_info(c.dataset);
  if (c.target_domain.empty()) throw ConfigError("target_domain is not configured");
  resolve_targets(c);
  if (c.k < 1) throw ConfigError(fmt::format("k must be at least 1, got {}", c.k));
  if (c.seeds.empty()) throw ConfigError("seeds must list at least one seed");
  if (c.output.empty()) throw ConfigError("output directory is not configured");
  if (c.backbone.kind == "pretrained") {
    require_file(c.backbone.path, "backbone.path");
  } else if (c.backbone.kind != "tiny") {
    throw ConfigError(fmt::format("backbone.kind must be tiny or pretrained, got '{}'", c.backbone.kind));
  }
  const std::string& mode = c.synthesis.mode;
  if (mode != "live" && mode != "manifest" && mode != "mixup") {
    throw ConfigError(fmt::format("synthesis.mode must be live, manifest or mixup, got '{}'", mode));
  }
  if (c.synthesis.images_per_name < 1) throw ConfigError("synthesis.images_per_name must be at least 1");
  if (c.synthesis.max_names_per_class < 0) throw ConfigError("synthesis.max_names_per_class must be non-negative");
  if (c.synthesis.mixup_per_domain < 1) throw ConfigError("synthesis.mixup_per_domain must be at least 1");
  for (double r : c.eval.openness_ratios) {
    if (!(r >= 0.0)) throw ConfigError(fmt::format("openness ratio {} is negative", r));
  }
  if (command == Command::Synthesize) {
    if (mode == "mixup") throw ConfigError("synthesis.mode mixup needs no synthesize step");
    if (mode == "live" && c.offline) throw ConfigError("synthesis.mode live is not allowed with --offline");
    if (mode == "live") {
      for (const auto* s : {&c.synthesis.llm, &c.synthesis.diffusion}) {
        const char* v = std::getenv(s->credential_env.c_str());
        if (v == nullptr || *v == '\0') {
          throw ConfigError(fmt::format("credential environment variable {} is not set", s->credential_env));
        }
      }
    }
    if (mode == "manifest") {
      require_file(c.synthesis.llm_replay, "synthesis.llm_replay");
      if (c.synthesis.image_source != "renderer") require_file(c.synthesis.image_source, "synthesis.image_source");
      if (c.synthesis.image_source == "renderer" && info.key != "synthetic_shapes") {
        throw ConfigError("synthesis.image_source 'renderer' only draws the synthetic_shapes dataset");
      }
    }
    return;
  }
  validate(c.train);
  if (!fs::is_directory(c.data_root)) {
    throw ConfigError(fmt::format("data_root '{}' is not a directory", c.data_root.string()));
  }
  require_file(attributes_path(c), "attributes");
  if (command == Command::Train && mode != "mixup") require_file(manifest_path(c), "synthesis.manifest");
}

std::vector<std::string> resolve_targets(const RunConfig& c) {
  const DatasetInfo& info = dataset_info(c.dataset);
  if (lower(c.target_domain) == "all") return info.domains;
  for (const auto& d : info.domains) {
    if (lower(d) == lower(c.target_domain)) return {d};
  }
  throw ConfigError(fmt::format("dataset {} has no domain '{}' (domains: {}, or all)", info.key, c.target_domain,
                                fmt::join(info.domains, ", ")));
}

std::unique_ptr<Backbone> make_backbone(const BackboneSpec& spec) {
  if (spec.kind == "pretrained") return load_backbone(spec.path);
  return make_tiny_backbone(TinyBackboneOptions{spec.seed, spec.config});
}

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (f == nullptr) {
    throw ConfigError(fmt::format("output directory '{}' is in use by another run (remove {} if that run died)",
                                  dir.string(), path_.string()));
  }
  std::fclose(f);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

SynthesisSummary run_synthesis(const RunConfig& config, const Backbone& backbone) {
  validate(config, Command::Synthesize);
  const DatasetInfo& info = dataset_info(config.dataset);
  const auto& sy = config.synthesis;
  const std::uint64_t seed = config.seeds.front();
  const std::uint64_t calls_before = network_call_count();

  std::shared_ptr<LlmClient> llm;
  std::shared_ptr<ImageClient> images;
  if (sy.mode == "live") {
    llm = std::make_shared<CachingLlmClient>(std::make_shared<HttpLlmClient>(sy.llm));
    images = std::make_shared<CachingImageClient>(std::make_shared<HttpDiffusionClient>(sy.diffusion));
  } else {
    llm = std::make_shared<ReplayLlmClient>(sy.llm_replay);
    if (sy.image_source == "renderer") {
      images = std::make_shared<SyntheticImageClient>(backbone.config().image_size);
    } else {
      images = std::make_shared<ReplayImageClient>(sy.image_source);
    }
  }

  const auto known = dataset_known_classes(info);
  const OpenClassNameSet names = generate_open_class_names(known, *llm, {sy.max_names_per_class, seed});
  if (names.names.empty()) throw ServiceError("no valid pseudo-open class names were produced");
  spdlog::info("{} pseudo-open names: {}", names.names.size(), fmt::join(names.names, ", "));

  const fs::path attr = attributes_path(config);
  if (!fs::exists(attr)) {
    const int count = config.model.attributes_per_class > 0 ? config.model.attributes_per_class : 4;
    std::vector<AttributeSet> sets;
    for (size_t i = 0; i < known.size(); ++i) sets.push_back(generate_attribute_set(known[i], count, *llm, mix_seed(seed, i)));
    save_attribute_manifest(attr, sets);
    spdlog::info("wrote {} attribute sets to {}", sets.size(), attr.string());
  }

  SynthesisSummary summary;
  summary.manifest = manifest_path(config);
  summary.names = static_cast<int>(names.names.size());
  const fs::path dir = summary.manifest.parent_path().empty() ? fs::path(".") : summary.manifest.parent_path();
  PseudoOpenManifest manifest;
  std::set<std::string> styles_done;
  for (const auto& style : info.prompt_names) {
    if (!styles_done.insert(lower(style)).second) continue;
    SynthesisReport report;
    const auto part = synthesize_open_images(names, style, sy.images_per_name, *images, dir,
                                             {mix_seed(seed, fnv1a(lower(style))), kEntropyThreshold, sy.workers},
                                             &report);
    manifest.records.insert(manifest.records.end(), part.records.begin(), part.records.end());
    summary.images.requested += report.requested;
    summary.images.kept += report.kept;
    summary.images.filtered += report.filtered;
    summary.images.failed += report.failed;
  }
  save_manifest(summary.manifest, manifest);
  summary.network_calls = network_call_count() - calls_before;
  return summary;
}

RunPaths run_paths(const RunConfig& config, const std::string& target, std::uint64_t seed) {
  RunPaths p;
  p.dir = config.output / target / fmt::format("seed_{}", seed);
  p.checkpoint = p.dir / "checkpoint.oslo";
  p.log = p.dir / "train_log.jsonl";
  p.report = p.dir / "eval.json";
  p.sweep = p.dir / "openness.tsv";
  return p;
}

PreparedRun prepare_run(const RunConfig& config, const Backbone& backbone, const std::string& target,
                        std::uint64_t seed, bool need_training_data) {
  const DatasetInfo& info = dataset_info(config.dataset);
  const int size = backbone.config().image_size;
  PreparedRun run;
  run.split = build_splits(info.key, target);
  if (run.split.ambiguous) spdlog::warn("{}: {}", info.display_name, info.note);
  const DataPool pool = ingest_folder(config.data_root, info);
  const auto attributes = load_attribute_manifest(attributes_path(config));
  run.task = std::make_unique<PromptTask>(backbone, run.split.known_class_names(), source_domains(run.split),
                                          attributes, config.model);
  const int unknown = run.task->unknown_label();
  run.info = {info.key, run.split.target_domain, config_hash(run_identity(config, run.split.target_domain, seed))};

  if (need_training_data) {
    auto known = sample_k_shot(run.split, {config.k, mix_seed(seed, 0x5407)}, pool, size);
    if (config.synthesis.mode == "mixup") {
      auto open = mixup_pseudo_open_set(known, config.synthesis.mixup_per_domain, unknown, mix_seed(seed, 0x313));
      run.augmented = std::move(known);
      run.augmented.insert(run.augmented.end(), open.begin(), open.end());
    } else {
      const fs::path mpath = manifest_path(config);
      const PseudoOpenManifest manifest = load_manifest(mpath);
      // Keep only records drawn in a source style; the target style must stay unseen.
      std::set<std::string> styles;
      for (const auto& p : run.split.source_prompts) styles.insert(lower(p));
      PseudoOpenManifest kept;
      for (const auto& r : manifest.records) {
        if (styles.count(lower(r.domain_style))) kept.records.push_back(r);
      }
      spdlog::info("{} of {} pseudo-open records are in a source style", kept.records.size(), manifest.records.size());
      if (kept.records.empty()) throw InputError(fmt::format("manifest '{}' has no record in a source style", mpath.string()));
      run.augmented = build_augmented_dataset(std::move(known), kept, mpath.parent_path(), run.split.source_prompts,
                                              unknown, size);
    }
  }
  run.target = target_items(run.split, pool, unknown, size, &run.target_class);
  return run;
}

namespace {

void write_report(const fs::path& path, const RunInfo& info, std::uint64_t seed, const EvalReport& report) {
  nlohmann::ordered_json j;
  j["dataset"] = info.dataset;
  j["target_domain"] = info.target_domain;
  j["seed"] = seed;
  j["config_hash"] = info.config_hash;
  j["report"] = to_json(report);
  fs::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(2) << '\n';
}

RunResult evaluate_run(const RunConfig& config, const PreparedRun& run, const PromptModel& model,
                       const std::string& target, std::uint64_t seed) {
  RunResult result;
  result.target = run.split.target_domain;
  result.seed = seed;
  const Classifier classifier(*run.task, model, config.train.loss);
  result.report = evaluate(classifier, run.target, config.eval.workers);
  const RunPaths paths = run_paths(config, target, seed);
  write_report(paths.report, run.info, seed, result.report);
  if (!config.eval.openness_ratios.empty()) {
    result.sweep = openness_sweep(classifier, run.target, run.target_class, config.eval.openness_ratios, seed,
                                  config.eval.workers);
    write_sweep_table(paths.sweep, result.sweep);
  }
  spdlog::info("{} seed {}: closed acc {:.4f}, novel acc {:.4f}, H {:.4f}", result.target, seed,
               result.report.closed_acc, result.report.novel_acc, result.report.h_score);
  return result;
}

}  // namespace

RunResult run_train(const RunConfig& config, const Backbone& backbone, const std::string& target, std::uint64_t seed,
                    bool resume_existing) {
  const PreparedRun run = prepare_run(config, backbone, target, seed, true);
  const RunPaths paths = run_paths(config, run.split.target_domain, seed);
  TrainConfig tc = config.train;
  tc.seed = seed;
  tc.checkpoint_path = paths.checkpoint;
  tc.log_path = paths.log;

  std::vector<EpochSummary> epochs;
  TrainState state = initial_state(*run.task, tc);
  if (resume_existing && fs::exists(paths.checkpoint)) {
    epochs = resume(paths.checkpoint, *run.task, tc, run.augmented, run.info, &state);
  } else {
    epochs = train(*run.task, tc, run.augmented, state, run.info);
  }
  RunResult result = evaluate_run(config, run, state.model, run.split.target_domain, seed);
  result.epochs = std::move(epochs);
  return result;
}

RunResult run_eval(const RunConfig& config, const Backbone& backbone, const std::string& target, std::uint64_t seed,
                   const fs::path& checkpoint) {
  const fs::path ckpt = checkpoint.empty() ? run_paths(config, target, seed).checkpoint : checkpoint;
  LoadedCheckpoint loaded = load_checkpoint(ckpt, backbone, config.train.optimizer);
  const DatasetInfo& info = dataset_info(config.dataset);
  if (loaded.info.dataset != info.key || lower(loaded.info.target_domain) != lower(target)) {
    throw ConfigError(fmt::format("checkpoint '{}' was trained for {}/{}, not {}/{}", ckpt.string(),
                                  loaded.info.dataset, loaded.info.target_domain, info.key, target));
  }
  RunConfig cfg = config;
  cfg.model = loaded.model_config;
  const PreparedRun run = prepare_run(cfg, backbone, target, seed, false);
  if (loaded.classes != run.task->classes()) throw ConfigError("checkpoint class list differs from the split's");
  return evaluate_run(cfg, run, loaded.state.model, run.split.target_domain, seed);
}

void write_summary(const fs::path& path, const std::vector<RunResult>& results) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError(fmt::format("cannot write summary '{}'", path.string()));
  out << "target\tseed\tclosed_acc\tnovel_acc\th_score\n";
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunResult*>> by_target;
  for (const auto& r : results) {
    if (!by_target.count(r.target)) order.push_back(r.target);
    by_target[r.target].push_back(&r);
  }
  double sum_c = 0, sum_n = 0, sum_h = 0;
  for (const auto& t : order) {
    double c = 0, n = 0, h = 0;
    for (const RunResult* r : by_target[t]) {
      out << fmt::format("{}\t{}\t{:.6f}\t{:.6f}\t{:.6f}\n", t, r->seed, r->report.closed_acc, r->report.novel_acc,
                         r->report.h_score);
      c += r->report.closed_acc;
      n += r->report.novel_acc;
      h += r->report.h_score;
    }
    const double k = static_cast<double>(by_target[t].size());
    out << fmt::format("{}\tmean\t{:.6f}\t{:.6f}\t{:.6f}\n", t, c / k, n / k, h / k);
    sum_c += c / k;
    sum_n += n / k;
    sum_h += h / k;
  }
  if (order.size() > 1) {
    const double k = static_cast<double>(order.size());
    out << fmt::format("average\tmean\t{:.6f}\t{:.6f}\t{:.6f}\n", sum_c / k, sum_n / k, sum_h / k);
  }
}

}  // namespace oslo
