#include "oslo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "oslo/errors.hpp"
#include "oslo/rng.hpp"

namespace oslo {

namespace {

bool all_finite(const LossValues& v) {
  return std::isfinite(v.dom_spec) && std::isfinite(v.align) && std::isfinite(v.dom_gen) && std::isfinite(v.total);
}

bool all_finite(const PromptModel& model) {
  for (const Parameter* p : model.parameters()) {
    if (!p->value.allFinite()) return false;
  }
  return true;
}

// Cheap identity of the frozen weights: shapes plus a strided sample of values.
std::string backbone_fingerprint(const Backbone& backbone) {
  std::uint64_t h = fnv1a(backbone.config().identifier);
  for (const auto& [name, m] : backbone.weights().arrays) {
    h = fnv1a(fmt::format("{}:{}x{}", name, m.rows(), m.cols()), h);
    const Eigen::Index stride = std::max<Eigen::Index>(1, m.size() / 4096);
    for (Eigen::Index i = 0; i < m.size(); i += stride) {
      const double v = m.data()[i];
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(&v), sizeof v), h);
    }
  }
  return fmt::format("{:016x}", h);
}

std::string meta_or_throw(const NamedArrays& a, const std::string& key) {
  auto it = a.metadata.find(key);
  if (it == a.metadata.end()) throw SchemaError(fmt::format("checkpoint lacks metadata '{}'", key));
  return it->second;
}

template <typename T>
T parse_number(const std::string& s, const std::string& key) {
  try {
    size_t used = 0;
    T v;
    if constexpr (std::is_same_v<T, std::uint64_t>) {
      v = std::stoull(s, &used);
    } else {
      v = static_cast<T>(std::stoll(s, &used));
    }
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw SchemaError(fmt::format("checkpoint metadata '{}' is not a number: '{}'", key, s));
  }
}

void write_step_log(std::ofstream& log, std::int64_t step, int epoch, size_t batch_size, const LossValues& v) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["batch_size"] = batch_size;
  j["l_dom_spec"] = v.dom_spec;
  j["l_align"] = v.align;
  j["l_dom_gen"] = v.dom_gen;
  j["l_total"] = v.total;
  log << j.dump() << '\n';
}

}  // namespace

OptimizerKind parse_optimizer(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (n == "adamw") return OptimizerKind::AdamW;
  if (n == "sgd") return OptimizerKind::Sgd;
  throw ConfigError(fmt::format("unknown optimizer '{}' (expected adamw or sgd)", name));
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::AdamW ? "adamw" : "sgd"; }

void Optimizer::step(const std::vector<Parameter*>& params) {
  ++steps_;
  const double lr = config_.learning_rate;
  const double wd = config_.weight_decay;
  for (Parameter* p : params) {
    if (p->value.size() == 0) continue;
    Matrix& m = first_[p->name];
    if (m.size() == 0) m = Matrix::Zero(p->value.rows(), p->value.cols());
    if (config_.kind == OptimizerKind::AdamW) {
      Matrix& v = second_[p->name];
      if (v.size() == 0) v = Matrix::Zero(p->value.rows(), p->value.cols());
      const double b1 = config_.beta1, b2 = config_.beta2;
      m = b1 * m + (1.0 - b1) * p->grad;
      v = b2 * v + (1.0 - b2) * p->grad.cwiseProduct(p->grad);
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
      p->value *= 1.0 - lr * wd;
      p->value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.epsilon);
    } else {
      const Matrix g = p->grad + wd * p->value;
      m = config_.momentum * m + g;
      p->value -= lr * m;
    }
  }
}

void Optimizer::save_state(NamedArrays& out) const {
  out.metadata["optimizer.kind"] = to_string(config_.kind);
  out.metadata["optimizer.steps"] = std::to_string(steps_);
  for (const auto& [name, m] : first_) out.arrays["optimizer/" + name + "/m"] = m;
  for (const auto& [name, v] : second_) out.arrays["optimizer/" + name + "/v"] = v;
}

void Optimizer::load_state(const NamedArrays& in, const std::vector<Parameter*>& params) {
  const std::string kind = meta_or_throw(in, "optimizer.kind");
  if (parse_optimizer(kind) != config_.kind) {
    throw SchemaError(fmt::format("checkpoint optimizer is {}, config asks for {}", kind, to_string(config_.kind)));
  }
  steps_ = parse_number<std::int64_t>(meta_or_throw(in, "optimizer.steps"), "optimizer.steps");
  first_.clear();
  second_.clear();
  for (const Parameter* p : params) {
    for (const auto& [suffix, dest] : {std::pair{"/m", &first_}, std::pair{"/v", &second_}}) {
      auto it = in.arrays.find("optimizer/" + p->name + suffix);
      if (it == in.arrays.end()) continue;
      if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
        throw SchemaError(fmt::format("optimizer buffer for {} has shape {}x{}", p->name, it->second.rows(),
                                      it->second.cols()));
      }
      (*dest)[p->name] = it->second;
    }
  }
}

void validate(const TrainConfig& config) {
  if (config.epochs < 1) throw ConfigError(fmt::format("epochs must be at least 1, got {}", config.epochs));
  if (!(config.optimizer.learning_rate > 0.0)) {
    throw ConfigError(fmt::format("learning rate must be positive, got {}", config.optimizer.learning_rate));
  }
  if (config.optimizer.weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  validate(config.loss);
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["epochs"] = c.epochs;
  j["optimizer"] = to_string(c.optimizer.kind);
  j["learning_rate"] = c.optimizer.learning_rate;
  j["weight_decay"] = c.optimizer.weight_decay;
  j["beta1"] = c.optimizer.beta1;
  j["beta2"] = c.optimizer.beta2;
  j["epsilon"] = c.optimizer.epsilon;
  j["momentum"] = c.optimizer.momentum;
  j["seed"] = c.seed;
  j["known_batch_size"] = c.batches.known_batch_size;
  j["pseudo_open_per_source_domain"] = c.batches.pseudo_open_per_source_domain;
  j["pseudo_open_in_addition"] = c.batches.pseudo_open_in_addition;
  j["temperature"] = c.loss.temperature;
  j["stop_align_grad"] = c.loss.stop_align_grad;
  return j;
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["context_length"] = c.context_length;
  j["learnable_tokens"] = c.learnable_tokens;
  j["visual_prompt_tokens"] = c.visual_prompt_tokens;
  j["projector_hidden"] = c.projector_hidden;
  j["attention_dim"] = c.attention_dim;
  j["attributes_per_class"] = c.attributes_per_class;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.context_length = j.value("context_length", c.context_length);
  c.learnable_tokens = j.value("learnable_tokens", c.learnable_tokens);
  c.visual_prompt_tokens = j.value("visual_prompt_tokens", c.visual_prompt_tokens);
  c.projector_hidden = j.value("projector_hidden", c.projector_hidden);
  c.attention_dim = j.value("attention_dim", c.attention_dim);
  c.attributes_per_class = j.value("attributes_per_class", c.attributes_per_class);
  return c;
}

std::string config_hash(const nlohmann::ordered_json& j) { return fmt::format("{:016x}", fnv1a(j.dump())); }

TrainState initial_state(const PromptTask& task, const TrainConfig& config) {
  return TrainState{PromptModel::init(task.backbone(), task.classes(), task.config(), mix_seed(config.seed, 0x30de1)),
                    Optimizer(config.optimizer), 0, 0};
}

std::vector<EpochSummary> train(const PromptTask& task, const TrainConfig& config,
                                const std::vector<LabeledItem>& augmented, TrainState& state, const RunInfo& info) {
  validate(config);
  const int n_sources = static_cast<int>(task.sources().size());
  validate(config.batches, n_sources);
  if (state.epochs_completed > config.epochs) {
    throw ConfigError(fmt::format("state has {} epochs, more than the configured {}", state.epochs_completed,
                                  config.epochs));
  }

  std::ofstream log;
  if (!config.log_path.empty()) {
    if (config.log_path.has_parent_path()) std::filesystem::create_directories(config.log_path.parent_path());
    log.open(config.log_path, state.step > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw InputError(fmt::format("cannot open training log '{}'", config.log_path.string()));
  }

  std::vector<EpochSummary> summaries;
  for (int epoch = state.epochs_completed + 1; epoch <= config.epochs; ++epoch) {
    BatchStream stream(make_batches(augmented, config.batches, n_sources, task.unknown_label(),
                                    mix_seed(config.seed, static_cast<std::uint64_t>(epoch))));
    EpochSummary summary{epoch, 0, {}};
    while (auto batch = stream.next()) {
      TrainState snapshot{state.model, state.optimizer, state.epochs_completed, state.step};
      state.model.zero_grad();
      const LossValues v = loss_and_grad(task, state.model, batch->items, config.loss);
      const bool finite_loss = all_finite(v);
      if (finite_loss) state.optimizer.step(state.model.parameters());
      if (!finite_loss || !all_finite(state.model)) {
        if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, task, snapshot, config, info);
        throw TrainingDiverged(fmt::format("training diverged at epoch {} step {} (l_total = {})", epoch,
                                           state.step + 1, v.total),
                               std::move(snapshot));
      }
      ++state.step;
      ++summary.steps;
      summary.mean.dom_spec += v.dom_spec;
      summary.mean.align += v.align;
      summary.mean.dom_gen += v.dom_gen;
      summary.mean.total += v.total;
      if (log.is_open()) write_step_log(log, state.step, epoch, batch->items.size(), v);
    }
    const double n = std::max(1, summary.steps);
    summary.mean.dom_spec /= n;
    summary.mean.align /= n;
    summary.mean.dom_gen /= n;
    summary.mean.total /= n;
    state.epochs_completed = epoch;
    spdlog::info("epoch {}/{}: l_total {:.4f} (dom_spec {:.4f}, align {:.4f}, dom_gen {:.4f})", epoch, config.epochs,
                 summary.mean.total, summary.mean.dom_spec, summary.mean.align, summary.mean.dom_gen);
    summaries.push_back(summary);
  }
  if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, task, state, config, info);
  return summaries;
}

void save_checkpoint(const std::filesystem::path& path, const PromptTask& task, const TrainState& state,
                     const TrainConfig& config, const RunInfo& info) {
  NamedArrays out;
  for (const Parameter* p : state.model.parameters()) out.arrays["param/" + p->name] = p->value;
  state.optimizer.save_state(out);
  out.metadata["schema"] = kCheckpointSchema;
  out.metadata["config_hash"] = info.config_hash;
  out.metadata["dataset"] = info.dataset;
  out.metadata["target_domain"] = info.target_domain;
  out.metadata["classes"] = nlohmann::json(task.classes()).dump();
  out.metadata["model_config"] = to_json(task.config()).dump();
  out.metadata["train_config"] = to_json(config).dump();
  out.metadata["backbone.identifier"] = task.backbone().config().identifier;
  out.metadata["backbone.fingerprint"] = backbone_fingerprint(task.backbone());
  out.metadata["epoch"] = std::to_string(state.epochs_completed);
  out.metadata["step"] = std::to_string(state.step);
  // Batch order of epoch e is drawn from mix_seed(rng.seed, e); nothing else is random after init.
  out.metadata["rng.seed"] = std::to_string(config.seed);
  out.metadata["rng.next_epoch"] = std::to_string(state.epochs_completed + 1);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write-then-rename so a crash never leaves a truncated checkpoint behind.
  auto tmp = path;
  tmp += ".tmp";
  save_named_arrays(tmp, out);
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const Backbone& backbone,
                                 const OptimizerConfig& optimizer) {
  if (!std::filesystem::exists(path)) throw InputError(fmt::format("checkpoint '{}' does not exist", path.string()));
  const NamedArrays in = load_named_arrays(path);
  const std::string schema = meta_or_throw(in, "schema");
  if (schema != kCheckpointSchema) {
    throw SchemaError(fmt::format("checkpoint schema '{}' is not supported (expected {})", schema, kCheckpointSchema));
  }
  if (meta_or_throw(in, "backbone.fingerprint") != backbone_fingerprint(backbone)) {
    throw SchemaError(fmt::format("checkpoint was trained on backbone '{}' with different weights",
                                  meta_or_throw(in, "backbone.identifier")));
  }
  LoadedCheckpoint out{TrainState{PromptModel{}, Optimizer(optimizer), 0, 0}, {}, {}, {}, in.metadata};
  try {
    out.classes = nlohmann::json::parse(meta_or_throw(in, "classes")).get<std::vector<std::string>>();
    out.model_config = model_config_from_json(nlohmann::json::parse(meta_or_throw(in, "model_config")));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("checkpoint metadata is malformed: {}", e.what()));
  }
  out.info = {meta_or_throw(in, "dataset"), meta_or_throw(in, "target_domain"), meta_or_throw(in, "config_hash")};
  out.state.epochs_completed = parse_number<int>(meta_or_throw(in, "epoch"), "epoch");
  out.state.step = parse_number<std::int64_t>(meta_or_throw(in, "step"), "step");

  out.state.model = PromptModel::init(backbone, out.classes, out.model_config, 0);
  for (Parameter* p : out.state.model.parameters()) {
    auto it = in.arrays.find("param/" + p->name);
    if (it == in.arrays.end()) throw SchemaError(fmt::format("checkpoint lacks parameter '{}'", p->name));
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
      throw SchemaError(fmt::format("parameter '{}' is {}x{}, the model expects {}x{}", p->name, it->second.rows(),
                                    it->second.cols(), p->value.rows(), p->value.cols()));
    }
    p->value = it->second;
    p->zero_grad();
  }
  size_t expected = out.state.model.parameters().size();
  size_t stored = 0;
  for (const auto& [name, m] : in.arrays) stored += name.rfind("param/", 0) == 0;
  if (stored != expected) {
    throw SchemaError(fmt::format("checkpoint holds {} parameter arrays, the model has {}", stored, expected));
  }
  out.state.optimizer.load_state(in, out.state.model.parameters());
  return out;
}

std::vector<EpochSummary> resume(const std::filesystem::path& checkpoint, const PromptTask& task,
                                 const TrainConfig& config, const std::vector<LabeledItem>& augmented,
                                 const RunInfo& info, TrainState* final_state) {
  LoadedCheckpoint loaded = load_checkpoint(checkpoint, task.backbone(), config.optimizer);
  if (loaded.info.dataset != info.dataset || loaded.info.target_domain != info.target_domain) {
    throw ConfigError(fmt::format("checkpoint is for {}/{}, the run is {}/{}", loaded.info.dataset,
                                  loaded.info.target_domain, info.dataset, info.target_domain));
  }
  if (loaded.classes != task.classes()) throw ConfigError("checkpoint class list differs from the task's");
  auto summaries = train(task, config, augmented, loaded.state, info);
  if (final_state != nullptr) *final_state = std::move(loaded.state);
  return summaries;
}

}  // namespace oslo
