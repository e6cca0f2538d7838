#pragma once

// Training loop over the augmented few-shot set: one forward per batch for all
// three objectives, then an optimizer step on the prompt parameter groups.
// The backbone is never written to.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oslo/data.hpp"
#include "oslo/losses.hpp"
#include "oslo/model.hpp"
#include "oslo/tensor_file.hpp"

namespace oslo {

enum class OptimizerKind { AdamW, Sgd };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdamW;
  double learning_rate = 2e-3;
  double weight_decay = 0.01;  // decoupled for AdamW, L2 for SGD
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;  // SGD only
};

// Per-parameter moment buffers keyed by parameter name.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  // Applies one update from each parameter's accumulated grad.
  void step(const std::vector<Parameter*>& params);
  std::int64_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

  // Arrays "optimizer/<param>/m" (and "/v" for AdamW) plus metadata
  // "optimizer.steps" and "optimizer.kind".
  void save_state(NamedArrays& out) const;
  // Throws SchemaError when the kind differs or a buffer has the wrong shape.
  void load_state(const NamedArrays& in, const std::vector<Parameter*>& params);

 private:
  OptimizerConfig config_;
  std::int64_t steps_ = 0;
  std::map<std::string, Matrix> first_;
  std::map<std::string, Matrix> second_;
};

struct TrainConfig {
  int epochs = 10;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  BatchPlan batches;
  LossConfig loss;
  std::filesystem::path checkpoint_path;  // empty: nothing written
  std::filesystem::path log_path;         // empty: no step log
};

void validate(const TrainConfig& config);
nlohmann::ordered_json to_json(const TrainConfig& config);
nlohmann::ordered_json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
// Hex FNV-1a of the compact JSON dump.
std::string config_hash(const nlohmann::ordered_json& j);

// Identity of a run, stored in every checkpoint.
struct RunInfo {
  std::string dataset;
  std::string target_domain;
  std::string config_hash;
};

struct TrainState {
  PromptModel model;
  Optimizer optimizer;
  int epochs_completed = 0;
  std::int64_t step = 0;
};

TrainState initial_state(const PromptTask& task, const TrainConfig& config);

struct EpochSummary {
  int epoch = 0;  // 1-based
  int steps = 0;
  LossValues mean;
};

// Raised on a non-finite loss or parameter. `last_finite` holds the state
// before the offending step; it has also been written to the checkpoint path
// when one is configured.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, TrainState last_finite)
      : std::runtime_error(what), last_finite(std::move(last_finite)) {}
  TrainState last_finite;
};

// Runs epochs state.epochs_completed + 1 .. config.epochs. Epoch e draws its
// batches from mix_seed(config.seed, e), so a resumed run replays the same
// batches as an uninterrupted one. Appends to the step log when resuming.
std::vector<EpochSummary> train(const PromptTask& task, const TrainConfig& config,
                                const std::vector<LabeledItem>& augmented, TrainState& state, const RunInfo& info);

inline constexpr const char* kCheckpointSchema = "oslo-checkpoint/1";

void save_checkpoint(const std::filesystem::path& path, const PromptTask& task, const TrainState& state,
                     const TrainConfig& config, const RunInfo& info);

struct LoadedCheckpoint {
  TrainState state;
  RunInfo info;
  std::vector<std::string> classes;
  ModelConfig model_config;
  std::map<std::string, std::string> metadata;
};

// Rebuilds the prompt model against `backbone`. Throws SchemaError on a
// schema mismatch, missing or misshapen arrays, or a backbone identifier
// other than the one recorded. The optimizer uses `optimizer` with the stored
// moments.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const Backbone& backbone,
                                 const OptimizerConfig& optimizer = {});

// Continues training from a checkpoint. Throws ConfigError when the
// checkpoint was made for another dataset or target.
std::vector<EpochSummary> resume(const std::filesystem::path& checkpoint, const PromptTask& task,
                                 const TrainConfig& config, const std::vector<LabeledItem>& augmented,
                                 const RunInfo& info, TrainState* final_state = nullptr);

}  // namespace oslo
