// Command-line entry point: synthesize, train, eval, sweep, report and
// make-synthetic over a JSON run config.
//
// Exit codes: 0 success, 1 user error (bad config, input or file schema),
// 2 runtime failure (service errors, divergence, anything else).

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "oslo/errors.hpp"
#include "oslo/pipeline.hpp"
#include "oslo/synthetic.hpp"

namespace fs = std::filesystem;
using namespace oslo;

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::string output;
  std::optional<std::uint64_t> seed;
  bool offline = false;
  bool quiet = false;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "JSON run config")->required()->check(CLI::ExistingFile);
  app->add_option("--override", f.overrides, "dotted.key=value, repeatable")->take_all();
  app->add_option("--output", f.output, "output directory (overrides the config)");
  app->add_option("--seed", f.seed, "run a single seed instead of the config's list");
  app->add_flag("--offline", f.offline, "refuse any network access");
  app->add_flag("-q,--quiet", f.quiet, "warnings and errors only");
}

RunConfig load(const CommonFlags& f, Command command) {
  RunConfig cfg = load_run_config(f.config, f.overrides);
  if (!f.output.empty()) cfg.output = f.output;
  if (f.seed) cfg.seeds = {*f.seed};
  if (f.offline) cfg.offline = true;
  // Validate everything before the first side effect.
  validate(cfg, command);
  return cfg;
}

void print_result(const RunResult& r) {
  fmt::print("{}\tseed {}\tclosed_acc {:.4f}\tnovel_acc {:.4f}\tH {:.4f}\n", r.target, r.seed, r.report.closed_acc,
             r.report.novel_acc, r.report.h_score);
  if (!r.epochs.empty()) {
    fmt::print("  loss: first epoch {:.6f}, last epoch {:.6f}\n", r.epochs.front().mean.total,
               r.epochs.back().mean.total);
  }
}

int cmd_synthesize(const CommonFlags& f) {
  const RunConfig cfg = load(f, Command::Synthesize);
  OutputLock lock(cfg.output);
  const auto backbone = make_backbone(cfg.backbone);
  const SynthesisSummary s = run_synthesis(cfg, *backbone);
  fmt::print("manifest: {}\n", s.manifest.string());
  fmt::print("names: {}\n", s.names);
  fmt::print("images: requested {}, kept {}, entropy-filtered {}, failed {}\n", s.images.requested, s.images.kept,
             s.images.filtered, s.images.failed);
  fmt::print("network calls: {}\n", s.network_calls);
  return 0;
}

// Runs train or eval over every (target, seed) and writes the summary table.
int cmd_runs(const CommonFlags& f, Command command, bool resume, const std::string& checkpoint, bool need_sweep) {
  RunConfig cfg = load(f, command);
  if (need_sweep && cfg.eval.openness_ratios.empty()) {
    throw ConfigError("sweep needs eval.openness_ratios (set it in the config or with --override)");
  }
  const auto targets = resolve_targets(cfg);
  if (!checkpoint.empty() && (targets.size() != 1 || cfg.seeds.size() != 1)) {
    throw ConfigError("--checkpoint needs a single target domain and a single seed");
  }
  if (command == Command::Eval && checkpoint.empty()) {
    for (const auto& target : targets) {
      for (const auto seed : cfg.seeds) {
        const fs::path p = run_paths(cfg, target, seed).checkpoint;
        if (!fs::exists(p)) throw InputError(fmt::format("no checkpoint at '{}'; run train first", p.string()));
      }
    }
  }
  OutputLock lock(cfg.output);
  const auto backbone = make_backbone(cfg.backbone);
  std::vector<RunResult> results;
  for (const auto& target : targets) {
    for (const auto seed : cfg.seeds) {
      RunResult r = command == Command::Train ? run_train(cfg, *backbone, target, seed, resume)
                                              : run_eval(cfg, *backbone, target, seed, checkpoint);
      print_result(r);
      results.push_back(std::move(r));
    }
  }
  const fs::path summary = cfg.output / "summary.tsv";
  write_summary(summary, results);
  fmt::print("summary: {}\n", summary.string());
  return 0;
}

// Rebuilds summary.tsv from the eval.json files already under the output dir.
int cmd_report(const CommonFlags& f) {
  RunConfig cfg = load_run_config(f.config, f.overrides);
  if (!f.output.empty()) cfg.output = f.output;
  if (f.seed) cfg.seeds = {*f.seed};
  const auto targets = resolve_targets(cfg);
  std::vector<RunResult> results;
  for (const auto& target : targets) {
    for (const auto seed : cfg.seeds) {
      const fs::path p = run_paths(cfg, target, seed).report;
      std::ifstream in(p);
      if (!in) throw InputError(fmt::format("missing evaluation report '{}'", p.string()));
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError(fmt::format("'{}' is not valid JSON: {}", p.string(), e.what()));
      }
      if (!j.contains("report")) throw SchemaError(fmt::format("'{}' has no report", p.string()));
      RunResult r;
      r.target = target;
      r.seed = seed;
      r.report = report_from_json(j["report"]);
      print_result(r);
      results.push_back(std::move(r));
    }
  }
  const fs::path summary = cfg.output / "summary.tsv";
  write_summary(summary, results);
  fmt::print("summary: {}\n", summary.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set domain generalization with prompt learning"};
  app.require_subcommand(1);

  CommonFlags synth_flags, train_flags, eval_flags, sweep_flags, report_flags;
  auto* synth = app.add_subcommand("synthesize", "generate pseudo-open names and images into a manifest");
  add_common(synth, synth_flags);

  auto* train = app.add_subcommand("train", "train and evaluate every (target, seed)");
  add_common(train, train_flags);
  bool resume = false;
  train->add_flag("--resume", resume, "continue from existing checkpoints");

  auto* eval = app.add_subcommand("eval", "evaluate trained checkpoints");
  add_common(eval, eval_flags);
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "explicit checkpoint file")->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep", "evaluate with the openness sweep");
  add_common(sweep, sweep_flags);

  auto* report = app.add_subcommand("report", "rebuild summary.tsv from saved reports");
  add_common(report, report_flags);

  auto* make_synth = app.add_subcommand("make-synthetic", "render the synthetic_shapes dataset");
  std::string synth_root;
  int per_class = 6;
  int size = 16;
  std::uint64_t synth_seed = 0;
  make_synth->add_option("--output", synth_root, "dataset root")->required();
  make_synth->add_option("--per-class", per_class, "images per style and shape")->check(CLI::PositiveNumber);
  make_synth->add_option("--size", size, "image side in pixels")->check(CLI::Range(4, 1024));
  make_synth->add_option("--seed", synth_seed, "render seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  auto quiet_of = [&]() {
    for (const auto* f : {&synth_flags, &train_flags, &eval_flags, &sweep_flags, &report_flags}) {
      if (f->quiet) return true;
    }
    return false;
  };
  spdlog::set_level(quiet_of() ? spdlog::level::warn : spdlog::level::info);

  try {
    if (*synth) return cmd_synthesize(synth_flags);
    if (*train) return cmd_runs(train_flags, Command::Train, resume, {}, false);
    if (*eval) return cmd_runs(eval_flags, Command::Eval, false, checkpoint, false);
    if (*sweep) return cmd_runs(sweep_flags, Command::Eval, false, {}, true);
    if (*report) return cmd_report(report_flags);
    if (*make_synth) {
      write_synthetic_dataset(synth_root, per_class, synth_seed, size);
      fmt::print("wrote synthetic_shapes to {}\n", synth_root);
      return 0;
    }
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return 1;
  } catch (const InputError& e) {
    spdlog::error("input error: {}", e.what());
    return 1;
  } catch (const SchemaError& e) {
    spdlog::error("schema error: {}", e.what());
    return 1;
  } catch (const TrainingDiverged& e) {
    spdlog::error("training diverged: {}", e.what());
    return 2;
  } catch (const ServiceError& e) {
    spdlog::error("service error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 2;
}
