// Drives the built command-line tool end to end on the synthetic dataset, plus
// the config and output helpers behind it.

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "oslo/errors.hpp"
#include "oslo/pipeline.hpp"
#include "oslo/synthesis.hpp"
#include "oslo/tensor_file.hpp"

namespace fs = std::filesystem;
using namespace oslo;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "oslo_test_cli";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome run_cli(const std::string& args) {
  const fs::path log = kRoot / "last_cli_output.txt";
  fs::create_directories(kRoot);
  const std::string cmd = fmt::format("{} {} > {} 2>&1", OSLO_CLI_PATH, args, log.string());
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

std::vector<std::vector<std::string>> read_tsv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, '\t');) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

// Renders the synthetic dataset once and writes a config pointing at it.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    const auto r = run_cli(fmt::format("make-synthetic --output {} --per-class 4 --size 16 --seed 3",
                                       (kRoot / "shapes").string()));
    ASSERT_EQ(r.code, 0) << r.output;
  }

  // A config for `name`, with its own output directory and manifest.
  static fs::path write_config(const std::string& name, const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json j = {
        {"dataset", "synthetic_shapes"},
        {"data_root", (kRoot / "shapes").string()},
        {"target_domain", "dotted"},
        {"k", 1},
        {"seeds", {0}},
        {"backbone", {{"kind", "tiny"}, {"seed", 0}}},
        {"attributes", "data/attributes/synthetic_shapes.jsonl"},
        {"synthesis",
         {{"mode", "manifest"},
          {"manifest", (kRoot / name / "pseudo_open" / "manifest.jsonl").string()},
          {"llm_replay", "data/fixtures/synthetic_llm_replay.json"},
          {"image_source", "renderer"},
          {"images_per_name", 2}}},
        {"train", {{"epochs", 2}}},
        {"output", (kRoot / name).string()},
    };
    j.merge_patch(extra);
    const fs::path p = kRoot / (name + ".json");
    std::ofstream(p) << j.dump(2);
    return p;
  }
};

}  // namespace

TEST(RunConfigFile, UnknownKeysAndWrongTypesAreRejected) {
  EXPECT_THROW(run_config_from_json({{"dataset", "pacs"}, {"epochz", 3}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"train", {{"epochz", 3}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"k", "one"}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"seeds", {-1}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"train", {{"optimizer", "lbfgs"}}}}), ConfigError);
  const RunConfig c = run_config_from_json({{"train", {{"optimizer", "sgd"}, {"learning_rate", 0.5}}}});
  EXPECT_EQ(c.train.optimizer.kind, OptimizerKind::Sgd);
  EXPECT_EQ(c.train.optimizer.learning_rate, 0.5);
}

TEST(RunConfigFile, DottedOverridesReachNestedKeys) {
  const fs::path p = kRoot / "override.json";
  fs::create_directories(kRoot);
  std::ofstream(p) << R"({"dataset": "pacs", "train": {"epochs": 3}})";
  const RunConfig c = load_run_config(
      p, {"train.epochs=7", "backbone.d_joint=8", "target_domain=sketch", "seeds=[1,2,3]", "eval.openness_ratios=[0.5]"});
  EXPECT_EQ(c.train.epochs, 7);
  EXPECT_EQ(c.backbone.config.dims.d_joint, 8);
  EXPECT_EQ(c.target_domain, "sketch");
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(c.eval.openness_ratios, std::vector<double>{0.5});
  EXPECT_THROW(load_run_config(p, {"train.epochz=7"}), ConfigError);
  EXPECT_THROW(load_run_config(p, {"no_equals_sign"}), ConfigError);
  EXPECT_THROW(load_run_config(p, {"dataset.name=x"}), ConfigError);
  EXPECT_THROW(load_run_config(kRoot / "absent.json"), ConfigError);
}

TEST(RunConfigFile, RoundTripsThroughJson) {
  RunConfig c;
  c.dataset = "vlcs";
  c.seeds = {4, 5};
  c.train.epochs = 3;
  c.synthesis.llm.retry.max_attempts = 9;
  c.eval.openness_ratios = {0.25, 1.0};
  const RunConfig back = run_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(Targets, AllEnumeratesEveryRegisteredDomain) {
  RunConfig c;
  c.dataset = "pacs";
  c.target_domain = "all";
  EXPECT_EQ(resolve_targets(c), dataset_info("pacs").domains);
  EXPECT_EQ(resolve_targets(c).size(), 4u);
  c.target_domain = "SKETCH";
  EXPECT_EQ(resolve_targets(c), std::vector<std::string>{"sketch"});
  c.target_domain = "moon";
  EXPECT_THROW(resolve_targets(c), ConfigError);
}

TEST(Lock, SecondHolderIsRefusedUntilRelease) {
  const fs::path dir = kRoot / "lock";
  fs::remove_all(dir);
  {
    OutputLock first(dir);
    EXPECT_THROW(OutputLock second(dir), ConfigError);
  }
  EXPECT_NO_THROW(OutputLock again(dir));
  EXPECT_FALSE(fs::exists(dir / ".lock"));
}

TEST(Summary, SeedRowsMeanRowsAndAverage) {
  auto result = [](const std::string& target, std::uint64_t seed, int correct) {
    RunResult r;
    r.target = target;
    r.seed = seed;
    r.report = report_from_predictions({"a", "unknown"}, std::vector<int>{0, 0, 0, 0, 1, 1},
                                       std::vector<int>{correct > 0 ? 0 : 1, correct > 1 ? 0 : 1, 1, 1, 1, 0});
    return r;
  };
  const fs::path p = kRoot / "summary_unit" / "summary.tsv";
  write_summary(p, {result("art", 0, 1), result("art", 1, 2), result("art", 2, 2)});
  auto rows = read_tsv(p);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"target", "seed", "closed_acc", "novel_acc", "h_score"}));
  EXPECT_EQ(rows[4][1], "mean");
  EXPECT_NEAR(std::stod(rows[4][2]), (0.25 + 0.5 + 0.5) / 3.0, 1e-6);

  write_summary(p, {result("art", 0, 1), result("photo", 0, 2)});
  rows = read_tsv(p);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[5][0], "average");
  EXPECT_NEAR(std::stod(rows[5][2]), 0.375, 1e-6);
}

TEST_F(CliTest, UserErrorsExitWithOne) {
  EXPECT_EQ(run_cli("").code, 1);
  EXPECT_EQ(run_cli("train --config /nonexistent.json").code, 1);
  const fs::path cfg = write_config("errors");
  auto r = run_cli(fmt::format("train --config {} --override train.epochz=3", cfg.string()));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("train.epochz"), std::string::npos) << r.output;
  r = run_cli(fmt::format("eval --config {}", cfg.string()));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("checkpoint"), std::string::npos) << r.output;
  r = run_cli(fmt::format("synthesize --config {} --offline --override synthesis.mode=live", cfg.string()));
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(kRoot / "errors")) << "validation must precede side effects";
}

TEST_F(CliTest, MissingCredentialNamesTheVariable) {
  const fs::path cfg = write_config("live", {{"synthesis", {{"mode", "live"}, {"llm", {{"credential_env", "OSLO_TEST_NO_SUCH_KEY"}}}}}});
  const auto r = run_cli(fmt::format("synthesize --config {}", cfg.string()));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("OSLO_TEST_NO_SUCH_KEY"), std::string::npos) << r.output;
}

TEST_F(CliTest, OfflinePipelineFromFixtures) {
  const fs::path cfg = write_config("pipeline", {{"eval", {{"openness_ratios", {0.0, 0.25}}}}});
  const fs::path out = kRoot / "pipeline";

  auto r = run_cli(fmt::format("synthesize --config {} --offline", cfg.string()));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("network calls: 0"), std::string::npos) << r.output;
  const PseudoOpenManifest manifest = load_manifest(out / "pseudo_open" / "manifest.jsonl");
  // Two names (Ring, Diamond) x four styles x two images, all above the entropy floor.
  EXPECT_EQ(manifest.records.size(), 16u);
  EXPECT_NE(r.output.find("kept 16, entropy-filtered 0"), std::string::npos) << r.output;
  for (const auto& rec : manifest.records) {
    EXPECT_GT(rec.entropy, kEntropyThreshold);
    EXPECT_TRUE(fs::exists(out / "pseudo_open" / rec.image_path)) << rec.image_path;
  }
  const std::string manifest_bytes = slurp(out / "pseudo_open" / "manifest.jsonl");
  r = run_cli(fmt::format("synthesize --config {} --offline", cfg.string()));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(slurp(out / "pseudo_open" / "manifest.jsonl"), manifest_bytes);

  r = run_cli(fmt::format("train --config {} --offline", cfg.string()));
  ASSERT_EQ(r.code, 0) << r.output;
  const fs::path run_dir = out / "dotted" / "seed_0";
  for (const char* f : {"checkpoint.oslo", "train_log.jsonl", "eval.json", "openness.tsv"}) {
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  }
  const NamedArrays ckpt = load_named_arrays(run_dir / "checkpoint.oslo");
  EXPECT_EQ(ckpt.metadata.at("config_hash").size(), 16u);
  EXPECT_EQ(ckpt.metadata.at("dataset"), "synthetic_shapes");
  EXPECT_EQ(ckpt.metadata.at("target_domain"), "dotted");

  const std::string report = slurp(run_dir / "eval.json");
  r = run_cli(fmt::format("eval --config {} --offline", cfg.string()));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(slurp(run_dir / "eval.json"), report);

  r = run_cli(fmt::format("sweep --config {} --offline", cfg.string()));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_tsv(run_dir / "openness.tsv").size(), 3u);

  fs::remove(out / "summary.tsv");
  r = run_cli(fmt::format("report --config {}", cfg.string()));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_tsv(out / "summary.tsv").size(), 3u);
  EXPECT_FALSE(fs::exists(out / ".lock"));
}

TEST_F(CliTest, RerunWithSameSeedsIsBitwiseIdentical) {
  const fs::path cfg = write_config("repeat");
  const fs::path run_dir = kRoot / "repeat" / "dotted" / "seed_0";
  std::string ckpt[2], report[2];
  for (int i = 0; i < 2; ++i) {
    fs::remove_all(kRoot / "repeat");
    ASSERT_EQ(run_cli(fmt::format("synthesize --config {} --offline", cfg.string())).code, 0);
    const auto r = run_cli(fmt::format("train --config {} --offline", cfg.string()));
    ASSERT_EQ(r.code, 0) << r.output;
    ckpt[i] = slurp(run_dir / "checkpoint.oslo");
    report[i] = slurp(run_dir / "eval.json");
  }
  EXPECT_FALSE(ckpt[0].empty());
  EXPECT_EQ(ckpt[0], ckpt[1]);
  EXPECT_EQ(report[0], report[1]);
}

TEST_F(CliTest, ThreeSeedsGiveThreeRowsAndAMean) {
  const fs::path cfg = write_config("seeds", {{"seeds", {0, 1, 2}}, {"train", {{"epochs", 1}}}});
  ASSERT_EQ(run_cli(fmt::format("synthesize --config {} --offline", cfg.string())).code, 0);
  const auto r = run_cli(fmt::format("train --config {} --offline", cfg.string()));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = read_tsv(kRoot / "seeds" / "summary.tsv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[1][1], "0");
  EXPECT_EQ(rows[3][1], "2");
  EXPECT_EQ(rows[4][1], "mean");
  // Each seed's checkpoint carries its own hash.
  const auto h0 = load_named_arrays(kRoot / "seeds" / "dotted" / "seed_0" / "checkpoint.oslo").metadata.at("config_hash");
  const auto h1 = load_named_arrays(kRoot / "seeds" / "dotted" / "seed_1" / "checkpoint.oslo").metadata.at("config_hash");
  EXPECT_NE(h0, h1);
}

TEST_F(CliTest, LeaveOneOutOverEveryDomain) {
  const fs::path cfg = write_config("all", {{"target_domain", "all"}, {"train", {{"epochs", 1}}}});
  ASSERT_EQ(run_cli(fmt::format("synthesize --config {} --offline", cfg.string())).code, 0);
  const auto r = run_cli(fmt::format("train --config {} --offline", cfg.string()));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto& domains = dataset_info("synthetic_shapes").domains;
  for (const auto& d : domains) EXPECT_TRUE(fs::exists(kRoot / "all" / d / "seed_0" / "eval.json")) << d;
  const auto rows = read_tsv(kRoot / "all" / "summary.tsv");
  // header + (seed row + mean row) per domain + average.
  ASSERT_EQ(rows.size(), 1 + 2 * domains.size() + 1);
  EXPECT_EQ(rows.back()[0], "average");
}

TEST_F(CliTest, EvalRefusesACheckpointForAnotherTarget) {
  const fs::path cfg = write_config("mismatch");
  ASSERT_EQ(run_cli(fmt::format("synthesize --config {} --offline", cfg.string())).code, 0);
  ASSERT_EQ(run_cli(fmt::format("train --config {} --offline", cfg.string())).code, 0);
  const fs::path ckpt = kRoot / "mismatch" / "dotted" / "seed_0" / "checkpoint.oslo";
  const auto r = run_cli(
      fmt::format("eval --config {} --override target_domain=flat --checkpoint {}", cfg.string(), ckpt.string()));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("dotted"), std::string::npos) << r.output;
}

TEST_F(CliTest, DivergenceExitsWithTwo) {
  const fs::path cfg = write_config("diverge", {{"train", {{"learning_rate", 1e300}}}});
  ASSERT_EQ(run_cli(fmt::format("synthesize --config {} --offline", cfg.string())).code, 0);
  const auto r = run_cli(fmt::format("train --config {} --offline", cfg.string()));
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("diverged"), std::string::npos) << r.output;
}

TEST_F(CliTest, MixupModeNeedsNoManifest) {
  const fs::path cfg = write_config("mixup", {{"synthesis", {{"mode", "mixup"}}}});
  const auto r = run_cli(fmt::format("train --config {} --offline", cfg.string()));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(kRoot / "mixup" / "dotted" / "seed_0" / "eval.json"));
}
