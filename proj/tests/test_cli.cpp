// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "t3d/t3d.hpp"
#include "test_util.hpp"

namespace t3d {
namespace {

namespace fs = std::filesystem;
using testutil::TempDir;

struct CliResult {
  int code = -1;
  std::string output;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

CliResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path log = scratch / "cli_output.txt";
  const std::string cmd = quote(T3D_CLI_PATH) + " " + args + " > " + quote(log.string()) + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = detail::read_file(log);
  return r;
}

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << s;
}

std::string tree_bytes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + detail::read_file(f);
  return all;
}

/// A corpus plus a tiny config written to disk, shared by the suite.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const fs::path spec = dir_->path() / "spec.json";
    PhantomSpec s = PhantomSpec::standard();
    s.grid_dims = {16, 16, 8};
    write_text(spec, json(s).dump());
    const CliResult r = run_cli("synth --spec " + quote(spec.string()) + " --out " + quote(corpus().string()) +
                              " --n 40 --seed 5",
                          dir_->path());
    ASSERT_EQ(r.code, 0) << r.output;
    RunConfig c = testutil::tiny_config(corpus(), dir_->path() / "run");
    c.train.max_steps = 3;
    write_text(config(), to_json(c).dump(2));
  }
  static void TearDownTestSuite() { delete dir_; }

  static fs::path corpus() { return dir_->path() / "corpus"; }
  static fs::path config() { return dir_->path() / "config.json"; }
  static fs::path scratch() { return dir_->path(); }

  static TempDir* dir_;
};

TempDir* Cli::dir_ = nullptr;

TEST_F(Cli, SynthEmptyCorpus) {
  const fs::path out = scratch() / "empty";
  const CliResult r = run_cli("synth --out " + quote(out.string()) + " --n 0 --seed 1", scratch());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(out / "manifest.jsonl"));
  EXPECT_EQ(fs::file_size(out / "manifest.jsonl"), 0u);
}

TEST_F(Cli, SynthIsByteIdenticalForSameSeed) {
  const fs::path a = scratch() / "same_a", b = scratch() / "same_b";
  ASSERT_EQ(run_cli("synth --out " + quote(a.string()) + " --n 12 --seed 3", scratch()).code, 0);
  ASSERT_EQ(run_cli("synth --out " + quote(b.string()) + " --n 12 --seed 3", scratch()).code, 0);
  EXPECT_EQ(tree_bytes(a), tree_bytes(b));
}

TEST_F(Cli, SynthSplitsHundredSamples) {
  const fs::path out = scratch() / "hundred";
  const CliResult r = run_cli("synth --out " + quote(out.string()) + " --n 100 --seed 0", scratch());
  ASSERT_EQ(r.code, 0) << r.output;
  std::map<Split, int> counts;
  for (const auto& rec : read_manifest(out / "manifest.jsonl")) ++counts[rec.split];
  EXPECT_EQ(counts[Split::train], 80);
  EXPECT_EQ(counts[Split::val], 10);
  EXPECT_EQ(counts[Split::test], 10);
}

TEST_F(Cli, SynthRejectsBadSpec) {
  const fs::path spec = scratch() / "bad_spec.json";
  write_text(spec, R"({"noise": 0.9})");
  EXPECT_EQ(run_cli("synth --spec " + quote(spec.string()) + " --out " + quote((scratch() / "x").string()) + " --n 2",
                    scratch())
                .code,
            2);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run_cli("", scratch()).code, 2);
  EXPECT_EQ(run_cli("frobnicate", scratch()).code, 2);
  EXPECT_EQ(run_cli("pretrain", scratch()).code, 2);
  EXPECT_EQ(run_cli("--help", scratch()).code, 0);
}

TEST_F(Cli, PretrainMissingConfig) {
  const CliResult r = run_cli("pretrain --config " + quote((scratch() / "nope.json").string()), scratch());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("nope.json"), std::string::npos);
}

TEST_F(Cli, PretrainUnknownKeyIsNamed) {
  const CliResult r = run_cli("pretrain --config " + quote(config().string()) + " --override train.learning_rate=1",
                        scratch());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("train.learning_rate"), std::string::npos) << r.output;
  const fs::path bad = scratch() / "bad_key.json";
  json j = json::parse(detail::read_file(config()));
  j["model"]["depth"] = 3;
  write_text(bad, j.dump());
  const CliResult r2 = run_cli("pretrain --config " + quote(bad.string()), scratch());
  EXPECT_EQ(r2.code, 2);
  EXPECT_NE(r2.output.find("model.depth"), std::string::npos) << r2.output;
}

TEST_F(Cli, PretrainOverrideDisablesMultiViewLoss) {
  const fs::path out = scratch() / "run_gca";
  const CliResult r = run_cli("pretrain --config " + quote(config().string()) + " --override tma_weight=0 --override " +
                            quote("output_dir=" + out.string()),
                        scratch());
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream in(out / "metrics.jsonl");
  std::size_t n = 0;
  for (std::string line; std::getline(in, line); ++n) EXPECT_EQ(json::parse(line)["tma"].get<double>(), 0.0);
  EXPECT_EQ(n, 3u);
}

TEST_F(Cli, PretrainMissingCorpusIsIoError) {
  const CliResult r = run_cli("pretrain --config " + quote(config().string()) + " --override " +
                            quote("corpus_dir=" + (scratch() / "no_corpus").string()),
                        scratch());
  EXPECT_EQ(r.code, 3) << r.output;
}

TEST_F(Cli, PretrainDivergedRun) {
  const fs::path out = scratch() / "run_diverge";
  const CliResult r = run_cli("pretrain --config " + quote(config().string()) + " --override base_lr=1e30 --override " +
                            quote("output_dir=" + out.string()) + " --override warmup_epochs=0 --override clip_norm=0",
                        scratch());
  EXPECT_EQ(r.code, 4) << r.output;
}

class CliEval : public Cli {
 protected:
  static fs::path checkpoint() { return scratch() / "run" / "final.t3dc"; }
  void SetUp() override {
    if (!fs::exists(checkpoint())) {
      const CliResult r = run_cli("pretrain --config " + quote(config().string()), scratch());
      ASSERT_EQ(r.code, 0) << r.output;
    }
  }
  CliResult eval(const std::string& task, const fs::path& out, const std::string& extra = "") {
    return run_cli("eval --task " + task + " --checkpoint " + quote(checkpoint().string()) + " --config " +
                       quote(config().string()) + " --out " + quote(out.string()) + " " + extra,
                   scratch());
  }
};

TEST_F(CliEval, ProbeAndZeroShotShareHash) {
  const fs::path zs = scratch() / "zs.json", pr = scratch() / "pr.json";
  const CliResult a = eval("zeroshot", zs), b = eval("probe", pr);
  ASSERT_EQ(a.code, 0) << a.output;
  ASSERT_EQ(b.code, 0) << b.output;
  const auto ja = json::parse(detail::read_file(zs)), jb = json::parse(detail::read_file(pr));
  EXPECT_EQ(ja["checkpoint_hash"], jb["checkpoint_hash"]);
  EXPECT_FALSE(ja["checkpoint_hash"].get<std::string>().empty());
}

TEST_F(CliEval, RetrievalReportAndDeterminism) {
  const fs::path a = scratch() / "ret_a.json", b = scratch() / "ret_b.json";
  ASSERT_EQ(eval("retrieval", a).code, 0);
  ASSERT_EQ(eval("retrieval", b).code, 0);
  const auto j = json::parse(detail::read_file(a));
  for (const char* dir : {"image_to_text", "text_to_image"})
    for (const char* k : {"R@1", "R@5", "R@10"}) EXPECT_TRUE(j["metrics"][dir].contains(k));
  EXPECT_EQ(detail::read_file(a), detail::read_file(b));
}

TEST_F(CliEval, DefaultReportPath) {
  const CliResult r = run_cli("eval --task retrieval --checkpoint " + quote(checkpoint().string()) + " --config " +
                            quote(config().string()),
                        scratch());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(scratch() / "run" / "eval_retrieval.json"));
}

TEST_F(CliEval, EmptyPromptFile) {
  const fs::path prompts = scratch() / "empty_prompts.json";
  write_text(prompts, "{}");
  const CliResult r = eval("zeroshot", scratch() / "zs_empty.json", "--override " + quote("prompt_file=" + prompts.string()));
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(CliEval, FingerprintMismatch) {
  const CliResult r = eval("retrieval", scratch() / "mismatch.json", "--override seed=9");
  EXPECT_EQ(r.code, 5) << r.output;
  const CliResult r2 = eval("retrieval", scratch() / "mismatch.json", "--override d_shared=32");
  EXPECT_EQ(r2.code, 5) << r2.output;
}

TEST_F(CliEval, ResumeMismatch) {
  const CliResult r = run_cli("pretrain --config " + quote(config().string()) + " --override tau=0.2 --resume " +
                            quote(checkpoint().string()) + " --override " +
                            quote("output_dir=" + (scratch() / "resume_bad").string()),
                        scratch());
  EXPECT_EQ(r.code, 5) << r.output;
}

TEST_F(CliEval, BadTaskAndCorruptCheckpoint) {
  EXPECT_EQ(eval("segmentation", scratch() / "x.json").code, 2);
  const fs::path bad = scratch() / "corrupt.t3dc";
  write_text(bad, "not a checkpoint");
  const CliResult r = run_cli("eval --task retrieval --checkpoint " + quote(bad.string()) + " --config " +
                            quote(config().string()),
                        scratch());
  EXPECT_EQ(r.code, 3) << r.output;
}

TEST_F(Cli, AblateUnknownAxis) {
  const CliResult r = run_cli("ablate --config " + quote(config().string()) + " --axis depth", scratch());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("depth"), std::string::npos);
}

TEST_F(Cli, AblateLossAxis) {
  const fs::path out = scratch() / "ablate";
  const CliResult r = run_cli("ablate --config " + quote(config().string()) + " --axis loss --override " +
                            quote("output_dir=" + out.string()) + " --override max_steps=2",
                        scratch());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto table = json::parse(detail::read_file(out / "loss" / "ablation.json"));
  ASSERT_EQ(table["rows"].size(), 3u);
  std::vector<std::string> names;
  for (const auto& row : table["rows"]) names.push_back(row["variant"]);
  EXPECT_EQ(names, (std::vector<std::string>{"gca_only", "tma_only", "gca_tma"}));
  EXPECT_TRUE(fs::exists(out / "loss" / "ablation.txt"));
  for (const auto& n : names) EXPECT_TRUE(fs::exists(out / "loss" / n / "final.t3dc")) << n;
}

TEST(CliConfigs, ShippedConfigsParse) {
  const fs::path root(T3D_SOURCE_DIR);
  for (const auto& e : fs::directory_iterator(root / "config")) {
    if (e.path().extension() != ".json" || e.path().filename().string().find("phantom") != std::string::npos) continue;
    EXPECT_NO_THROW(load_run_config(e.path())) << e.path();
  }
  EXPECT_NO_THROW(phantom_spec_from_json(json::parse(detail::read_file(root / "config" / "phantom_spec.json"))));
}

}  // namespace
}  // namespace t3d
