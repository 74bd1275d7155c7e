// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0
//
// t3d: corpus synthesis, pretraining, evaluation and ablations.
//
// Exit codes: 0 success, 1 other failure, 2 config/usage error, 3 I/O or file
// format error, 4 diverged run, 5 checkpoint fingerprint or architecture mismatch.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "t3d/t3d.hpp"

namespace {

enum Exit : int { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kDiverged = 4, kMismatch = 5 };

int exit_code(t3d::Errc c) {
  using t3d::Errc;
  switch (c) {
    case Errc::config:
    case Errc::spec:
    case Errc::prompt:
    case Errc::vocab:
    case Errc::crop_too_large:
      return kConfig;
    case Errc::io:
    case Errc::format:
      return kIo;
    case Errc::diverged:
      return kDiverged;
    case Errc::refuse_to_resume:
      return kMismatch;
    default:
      return kOther;
  }
}

t3d::RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  t3d::RunConfig cfg = t3d::load_run_config(path);
  for (const auto& kv : overrides) cfg = t3d::apply_override(cfg, kv);
  return cfg;
}

t3d::Corpus open_corpus(const t3d::RunConfig& cfg) {
  return t3d::load_corpus(cfg.paths.corpus_dir, cfg.data.volume_dims, cfg.data.max_tokens, t3d::env_workers());
}

std::optional<t3d::PromptSet> prompts_for(const t3d::RunConfig& cfg) {
  if (cfg.paths.prompt_file.empty()) return std::nullopt;
  return t3d::load_prompts(cfg.paths.prompt_file);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  t3d::detail::write_file_atomic(path, j.dump(2) + "\n");
}

int cmd_synth(const std::string& spec_path, const std::string& out, std::size_t n, std::uint64_t seed) {
  t3d::PhantomSpec spec = t3d::PhantomSpec::standard();
  if (!spec_path.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(t3d::detail::read_file(spec_path));
    } catch (const nlohmann::json::exception& e) {
      throw t3d::Error(t3d::Errc::spec, spec_path + ": " + e.what());
    } catch (const t3d::Error& e) {
      throw t3d::Error(t3d::Errc::config, e.what());
    }
    spec = t3d::phantom_spec_from_json(j);
  }
  const auto records = t3d::synthesize_corpus(spec, out, n, seed, t3d::env_workers());
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& r : records) ++counts[static_cast<int>(r.split)];
  std::printf("synth: %zu samples in %s (train %zu, val %zu, test %zu)\n", records.size(), out.c_str(), counts[0],
              counts[1], counts[2]);
  return kOk;
}

int cmd_pretrain(const t3d::RunConfig& cfg, const std::string& resume) {
  const auto corpus = open_corpus(cfg);
  std::optional<std::filesystem::path> from;
  if (!resume.empty()) from = resume;
  const auto res = t3d::run_pretraining(cfg, corpus, from);
  if (res.history.empty()) {
    std::printf("pretrain: no steps run, checkpoint %s\n", res.final_checkpoint.string().c_str());
  } else {
    const auto& a = res.history.front();
    const auto& b = res.history.back();
    std::printf("pretrain: %zu steps, total %.4f -> %.4f (gca %.4f, tma %.4f), checkpoint %s\n", res.steps_run, a.total,
                b.total, b.gca, b.tma, res.final_checkpoint.string().c_str());
  }
  return kOk;
}

int cmd_eval(const t3d::RunConfig& cfg, const std::string& task, const std::string& checkpoint, std::string out) {
  if (task != "zeroshot" && task != "retrieval" && task != "probe")
    throw t3d::Error(t3d::Errc::config, "unknown task '" + task + "'");
  const auto corpus = open_corpus(cfg);
  const auto prompts = prompts_for(cfg);
  const auto session = t3d::open_checkpoint(cfg, corpus, checkpoint);
  const auto report = t3d::evaluate(task, session, corpus, prompts ? &*prompts : nullptr);
  if (out.empty()) out = (std::filesystem::path(cfg.paths.output_dir) / ("eval_" + task + ".json")).string();
  write_json(out, report);
  if (task == "retrieval") {
    const auto& m = report["metrics"];
    std::printf("retrieval: t2i R@1 %.4f, i2t R@1 %.4f -> %s\n", m["text_to_image"]["R@1"].get<double>(),
                m["image_to_text"]["R@1"].get<double>(), out.c_str());
  } else {
    const auto& auc = report["metrics"]["auc"];
    std::printf("%s: macro AUC %s, ACC %.4f, F1 %.4f -> %s\n", task.c_str(), auc.is_number() ? auc.dump().c_str() : "n/a",
                report["metrics"]["acc"].get<double>(), report["metrics"]["f1"].get<double>(), out.c_str());
  }
  return kOk;
}

int cmd_ablate(const t3d::RunConfig& cfg, const std::string& axis) {
  const auto variants = t3d::ablation_variants(cfg, axis);  // validates the axis before any work
  const auto corpus = open_corpus(cfg);
  const auto prompts = prompts_for(cfg);
  nlohmann::json table;
  table["axis"] = axis;
  table["seed"] = cfg.train.seed;
  table["rows"] = nlohmann::json::array();
  for (const auto& v : variants) {
    std::printf("ablate: running %s\n", v.name.c_str());
    std::fflush(stdout);
    table["rows"].push_back(t3d::run_variant(v, corpus, prompts ? &*prompts : nullptr));
  }
  const auto base = std::filesystem::path(cfg.paths.output_dir) / axis;
  write_json(base / "ablation.json", table);
  const std::string text = t3d::format_ablation(table);
  t3d::detail::write_file_atomic(base / "ablation.txt", text);
  std::fputs(text.c_str(), stdout);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"t3d: volume/report alignment pretraining on synthetic phantoms"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  auto* synth = app.add_subcommand("synth", "Generate a phantom corpus");
  synth->add_option("--spec", spec_path, "Phantom spec JSON (default: built-in standard spec)");
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--n", n, "Number of samples")->required();
  synth->add_option("--seed", seed, "Corpus seed");

  std::string config_path, resume, task, checkpoint, report_path, axis;
  std::vector<std::string> overrides;
  auto* pretrain = app.add_subcommand("pretrain", "Run pretraining");
  pretrain->add_option("--config", config_path, "Run config JSON")->required();
  pretrain->add_option("--override", overrides, "key=value config override (repeatable)");
  pretrain->add_option("--resume", resume, "Continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--task", task, "zeroshot, retrieval or probe")->required();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--config", config_path, "Run config JSON")->required();
  eval->add_option("--override", overrides, "key=value config override (repeatable)");
  eval->add_option("--out", report_path, "Report path (default: <output_dir>/eval_<task>.json)");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation axis");
  ablate->add_option("--config", config_path, "Run config JSON")->required();
  ablate->add_option("--axis", axis, "loss, views, layers or text_informing")->required();
  ablate->add_option("--override", overrides, "key=value config override (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*synth) return cmd_synth(spec_path, out_dir, n, seed);
    const auto cfg = load_config(config_path, overrides);
    if (*pretrain) return cmd_pretrain(cfg, resume);
    if (*eval) return cmd_eval(cfg, task, checkpoint, report_path);
    if (*ablate) return cmd_ablate(cfg, axis);
  } catch (const t3d::Error& e) {
    std::fprintf(stderr, "t3d: %s\n", e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "t3d: %s\n", e.what());
    return kOther;
  }
  return kOther;
}
