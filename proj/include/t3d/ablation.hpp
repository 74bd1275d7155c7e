// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "t3d/config.hpp"
#include "t3d/evaluation.hpp"
#include "t3d/training.hpp"

namespace t3d {

struct AblationVariant {
  std::string name;
  RunConfig config;
};

/// The variants of one ablation axis. All share the base seed; each writes under
/// <output_dir>/<axis>/<name>.
inline std::vector<AblationVariant> ablation_variants(const RunConfig& base, const std::string& axis) {
  std::vector<AblationVariant> out;
  auto add = [&](const std::string& name, auto&& edit) {
    RunConfig c = base;
    edit(c);
    c.paths.output_dir = (std::filesystem::path(base.paths.output_dir) / axis / name).string();
    c.validate();
    out.push_back({name, c});
  };
  if (axis == "loss") {
    add("gca_only", [](RunConfig& c) { c.ablation.gca_weight = 1, c.ablation.tma_weight = 0; });
    add("tma_only", [](RunConfig& c) { c.ablation.gca_weight = 0, c.ablation.tma_weight = 1; });
    add("gca_tma", [](RunConfig& c) { c.ablation.gca_weight = 1, c.ablation.tma_weight = 1; });
  } else if (axis == "views") {
    for (std::size_t m = 1; m <= 4; ++m) add("views_" + std::to_string(m), [m](RunConfig& c) { c.ablation.views = m; });
  } else if (axis == "layers") {
    for (std::size_t l = 1; l <= 3; ++l)
      add("layers_" + std::to_string(l), [l](RunConfig& c) { c.ablation.fusion_layers = l; });
  } else if (axis == "text_informing") {
    add("text_informing_off", [](RunConfig& c) { c.ablation.text_informing = false; });
    add("text_informing_on", [](RunConfig& c) { c.ablation.text_informing = true; });
  } else {
    fail(Errc::config, "unknown ablation axis '" + axis + "' (expected loss, views, layers or text_informing)");
  }
  return out;
}

/// Pretrains one variant and scores its final checkpoint on all three tasks.
inline nlohmann::json run_variant(const AblationVariant& v, const Corpus& corpus, const PromptSet* prompts = nullptr) {
  const auto res = run_pretraining(v.config, corpus);
  const auto session = open_checkpoint(v.config, corpus, res.final_checkpoint);
  const auto retrieval = evaluate("retrieval", session, corpus);
  const auto zeroshot = evaluate("zeroshot", session, corpus, prompts);
  const auto probe = evaluate("probe", session, corpus);
  nlohmann::json row;
  row["variant"] = v.name;
  row["checkpoint"] = res.final_checkpoint.string();
  row["steps"] = res.steps_run;
  row["retrieval_r1_t2i"] = retrieval["metrics"]["text_to_image"]["R@1"];
  row["retrieval_r1_i2t"] = retrieval["metrics"]["image_to_text"]["R@1"];
  row["zeroshot_auc"] = zeroshot["metrics"]["auc"];
  row["probe_auc"] = probe["metrics"]["auc"];
  return row;
}

inline nlohmann::json run_ablation(const RunConfig& base, const std::string& axis, const Corpus& corpus,
                                   const PromptSet* prompts = nullptr) {
  nlohmann::json table;
  table["axis"] = axis;
  table["seed"] = base.train.seed;
  table["rows"] = nlohmann::json::array();
  for (const auto& v : ablation_variants(base, axis)) table["rows"].push_back(run_variant(v, corpus, prompts));
  return table;
}

inline std::string format_ablation(const nlohmann::json& table) {
  std::ostringstream os;
  auto cell = [](const nlohmann::json& v) {
    char buf[32];
    if (v.is_number()) std::snprintf(buf, sizeof(buf), "%10.4f", v.get<double>());
    else std::snprintf(buf, sizeof(buf), "%10s", "n/a");
    return std::string(buf);
  };
  char head[160];
  std::snprintf(head, sizeof(head), "%-20s %10s %10s %10s %10s\n", "variant", "R@1 t2i", "R@1 i2t", "zs AUC", "probe AUC");
  os << "ablation axis: " << table["axis"].get<std::string>() << "\n" << head;
  for (const auto& r : table["rows"]) {
    char name[32];
    std::snprintf(name, sizeof(name), "%-20s", r["variant"].get<std::string>().c_str());
    os << name << " " << cell(r["retrieval_r1_t2i"]) << " " << cell(r["retrieval_r1_i2t"]) << " " << cell(r["zeroshot_auc"])
       << " " << cell(r["probe_auc"]) << "\n";
  }
  return os.str();
}

}  // namespace t3d
