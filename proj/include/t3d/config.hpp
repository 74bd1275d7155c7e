// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document with the sections
//   paths     corpus_dir, output_dir, prompt_file
//   data      volume_dims, crop_dims, max_tokens
//   model     backbone and text encoder sizes
//   train     optimizer, schedule, temperatures, seed and runtime knobs
//   ablation  gca_weight, tma_weight, views, fusion_layers, text_informing
//   eval      probe and retrieval settings
// Every key is optional; missing keys keep their defaults and unknown keys are
// rejected. Overrides use `section.key=value` or a bare key when exactly one
// section defines it.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "t3d/encoders.hpp"
#include "t3d/error.hpp"
#include "t3d/optim.hpp"
#include "t3d/rng.hpp"
#include "t3d/volume.hpp"

namespace t3d {

using nlohmann::json;

struct PathsConfig {
  std::string corpus_dir = "corpus";
  std::string output_dir = "runs/toy";
  std::string prompt_file;
};

struct DataConfig {
  Index3 volume_dims{32, 32, 16};
  Index3 crop_dims{16, 16, 8};
  std::size_t max_tokens = 32;
};

struct ArchConfig {
  std::vector<std::size_t> channels{8, 16, 32};
  std::vector<std::size_t> blocks{0, 1, 1};
  std::size_t norm_groups = 4;
  std::size_t d_r = 64;
  std::size_t text_layers = 2;
  std::size_t text_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t fusion_heads = 4;
  std::size_t d_shared = 768;
};

struct TrainConfig {
  double base_lr = 1e-3;
  std::size_t warmup_epochs = 5;
  std::size_t total_epochs = 50;
  std::size_t batch_size = 16;
  double tau = 0.07;
  double tau_tma = 0.07;
  std::uint64_t seed = 0;
  bool freeze_text = false;
  bool symmetric_gca = false;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;
  // runtime only: not part of the fingerprint
  std::size_t max_steps = 0;         // stop early after this many total steps; 0 = no limit
  std::size_t checkpoint_every = 0;  // periodic checkpoint interval in steps; 0 = none
  bool record_wall_time = true;      // false writes wall_ms = 0 so logs are byte-reproducible
};

struct AblationConfig {
  double gca_weight = 1.0;
  double tma_weight = 1.0;
  std::size_t views = 3;
  std::size_t fusion_layers = 1;
  bool text_informing = true;
};

struct EvalConfig {
  std::string split = "test";
  std::vector<std::size_t> ks{1, 5, 10};
  std::string negative_template = "no {}";
  std::size_t probe_steps = 300;
  double probe_lr = 0.05;
  std::uint64_t probe_seed = 0;
};

struct RunConfig {
  PathsConfig paths;
  DataConfig data;
  ArchConfig model;
  TrainConfig train;
  AblationConfig ablation;
  EvalConfig eval;

  /// Calls f(section, key, field) for every field in document order.
  template <class Self, class F>
  static void visit(Self& c, F&& f) {
    f("paths", "corpus_dir", c.paths.corpus_dir);
    f("paths", "output_dir", c.paths.output_dir);
    f("paths", "prompt_file", c.paths.prompt_file);
    f("data", "volume_dims", c.data.volume_dims);
    f("data", "crop_dims", c.data.crop_dims);
    f("data", "max_tokens", c.data.max_tokens);
    f("model", "channels", c.model.channels);
    f("model", "blocks", c.model.blocks);
    f("model", "norm_groups", c.model.norm_groups);
    f("model", "d_r", c.model.d_r);
    f("model", "text_layers", c.model.text_layers);
    f("model", "text_heads", c.model.text_heads);
    f("model", "ffn_mult", c.model.ffn_mult);
    f("model", "fusion_heads", c.model.fusion_heads);
    f("model", "d_shared", c.model.d_shared);
    f("train", "base_lr", c.train.base_lr);
    f("train", "warmup_epochs", c.train.warmup_epochs);
    f("train", "total_epochs", c.train.total_epochs);
    f("train", "batch_size", c.train.batch_size);
    f("train", "tau", c.train.tau);
    f("train", "tau_tma", c.train.tau_tma);
    f("train", "seed", c.train.seed);
    f("train", "freeze_text", c.train.freeze_text);
    f("train", "symmetric_gca", c.train.symmetric_gca);
    f("train", "weight_decay", c.train.weight_decay);
    f("train", "beta1", c.train.beta1);
    f("train", "beta2", c.train.beta2);
    f("train", "eps", c.train.eps);
    f("train", "clip_norm", c.train.clip_norm);
    f("train", "max_steps", c.train.max_steps);
    f("train", "checkpoint_every", c.train.checkpoint_every);
    f("train", "record_wall_time", c.train.record_wall_time);
    f("ablation", "gca_weight", c.ablation.gca_weight);
    f("ablation", "tma_weight", c.ablation.tma_weight);
    f("ablation", "views", c.ablation.views);
    f("ablation", "fusion_layers", c.ablation.fusion_layers);
    f("ablation", "text_informing", c.ablation.text_informing);
    f("eval", "split", c.eval.split);
    f("eval", "ks", c.eval.ks);
    f("eval", "negative_template", c.eval.negative_template);
    f("eval", "probe_steps", c.eval.probe_steps);
    f("eval", "probe_lr", c.eval.probe_lr);
    f("eval", "probe_seed", c.eval.probe_seed);
  }

  void validate() const;
  ModelConfig model_config(std::size_t vocab_size) const;
  Schedule schedule(std::size_t steps_per_epoch) const {
    return {train.base_lr, train.warmup_epochs * steps_per_epoch, train.total_epochs * steps_per_epoch};
  }
  AdamWConfig adamw() const { return {train.beta1, train.beta2, train.eps, train.weight_decay}; }
};

namespace detail {

inline std::string dotted(const char* section, const char* key) { return std::string(section) + "." + key; }

inline void read_field(const json& j, const std::string& name, std::string& out) {
  require(j.is_string(), Errc::config, name + " must be a string");
  out = j.get<std::string>();
}
inline void read_field(const json& j, const std::string& name, double& out) {
  require(j.is_number(), Errc::config, name + " must be a number");
  out = j.get<double>();
  require(std::isfinite(out), Errc::config, name + " must be finite");
}
inline void read_field(const json& j, const std::string& name, bool& out) {
  require(j.is_boolean(), Errc::config, name + " must be true or false");
  out = j.get<bool>();
}
inline void read_field(const json& j, const std::string& name, std::size_t& out) {
  require(j.is_number_unsigned() || (j.is_number_integer() && j.get<std::int64_t>() >= 0), Errc::config,
          name + " must be a non-negative integer");
  out = j.get<std::size_t>();
}
inline void read_field(const json& j, const std::string& name, std::vector<std::size_t>& out) {
  require(j.is_array(), Errc::config, name + " must be an array of non-negative integers");
  out.clear();
  for (const auto& e : j) {
    std::size_t v = 0;
    read_field(e, name, v);
    out.push_back(v);
  }
}
inline void read_field(const json& j, const std::string& name, Index3& out) {
  std::vector<std::size_t> v;
  read_field(j, name, v);
  require(v.size() == 3, Errc::config, name + " must have exactly three entries");
  out = {v[0], v[1], v[2]};
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json j = json::object();
  RunConfig::visit(c, [&](const char* s, const char* k, const auto& v) { j[s][k] = v; });
  return j;
}

inline RunConfig run_config_from_json(const json& j) {
  require(j.is_object(), Errc::config, "config must be a JSON object");
  RunConfig c;
  std::set<std::string> known_sections, known_keys;
  RunConfig::visit(c, [&](const char* s, const char* k, auto&) {
    known_sections.insert(s);
    known_keys.insert(detail::dotted(s, k));
  });
  for (const auto& [sec, body] : j.items()) {
    require(known_sections.count(sec) == 1, Errc::config, "unknown config key '" + sec + "'");
    require(body.is_object(), Errc::config, "config section '" + sec + "' must be an object");
    for (const auto& [key, _] : body.items())
      require(known_keys.count(sec + "." + key) == 1, Errc::config, "unknown config key '" + sec + "." + key + "'");
  }
  RunConfig::visit(c, [&](const char* s, const char* k, auto& field) {
    if (j.contains(s) && j[s].contains(k)) detail::read_field(j[s][k], detail::dotted(s, k), field);
  });
  c.validate();
  return c;
}

inline void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, Errc::config, msg); };
  for (std::size_t a = 0; a < 3; ++a) {
    check(data.volume_dims[a] >= 1, "data.volume_dims entries must be positive");
    check(data.crop_dims[a] >= 1, "data.crop_dims entries must be positive");
    check(data.crop_dims[a] <= data.volume_dims[a], "data.crop_dims must fit inside data.volume_dims");
  }
  check(data.max_tokens >= 1, "data.max_tokens must be positive");
  check(train.base_lr > 0, "train.base_lr must be positive");
  check(train.total_epochs == 0 || train.warmup_epochs < train.total_epochs,
        "train.warmup_epochs must be smaller than train.total_epochs");
  check(train.batch_size >= 1, "train.batch_size must be positive");
  check(train.tau > 0 && train.tau_tma > 0, "temperatures must be positive");
  check(train.weight_decay >= 0, "train.weight_decay must be non-negative");
  check(train.beta1 >= 0 && train.beta1 < 1 && train.beta2 >= 0 && train.beta2 < 1, "train.beta1/beta2 must lie in [0, 1)");
  check(train.eps > 0, "train.eps must be positive");
  check(train.clip_norm >= 0, "train.clip_norm must be non-negative");
  check(ablation.gca_weight >= 0 && ablation.tma_weight >= 0, "loss weights must be non-negative");
  check(ablation.gca_weight > 0 || ablation.tma_weight > 0, "at least one loss weight must be positive");
  check(ablation.tma_weight == 0 || train.batch_size >= 2,
        "train.batch_size must be at least 2 when the multi-view loss is on");
  check(ablation.views >= 1, "ablation.views must be at least 1");
  check(ablation.fusion_layers >= 1, "ablation.fusion_layers must be at least 1");
  check(eval.split == "train" || eval.split == "val" || eval.split == "test", "eval.split must be train, val or test");
  check(!eval.ks.empty(), "eval.ks must not be empty");
  for (std::size_t k : eval.ks) check(k >= 1, "eval.ks entries must be positive");
  check(eval.negative_template.find("{}") != std::string::npos, "eval.negative_template must contain {}");
  check(eval.probe_lr > 0, "eval.probe_lr must be positive");
  model_config(3).validate();
}

inline ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
  ModelConfig m;
  m.channels = model.channels;
  m.blocks = model.blocks;
  m.norm_groups = model.norm_groups;
  m.vocab_size = vocab_size;
  m.max_tokens = data.max_tokens;
  m.d_r = model.d_r;
  m.text_layers = model.text_layers;
  m.text_heads = model.text_heads;
  m.ffn_mult = model.ffn_mult;
  m.fusion_layers = ablation.fusion_layers;
  m.fusion_heads = model.fusion_heads;
  m.text_informing = ablation.text_informing;
  m.d_shared = model.d_shared;
  m.cluster_slots = train.batch_size;
  m.init_seed = child_seed(train.seed, "init");
  return m;
}

inline json to_json(const ModelConfig& m) {
  return {{"channels", m.channels},         {"blocks", m.blocks},
          {"norm_groups", m.norm_groups},   {"vocab_size", m.vocab_size},
          {"max_tokens", m.max_tokens},     {"d_r", m.d_r},
          {"text_layers", m.text_layers},   {"text_heads", m.text_heads},
          {"ffn_mult", m.ffn_mult},         {"fusion_layers", m.fusion_layers},
          {"fusion_heads", m.fusion_heads}, {"text_informing", m.text_informing},
          {"d_shared", m.d_shared},         {"cluster_slots", m.cluster_slots},
          {"init_seed", m.init_seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  try {
    m.channels = j.at("channels").get<std::vector<std::size_t>>();
    m.blocks = j.at("blocks").get<std::vector<std::size_t>>();
    m.norm_groups = j.at("norm_groups").get<std::size_t>();
    m.vocab_size = j.at("vocab_size").get<std::size_t>();
    m.max_tokens = j.at("max_tokens").get<std::size_t>();
    m.d_r = j.at("d_r").get<std::size_t>();
    m.text_layers = j.at("text_layers").get<std::size_t>();
    m.text_heads = j.at("text_heads").get<std::size_t>();
    m.ffn_mult = j.at("ffn_mult").get<std::size_t>();
    m.fusion_layers = j.at("fusion_layers").get<std::size_t>();
    m.fusion_heads = j.at("fusion_heads").get<std::size_t>();
    m.text_informing = j.at("text_informing").get<bool>();
    m.d_shared = j.at("d_shared").get<std::size_t>();
    m.cluster_slots = j.at("cluster_slots").get<std::size_t>();
    m.init_seed = j.at("init_seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(Errc::format, std::string("model config: ") + e.what());
  }
  return m;
}

/// Hash of every field that shapes the trajectory; paths, evaluation settings and
/// runtime knobs excluded.
inline std::string fingerprint(const RunConfig& c) {
  json j = to_json(c);
  j.erase("paths");
  j.erase("eval");
  j["train"].erase("max_steps");
  j["train"].erase("checkpoint_every");
  j["train"].erase("record_wall_time");
  return hex64(fnv1a64(j.dump()));
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), Errc::config, "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    fail(Errc::config, "config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// Applies one `key=value` override. The value is read as JSON when it parses,
/// otherwise as a bare string.
inline RunConfig apply_override(const RunConfig& base, const std::string& kv) {
  const auto eq = kv.find('=');
  require(eq != std::string::npos && eq > 0, Errc::config, "override '" + kv + "' is not of the form key=value");
  std::string key = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  std::string section;
  if (const auto dot = key.find('.'); dot != std::string::npos) {
    section = key.substr(0, dot);
    key = key.substr(dot + 1);
  } else {
    std::vector<std::string> owners;
    RunConfig::visit(base, [&](const char* s, const char* k, const auto&) {
      if (key == k) owners.emplace_back(s);
    });
    require(!owners.empty(), Errc::config, "unknown config key '" + key + "'");
    require(owners.size() == 1, Errc::config, "config key '" + key + "' is ambiguous; qualify it with a section");
    section = owners.front();
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json j = to_json(base);
  require(j.contains(section) && j[section].contains(key), Errc::config,
          "unknown config key '" + section + "." + key + "'");
  j[section][key] = value;
  return run_config_from_json(j);
}

}  // namespace t3d
