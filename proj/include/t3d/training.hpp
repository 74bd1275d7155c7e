// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pretraining loop.
//
// Batching is slot-stable: at the start of a run the training samples are
// permuted once and sample k is bound to cluster slot k mod B for the whole run.
// Every epoch shuffles each slot's members independently and batch b takes the
// b-th member of every slot, so the multi-view target of a sample is a fixed
// label and the persistent cluster head can learn it. An epoch has floor(N / B)
// steps; the members a slot cannot place that epoch are skipped.
//
// All randomness is derived from the run seed: the slot permutation and the epoch
// orders from keyed child seeds, the per-step crop seeds from the state generator.
// A checkpoint therefore captures everything needed to continue bit-identically.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "t3d/checkpoint.hpp"
#include "t3d/config.hpp"
#include "t3d/corpus.hpp"
#include "t3d/model.hpp"
#include "t3d/objective.hpp"
#include "t3d/optim.hpp"
#include "t3d/rng.hpp"

namespace t3d {

/// Fixed slot assignment plus per-epoch member order.
class SlotSampler {
 public:
  SlotSampler() = default;
  SlotSampler(std::vector<std::size_t> samples, std::size_t batch, std::uint64_t seed)
      : groups_(batch), seed_(seed) {
    require(batch >= 1, Errc::config, "batch size must be positive");
    Rng rng(child_seed(seed, "slots"));
    std::shuffle(samples.begin(), samples.end(), rng);
    for (std::size_t k = 0; k < samples.size(); ++k) groups_[k % batch].push_back(samples[k]);
    steps_ = samples.size() / batch;
  }

  std::size_t steps_per_epoch() const { return steps_; }
  std::size_t batch_size() const { return groups_.size(); }
  const std::vector<std::vector<std::size_t>>& slots() const { return groups_; }

  /// Sample indices of every batch in `epoch`, slot order within each batch.
  std::vector<std::vector<std::size_t>> epoch_plan(std::size_t epoch) const {
    Rng rng(child_seed(child_seed(seed_, "epoch"), epoch));
    auto groups = groups_;
    for (auto& g : groups) std::shuffle(g.begin(), g.end(), rng);
    std::vector<std::vector<std::size_t>> plan(steps_);
    for (std::size_t b = 0; b < steps_; ++b)
      for (const auto& g : groups) plan[b].push_back(g[b]);
    return plan;
  }

 private:
  std::vector<std::vector<std::size_t>> groups_;
  std::uint64_t seed_ = 0;
  std::size_t steps_ = 0;
};

struct TrainState {
  RunConfig config;
  std::string fingerprint;
  std::unique_ptr<T3DModel<float>> model;
  AdamW<float> optimizer;
  Schedule schedule;
  std::size_t step = 0;
  std::size_t epoch = 0;
  Rng rng;

  TrainState(const RunConfig& cfg, std::size_t vocab_size, std::size_t steps_per_epoch)
      : config(cfg),
        fingerprint(t3d::fingerprint(cfg)),
        model(std::make_unique<T3DModel<float>>(cfg.model_config(vocab_size))),
        optimizer(model->params(), cfg.adamw()),
        schedule(cfg.schedule(steps_per_epoch)),
        rng(child_seed(cfg.train.seed, "steps")) {
    model->freeze_text(cfg.train.freeze_text);
  }

  LossOptions loss_options() const {
    return {config.train.tau, config.train.tau_tma, config.ablation.gca_weight, config.ablation.tma_weight,
            config.train.symmetric_gca};
  }
};

/// Forward, backward, clip, update at lr_at(step). A non-finite loss or a collapsed
/// embedding aborts the step before any parameter changes.
inline LossBreakdown train_step(TrainState& s, const Batch& batch) {
  auto& ps = s.model->params();
  ps.zero_grad();
  Objective<float> obj;
  try {
    obj = total_loss(*s.model, batch, s.loss_options());
  } catch (const Error& e) {
    // embeddings that cannot be normalized only arise from blown-up weights here
    if (e.code() != Errc::degenerate_norm) throw;
    throw DivergedError(static_cast<std::int64_t>(s.step), e.what());
  }
  const auto& lb = obj.breakdown;
  if (!std::isfinite(lb.gca) || !std::isfinite(lb.tma) || !std::isfinite(lb.total))
    throw DivergedError(static_cast<std::int64_t>(s.step), "non-finite loss");
  ag::backward(obj.root);
  clip_grad_norm(ps, s.config.train.clip_norm);
  s.optimizer.step(ps, lr_at(s.step, s.schedule));
  ++s.step;
  return lb;
}

/// Cuts M views from each sample's volume with a generator keyed by (step seed, sample).
inline Batch assemble_batch(const Corpus& corpus, const std::vector<std::size_t>& samples, std::size_t views,
                            const Index3& crop_dims, std::uint64_t step_seed) {
  Batch b;
  b.views_per_sample = views;
  for (std::size_t idx : samples) {
    b.volumes.push_back(&corpus.volumes[idx]);
    b.tokens.push_back(&corpus.tokens[idx]);
    Rng rng(child_seed(step_seed, idx));
    for (auto& v : make_views(corpus.volumes[idx], views, crop_dims, rng)) b.views.push_back(std::move(v));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline CheckpointData capture(const TrainState& s) {
  CheckpointData ck;
  ck.meta["config"] = to_json(s.config);
  ck.meta["model"] = to_json(s.model->config());
  ck.meta["fingerprint"] = s.fingerprint;
  ck.meta["step"] = s.step;
  ck.meta["epoch"] = s.epoch;
  ck.meta["optimizer_steps"] = s.optimizer.steps();
  ck.meta["rng"] = rng_state(s.rng);
  const auto& params = s.model->params().all();
  for (const auto& p : params) ck.tensors.emplace_back("param/" + p.name, p.value());
  for (std::size_t k = 0; k < params.size(); ++k)
    ck.tensors.emplace_back("adam_m/" + params[k].name, Tensor<float>(params[k].value().shape, s.optimizer.first_moments()[k]));
  for (std::size_t k = 0; k < params.size(); ++k)
    ck.tensors.emplace_back("adam_v/" + params[k].name, Tensor<float>(params[k].value().shape, s.optimizer.second_moments()[k]));
  return ck;
}

inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path) { write_checkpoint(capture(s), path); }

/// Model configuration stored in a checkpoint.
inline ModelConfig checkpoint_model_config(const CheckpointData& ck) {
  require(ck.meta.contains("model"), Errc::format, "checkpoint model: missing");
  return model_config_from_json(ck.meta["model"]);
}

/// Copies parameters from a checkpoint; every stored shape must match the model.
template <class T>
void load_parameters(T3DModel<T>& model, const CheckpointData& ck) {
  for (auto& p : model.params().all()) {
    const auto& t = ck.tensor("param/" + p.name);
    require(t.shape == p.value().shape, Errc::format,
            "checkpoint tensor '" + p.name + "' has shape " + to_string(t.shape) + ", model expects " +
                to_string(p.value().shape));
    p.value() = t.template cast<T>();
  }
}

/// Overwrites a freshly built state with a checkpoint taken under the same config.
inline void restore(TrainState& s, const CheckpointData& ck) {
  const auto stored = ck.meta.value("fingerprint", std::string());
  require(stored == s.fingerprint, Errc::refuse_to_resume,
          "checkpoint fingerprint " + stored + " does not match the run config " + s.fingerprint);
  require(checkpoint_model_config(ck) == s.model->config(), Errc::refuse_to_resume,
          "checkpoint architecture differs from the run config");
  load_parameters(*s.model, ck);
  auto& params = s.model->params().all();
  for (std::size_t k = 0; k < params.size(); ++k) {
    s.optimizer.first_moments()[k] = ck.tensor("adam_m/" + params[k].name).data;
    s.optimizer.second_moments()[k] = ck.tensor("adam_v/" + params[k].name).data;
  }
  try {
    s.step = ck.meta.at("step").get<std::size_t>();
    s.epoch = ck.meta.at("epoch").get<std::size_t>();
    s.optimizer.set_steps(ck.meta.at("optimizer_steps").get<std::size_t>());
    rng_restore(s.rng, ck.meta.at("rng").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format, std::string("checkpoint counters: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Trainer

class Trainer {
 public:
  Trainer(const RunConfig& cfg, const Corpus& corpus)
      : corpus_(corpus),
        sampler_(corpus.indices(Split::train), cfg.train.batch_size, cfg.train.seed),
        state_(cfg, corpus.vocab.size(), sampler_.steps_per_epoch()) {
    require(sampler_.steps_per_epoch() >= 1, Errc::config,
            "training split has " + std::to_string(corpus.indices(Split::train).size()) +
                " samples, fewer than one batch of " + std::to_string(cfg.train.batch_size));
  }

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  const SlotSampler& sampler() const { return sampler_; }
  std::size_t steps_per_epoch() const { return sampler_.steps_per_epoch(); }
  std::size_t total_steps() const { return state_.schedule.total_steps; }

  /// Sample indices of the batch at a global step.
  std::vector<std::size_t> batch_samples(std::size_t step) const {
    const std::size_t spe = steps_per_epoch();
    return sampler_.epoch_plan(step / spe)[step % spe];
  }

  Batch batch_at(std::size_t step, std::uint64_t step_seed) const {
    return assemble_batch(corpus_, batch_samples(step), state_.config.ablation.views, state_.config.data.crop_dims,
                          step_seed);
  }

  /// Runs the next step of the schedule.
  LossBreakdown step() {
    const std::uint64_t seed = state_.rng();
    Batch batch = batch_at(state_.step, seed);
    const auto lb = train_step(state_, batch);
    state_.epoch = state_.step / steps_per_epoch();
    return lb;
  }

 private:
  const Corpus& corpus_;
  SlotSampler sampler_;
  TrainState state_;
};

struct PretrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_log;
  std::size_t steps_run = 0;
  std::vector<LossBreakdown> history;
};

inline std::string checkpoint_name(std::size_t step) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "checkpoint_step%06zu.t3dc", step);
  return buf;
}

/// Trains on the corpus' train split. Writes metrics.jsonl and checkpoints under
/// paths.output_dir. A fresh run first saves its initial state; the end state is
/// saved as final.t3dc. With `resume`, training continues from that checkpoint
/// and the metrics log is appended to.
inline PretrainResult run_pretraining(const RunConfig& cfg, const Corpus& corpus,
                                      const std::optional<std::filesystem::path>& resume = std::nullopt) {
  namespace fs = std::filesystem;
  const fs::path out_dir(cfg.paths.output_dir);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require(!ec, Errc::io, "cannot create " + out_dir.string() + ": " + ec.message());

  Trainer trainer(cfg, corpus);
  PretrainResult res;
  res.metrics_log = out_dir / "metrics.jsonl";
  if (resume) restore(trainer.state(), read_checkpoint(*resume));

  std::ofstream log(res.metrics_log, resume ? std::ios::app : std::ios::trunc);
  require(log.good(), Errc::io, "cannot open " + res.metrics_log.string());

  auto& st = trainer.state();
  const std::size_t total = trainer.total_steps();
  if (!resume) {
    res.final_checkpoint = out_dir / checkpoint_name(0);
    save_checkpoint(st, res.final_checkpoint);
    if (total == 0) return res;
  }
  const std::size_t stop = cfg.train.max_steps > 0 ? std::min(total, cfg.train.max_steps) : total;
  while (st.step < stop) {
    const std::size_t step = st.step;
    const double lr = lr_at(step, st.schedule);
    const auto t0 = std::chrono::steady_clock::now();
    const auto lb = trainer.step();
    const auto t1 = std::chrono::steady_clock::now();
    const double wall =
        cfg.train.record_wall_time ? std::chrono::duration<double, std::milli>(t1 - t0).count() : 0.0;
    nlohmann::ordered_json rec;
    rec["step"] = step;
    rec["epoch"] = step / trainer.steps_per_epoch();
    rec["lr"] = lr;
    rec["gca"] = lb.gca;
    rec["tma"] = lb.tma;
    rec["total"] = lb.total;
    rec["wall_ms"] = wall;
    log << rec.dump() << '\n';
    log.flush();
    require(log.good(), Errc::io, "write failure on " + res.metrics_log.string());
    res.history.push_back(lb);
    ++res.steps_run;
    if (cfg.train.checkpoint_every > 0 && st.step % cfg.train.checkpoint_every == 0 && st.step < stop)
      save_checkpoint(st, out_dir / checkpoint_name(st.step));
  }
  res.final_checkpoint = out_dir / "final.t3dc";
  save_checkpoint(st, res.final_checkpoint);
  return res;
}

inline PretrainResult run_pretraining(const RunConfig& cfg,
                                      const std::optional<std::filesystem::path>& resume = std::nullopt) {
  const Corpus corpus = load_corpus(cfg.paths.corpus_dir, cfg.data.volume_dims, cfg.data.max_tokens, env_workers());
  return run_pretraining(cfg, corpus, resume);
}

}  // namespace t3d
