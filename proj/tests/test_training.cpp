// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "t3d/training.hpp"
#include "test_util.hpp"

namespace t3d {
namespace {

namespace fs = std::filesystem;
using testutil::TempDir;

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no t3d::Error thrown";
  return Errc::config;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

TEST(Schedule, WarmupThenCosine) {
  const Schedule s{1e-3, 10, 110};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5, s), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(10, s), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(60, s), 5e-4);
  EXPECT_NEAR(lr_at(110, s), 0.0, 1e-18);
  EXPECT_EQ(lr_at(500, s), 0.0);
  // no jump at the warmup boundary and monotone decay after it
  EXPECT_NEAR(lr_at(9, s), lr_at(10, s), 1e-4 + 1e-12);
  for (std::size_t t = 10; t < 110; ++t) EXPECT_GE(lr_at(t, s), lr_at(t + 1, s));
}

TEST(Schedule, NoWarmup) {
  const Schedule s{0.1, 0, 4};
  EXPECT_DOUBLE_EQ(lr_at(0, s), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(2, s), 0.05);
  EXPECT_NEAR(lr_at(4, s), 0.0, 1e-17);
}

struct Quadratic {
  ParamStore<double> ps;
  ag::Var<double> w, b;
  Quadratic() {
    w = ps.add("w", Tensor<double>({3}, std::vector<double>{4, -2, 1}), true);
    b = ps.add("b", Tensor<double>({2}, std::vector<double>{0.5, -0.5}), false);
  }
  // sum((w - target)^2) + sum(b^2), gradients filled by hand
  void fill_grads(const std::vector<double>& target) {
    w->grad.resize(3);
    b->grad.resize(2);
    for (int i = 0; i < 3; ++i) w->grad[i] = 2 * (w->value.data[i] - target[i]);
    for (int i = 0; i < 2; ++i) b->grad[i] = 2 * b->value.data[i];
  }
};

TEST(AdamW, ConvergesOnQuadratic) {
  Quadratic q;
  AdamW<double> opt(q.ps, {0.9, 0.999, 1e-8, 0.0});
  const std::vector<double> target{1, 2, 3};
  for (int it = 0; it < 3000; ++it) {
    q.fill_grads(target);
    opt.step(q.ps, 0.01);
  }
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(q.w->value.data[i], target[i], 1e-3);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(q.b->value.data[i], 0.0, 1e-3);
  EXPECT_EQ(opt.steps(), 3000u);
}

TEST(AdamW, FirstStepMatchesHandComputation) {
  Quadratic q;
  AdamW<double> opt(q.ps, {0.9, 0.999, 1e-8, 0.1});
  q.fill_grads({0, 0, 0});
  opt.step(q.ps, 0.01);
  // bias-corrected first step moves each weight by lr * sign(g) after decay
  EXPECT_NEAR(q.w->value.data[0], 4 * (1 - 0.001) - 0.01, 1e-9);
  EXPECT_NEAR(q.w->value.data[1], -2 * (1 - 0.001) + 0.01, 1e-9);
  EXPECT_NEAR(q.b->value.data[0], 0.5 - 0.01, 1e-9);  // no decay on b
}

TEST(AdamW, ZeroLearningRateLeavesParametersBitIdentical) {
  T3DModel<float> model(RunConfig{}.model_config(20));
  std::vector<std::vector<float>> before;
  for (const auto& p : model.params().all()) before.push_back(p.value().data);
  AdamW<float> opt(model.params(), {});
  for (auto& p : model.params().all()) p.var->grad.assign(p.var->numel(), 0.37f);
  opt.step(model.params(), 0.0);
  for (std::size_t k = 0; k < before.size(); ++k) EXPECT_EQ(model.params().all()[k].value().data, before[k]);
}

TEST(AdamW, DecayOnlyTouchesDecayParameters) {
  Quadratic q;
  AdamW<double> opt(q.ps, {0.9, 0.999, 1e-8, 0.5});
  q.w->grad.assign(3, 0.0);
  q.b->grad.assign(2, 0.0);
  opt.step(q.ps, 0.1);
  EXPECT_DOUBLE_EQ(q.w->value.data[0], 4 * 0.95);
  EXPECT_EQ(q.b->value.data, (std::vector<double>{0.5, -0.5}));
}

TEST(AdamW, SkipsFrozenAndGradlessParameters) {
  Quadratic q;
  AdamW<double> opt(q.ps, {0.9, 0.999, 1e-8, 0.5});
  q.fill_grads({0, 0, 0});
  q.w->requires_grad = false;
  q.b->grad.clear();
  opt.step(q.ps, 0.1);
  EXPECT_EQ(q.w->value.data, (std::vector<double>{4, -2, 1}));
  EXPECT_EQ(q.b->value.data, (std::vector<double>{0.5, -0.5}));
}

TEST(ClipGradNorm, RescalesAboveThreshold) {
  Quadratic q;
  q.w->grad = {3, 0, 0};
  q.b->grad = {0, 4};
  EXPECT_DOUBLE_EQ(clip_grad_norm(q.ps, 10.0), 5.0);
  EXPECT_EQ(q.w->grad[0], 3.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(q.ps, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(q.w->grad[0], 0.6);
  EXPECT_DOUBLE_EQ(q.b->grad[1], 0.8);
}

// ---------------------------------------------------------------------------
// Batching

TEST(SlotSampler, FixedSlotsAndFullCoverage) {
  std::vector<std::size_t> samples(23);
  std::iota(samples.begin(), samples.end(), 100);
  const SlotSampler s(samples, 4, 9);
  EXPECT_EQ(s.steps_per_epoch(), 5u);
  std::map<std::size_t, std::size_t> slot_of;
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t idx : s.slots()[g]) slot_of[idx] = g;
  EXPECT_EQ(slot_of.size(), 23u);
  for (std::size_t epoch = 0; epoch < 4; ++epoch) {
    const auto plan = s.epoch_plan(epoch);
    ASSERT_EQ(plan.size(), 5u);
    std::set<std::size_t> seen;
    for (const auto& batch : plan) {
      ASSERT_EQ(batch.size(), 4u);
      for (std::size_t b = 0; b < 4; ++b) {
        EXPECT_EQ(slot_of.at(batch[b]), b);
        EXPECT_TRUE(seen.insert(batch[b]).second);
      }
    }
  }
  EXPECT_NE(s.epoch_plan(0), s.epoch_plan(1));
  EXPECT_EQ(s.epoch_plan(3), SlotSampler(samples, 4, 9).epoch_plan(3));
}

// ---------------------------------------------------------------------------
// Checkpoint file format

CheckpointData sample_checkpoint() {
  CheckpointData ck;
  ck.meta["step"] = 7;
  ck.meta["name"] = "x";
  ck.tensors.emplace_back("a", Tensor<float>({2, 3}, std::vector<float>{1, -2, 3.5f, 0, 1e-30f, -0.f}));
  ck.tensors.emplace_back("b", Tensor<float>({1}, std::vector<float>{42}));
  return ck;
}

TEST(CheckpointFormat, RoundTrip) {
  const auto ck = sample_checkpoint();
  const std::string bytes = serialize_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 4), "T3DC");
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.meta, ck.meta);
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.tensor("a").shape, (Shape{2, 3}));
  EXPECT_EQ(std::memcmp(back.tensor("a").data.data(), ck.tensors[0].second.data.data(), 6 * sizeof(float)), 0);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(code_of([&] { back.tensor("missing"); }), Errc::format);
}

TEST(CheckpointFormat, CorruptionIsReported) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(bad_magic); }), Errc::format);
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)); }), Errc::format);
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(bytes.substr(0, 10)); }), Errc::format);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(bad_version); }), Errc::format);
  EXPECT_EQ(code_of([] { read_checkpoint("/nonexistent/ck.t3dc"); }), Errc::io);
}

// ---------------------------------------------------------------------------
// Run configuration

TEST(RunConfig, JsonRoundTripAndStrictKeys) {
  RunConfig c;
  c.train.seed = 11;
  c.model.channels = {4, 8};
  c.model.blocks = {0, 1};
  const auto back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  json j = to_json(c);
  j["train"]["learning_rate"] = 0.1;
  try {
    run_config_from_json(j);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::config);
    EXPECT_NE(std::string(e.what()).find("train.learning_rate"), std::string::npos);
  }
  json wrong_type = to_json(c);
  wrong_type["train"]["batch_size"] = "big";
  EXPECT_EQ(code_of([&] { run_config_from_json(wrong_type); }), Errc::config);
  json partial = json::object();
  partial["train"]["seed"] = 3;
  EXPECT_EQ(run_config_from_json(partial).train.seed, 3u);
}

TEST(RunConfig, Overrides) {
  const RunConfig base;
  EXPECT_EQ(apply_override(base, "tma_weight=0").ablation.tma_weight, 0.0);
  EXPECT_EQ(apply_override(base, "train.seed=5").train.seed, 5u);
  EXPECT_EQ(apply_override(base, "split=val").eval.split, "val");
  EXPECT_EQ(apply_override(base, "data.crop_dims=[8,8,4]").data.crop_dims, (Index3{8, 8, 4}));
  EXPECT_EQ(apply_override(base, "output_dir=runs/x y").paths.output_dir, "runs/x y");
  EXPECT_EQ(code_of([&] { apply_override(base, "nonsense=1"); }), Errc::config);
  EXPECT_EQ(code_of([&] { apply_override(base, "train.nonsense=1"); }), Errc::config);
  EXPECT_EQ(code_of([&] { apply_override(base, "seed"); }), Errc::config);
  EXPECT_EQ(code_of([&] { apply_override(base, "batch_size=-3"); }), Errc::config);
}

TEST(RunConfig, Validation) {
  RunConfig c;
  c.train.warmup_epochs = 50;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::config);
  c = RunConfig{};
  c.ablation.gca_weight = 0;
  c.ablation.tma_weight = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::config);
  c = RunConfig{};
  c.train.batch_size = 1;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::config);
  c.ablation.tma_weight = 0;
  EXPECT_NO_THROW(c.validate());
  c = RunConfig{};
  c.data.crop_dims = {64, 8, 8};
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::config);
  c = RunConfig{};
  c.train.total_epochs = 0;
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, FingerprintCoversTrajectoryOnly) {
  RunConfig a;
  RunConfig b = a;
  b.paths.output_dir = "elsewhere";
  b.train.max_steps = 3;
  b.train.checkpoint_every = 2;
  b.train.record_wall_time = false;
  b.eval.split = "train";
  b.eval.probe_steps = 7;
  EXPECT_EQ(fingerprint(a), fingerprint(b));
  b.train.seed = 1;
  EXPECT_NE(fingerprint(a), fingerprint(b));
  RunConfig c = a;
  c.ablation.tma_weight = 0.5;
  EXPECT_NE(fingerprint(a), fingerprint(c));
}

TEST(RunConfig, MissingFileIsConfigError) {
  EXPECT_EQ(code_of([] { load_run_config("/nonexistent/config.json"); }), Errc::config);
}

// ---------------------------------------------------------------------------
// Pretraining runs

class Pretraining : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("training");
    corpus_ = new Corpus(testutil::tiny_corpus(dir_->path() / "corpus", 40, 3));
  }
  static void TearDownTestSuite() {
    delete corpus_;
    delete dir_;
  }

  RunConfig config(const std::string& run) const {
    return testutil::tiny_config(dir_->path() / "corpus", dir_->path() / "runs" / run);
  }

  static TempDir* dir_;
  static Corpus* corpus_;
};

TempDir* Pretraining::dir_ = nullptr;
Corpus* Pretraining::corpus_ = nullptr;

TEST_F(Pretraining, ZeroEpochsWritesOnlyInitialCheckpoint) {
  RunConfig cfg = config("zero");
  cfg.train.total_epochs = 0;
  cfg.train.warmup_epochs = 0;
  const auto res = run_pretraining(cfg, *corpus_);
  EXPECT_EQ(res.steps_run, 0u);
  const fs::path out(cfg.paths.output_dir);
  EXPECT_TRUE(fs::exists(out / "checkpoint_step000000.t3dc"));
  EXPECT_FALSE(fs::exists(out / "final.t3dc"));
  EXPECT_EQ(fs::file_size(out / "metrics.jsonl"), 0u);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) files += e.is_regular_file();
  EXPECT_EQ(files, 2u);

  // the initial checkpoint holds exactly the freshly initialized model
  const auto ck = read_checkpoint(out / "checkpoint_step000000.t3dc");
  T3DModel<float> fresh(cfg.model_config(corpus_->vocab.size()));
  for (const auto& p : fresh.params().all()) EXPECT_EQ(ck.tensor("param/" + p.name).data, p.value().data);
}

TEST_F(Pretraining, MetricsLogRecords) {
  RunConfig cfg = config("log");
  cfg.train.checkpoint_every = 4;
  const auto res = run_pretraining(cfg, *corpus_);
  EXPECT_EQ(res.steps_run, 16u);
  const auto lines = lines_of(res.metrics_log);
  ASSERT_EQ(lines.size(), 16u);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto j = json::parse(lines[i]);
    EXPECT_EQ(j["step"].get<std::size_t>(), i);
    EXPECT_EQ(j["epoch"].get<std::size_t>(), i / 8);
    EXPECT_DOUBLE_EQ(j["total"].get<double>(), j["gca"].get<double>() + j["tma"].get<double>());
    EXPECT_EQ(j["wall_ms"].get<double>(), 0.0);
    EXPECT_TRUE(std::isfinite(j["total"].get<double>()));
  }
  const fs::path out(cfg.paths.output_dir);
  for (std::size_t s : {0, 4, 8, 12}) EXPECT_TRUE(fs::exists(out / checkpoint_name(s))) << s;
  EXPECT_FALSE(fs::exists(out / checkpoint_name(16)));
  EXPECT_TRUE(fs::exists(out / "final.t3dc"));
  EXPECT_EQ(read_checkpoint(res.final_checkpoint).meta["step"].get<std::size_t>(), 16u);
}

TEST_F(Pretraining, DeterministicUnderFixedSeed) {
  RunConfig a = config("det_a"), b = config("det_b");
  const auto ra = run_pretraining(a, *corpus_);
  const auto rb = run_pretraining(b, *corpus_);
  EXPECT_EQ(slurp(ra.metrics_log), slurp(rb.metrics_log));
  const auto ca = read_checkpoint(ra.final_checkpoint), cb = read_checkpoint(rb.final_checkpoint);
  ASSERT_EQ(ca.tensors.size(), cb.tensors.size());
  for (std::size_t k = 0; k < ca.tensors.size(); ++k) EXPECT_EQ(ca.tensors[k].second.data, cb.tensors[k].second.data);

  RunConfig c = config("det_c");
  c.train.seed = 1;
  const auto rc = run_pretraining(c, *corpus_);
  EXPECT_NE(slurp(ra.metrics_log), slurp(rc.metrics_log));
}

TEST_F(Pretraining, SplitRunMatchesContinuousRun) {
  RunConfig full = config("split_full");
  full.train.max_steps = 10;
  const auto rf = run_pretraining(full, *corpus_);

  RunConfig first = config("split_part");
  first.train.max_steps = 5;
  const auto r1 = run_pretraining(first, *corpus_);
  EXPECT_EQ(r1.steps_run, 5u);
  RunConfig second = first;
  second.train.max_steps = 10;
  const auto r2 = run_pretraining(second, *corpus_, r1.final_checkpoint);
  EXPECT_EQ(r2.steps_run, 5u);

  const auto a = read_checkpoint(rf.final_checkpoint), b = read_checkpoint(r2.final_checkpoint);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (std::size_t k = 0; k < a.tensors.size(); ++k) {
    EXPECT_EQ(a.tensors[k].first, b.tensors[k].first);
    EXPECT_EQ(a.tensors[k].second.data, b.tensors[k].second.data) << a.tensors[k].first;
  }
  EXPECT_EQ(a.meta["step"], b.meta["step"]);
  EXPECT_EQ(a.meta["rng"], b.meta["rng"]);
  EXPECT_EQ(slurp(rf.metrics_log), slurp(r2.metrics_log));
}

TEST_F(Pretraining, CheckpointSaveLoadSaveIsByteIdentical) {
  RunConfig cfg = config("ck");
  cfg.train.max_steps = 3;
  const auto res = run_pretraining(cfg, *corpus_);
  Trainer t(cfg, *corpus_);
  restore(t.state(), read_checkpoint(res.final_checkpoint));
  const fs::path again = dir_->path() / "again.t3dc";
  save_checkpoint(t.state(), again);
  EXPECT_EQ(slurp(again), slurp(res.final_checkpoint));
}

TEST_F(Pretraining, RefusesMismatchedResume) {
  RunConfig cfg = config("mismatch");
  cfg.train.max_steps = 2;
  const auto res = run_pretraining(cfg, *corpus_);
  RunConfig other = cfg;
  other.train.tau = 0.1;
  EXPECT_EQ(code_of([&] { run_pretraining(other, *corpus_, res.final_checkpoint); }), Errc::refuse_to_resume);
  RunConfig wider = cfg;
  wider.model.d_shared = 32;
  EXPECT_EQ(code_of([&] { run_pretraining(wider, *corpus_, res.final_checkpoint); }), Errc::refuse_to_resume);
}

TEST_F(Pretraining, MultiViewWeightZeroLeavesFusionUntouched) {
  RunConfig cfg = config("gca_only");
  cfg.ablation.tma_weight = 0;
  cfg.train.max_steps = 4;
  const auto res = run_pretraining(cfg, *corpus_);
  for (const auto& rec : res.history) EXPECT_EQ(rec.tma, 0.0);
  const auto init = read_checkpoint(fs::path(cfg.paths.output_dir) / checkpoint_name(0));
  const auto fin = read_checkpoint(res.final_checkpoint);
  std::size_t checked = 0;
  for (const auto& [name, t] : init.tensors) {
    if (name.rfind("param/fusion.", 0) == 0 || name.rfind("param/cluster_head.", 0) == 0) {
      EXPECT_EQ(fin.tensor(name).data, t.data) << name;
      ++checked;
    }
  }
  EXPECT_GT(checked, 0u);
  EXPECT_NE(fin.tensor("param/proj_visual.weight").data, init.tensor("param/proj_visual.weight").data);
}

TEST_F(Pretraining, FrozenTextEncoderStaysFixed) {
  RunConfig cfg = config("frozen");
  cfg.train.freeze_text = true;
  cfg.train.max_steps = 3;
  const auto res = run_pretraining(cfg, *corpus_);
  const auto init = read_checkpoint(fs::path(cfg.paths.output_dir) / checkpoint_name(0));
  const auto fin = read_checkpoint(res.final_checkpoint);
  for (const auto& [name, t] : init.tensors)
    if (name.rfind("param/text.", 0) == 0) {
      EXPECT_EQ(fin.tensor(name).data, t.data) << name;
    }
}

TEST_F(Pretraining, NonFiniteLossRaisesDiverged) {
  RunConfig cfg = config("nan");
  Trainer t(cfg, *corpus_);
  t.step();
  auto* w = t.state().model->params().find("proj_text.weight");
  w->value().data[0] = std::numeric_limits<float>::quiet_NaN();
  const auto snapshot = t.state().model->params().find("proj_visual.weight")->value().data;
  try {
    t.step();
    ADD_FAILURE() << "expected divergence";
  } catch (const DivergedError& e) {
    EXPECT_EQ(e.step(), 1);
    EXPECT_EQ(e.code(), Errc::diverged);
  }
  EXPECT_EQ(t.state().step, 1u);
  EXPECT_EQ(t.state().model->params().find("proj_visual.weight")->value().data, snapshot);
}

TEST_F(Pretraining, RejectsBatchLargerThanTrainSplit) {
  RunConfig cfg = config("huge_batch");
  cfg.train.batch_size = 64;
  EXPECT_EQ(code_of([&] { Trainer t(cfg, *corpus_); }), Errc::config);
}

TEST_F(Pretraining, LossDecreasesOnSmallCorpus) {
  RunConfig cfg = config("learn");
  cfg.train.total_epochs = 6;
  cfg.train.base_lr = 3e-3;
  const auto res = run_pretraining(cfg, *corpus_);
  ASSERT_EQ(res.history.size(), 48u);
  auto mean = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += res.history[i].total;
    return s / double(to - from);
  };
  EXPECT_LT(mean(40, 48), mean(0, 8));
}

}  // namespace
}  // namespace t3d
