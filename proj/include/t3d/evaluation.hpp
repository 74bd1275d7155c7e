// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0
//
// Downstream protocols on a frozen model: two-way prompt classification,
// bidirectional retrieval and a per-attribute linear probe, plus the metrics they
// report. Scores are thresholded at 0.5; AUC is the Mann-Whitney statistic with
// midranks; multi-attribute results are macro averages.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "t3d/checkpoint.hpp"
#include "t3d/config.hpp"
#include "t3d/corpus.hpp"
#include "t3d/model.hpp"
#include "t3d/optim.hpp"
#include "t3d/training.hpp"

namespace t3d {

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double precision = 0;
  double auc = std::numeric_limits<double>::quiet_NaN();  // NaN when one class is absent
  double acc = 0;
  double f1 = 0;

  bool auc_defined() const { return !std::isnan(auc); }
};

/// Area under the ROC curve via the rank-sum statistic, ties receiving midranks.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), Errc::shape, "scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i]) {
      pos += 1;
      rank_sum += rank[i];
    }
  const double neg = static_cast<double>(n) - pos;
  require(pos > 0 && neg > 0, Errc::auc_undefined, "AUC needs at least one positive and one negative label");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

inline Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                               double threshold = 0.5) {
  require(scores.size() == labels.size() && !scores.empty(), Errc::shape, "scores and labels must be non-empty and aligned");
  double tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    require(std::isfinite(scores[i]), Errc::precondition, "non-finite score");
    require(labels[i] == 0 || labels[i] == 1, Errc::precondition, "labels must be 0 or 1");
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i]) tp += 1;
    else if (pred) fp += 1;
    else if (labels[i]) fn += 1;
    else tn += 1;
  }
  Metrics m;
  m.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  m.acc = (tp + tn) / static_cast<double>(scores.size());
  m.f1 = m.precision + recall > 0 ? 2 * m.precision * recall / (m.precision + recall) : 0.0;
  if (tp + fn > 0 && fp + tn > 0) m.auc = roc_auc(scores, labels);
  return m;
}

/// Unweighted mean over attributes; AUC over the attributes where it is defined.
inline Metrics macro_average(const std::vector<Metrics>& per) {
  Metrics out;
  if (per.empty()) return out;
  double auc_sum = 0;
  std::size_t auc_n = 0;
  for (const auto& m : per) {
    out.precision += m.precision;
    out.acc += m.acc;
    out.f1 += m.f1;
    if (m.auc_defined()) {
      auc_sum += m.auc;
      ++auc_n;
    }
  }
  const double n = static_cast<double>(per.size());
  out.precision /= n;
  out.acc /= n;
  out.f1 /= n;
  if (auc_n) out.auc = auc_sum / static_cast<double>(auc_n);
  return out;
}

inline nlohmann::json to_json(const Metrics& m) {
  return {{"precision", m.precision},
          {"auc", m.auc_defined() ? nlohmann::json(m.auc) : nlohmann::json(nullptr)},
          {"acc", m.acc},
          {"f1", m.f1}};
}

/// Samples x attributes scores with aligned labels.
struct ScoreTable {
  std::vector<std::string> attributes;
  std::vector<std::vector<double>> scores;  // [sample][attribute]
  std::vector<std::vector<int>> labels;

  std::vector<double> column(std::size_t a) const {
    std::vector<double> c;
    for (const auto& r : scores) c.push_back(r[a]);
    return c;
  }
  std::vector<int> label_column(std::size_t a) const {
    std::vector<int> c;
    for (const auto& r : labels) c.push_back(r[a]);
    return c;
  }
};

struct TableMetrics {
  std::map<std::string, Metrics> per_attribute;
  Metrics macro;
};

inline TableMetrics evaluate_table(const ScoreTable& t) {
  TableMetrics out;
  std::vector<Metrics> all;
  for (std::size_t a = 0; a < t.attributes.size(); ++a) {
    all.push_back(compute_metrics(t.column(a), t.label_column(a)));
    out.per_attribute[t.attributes[a]] = all.back();
  }
  out.macro = macro_average(all);
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval

struct RetrievalResult {
  std::map<std::size_t, double> image_to_text;  // K -> recall
  std::map<std::size_t, double> text_to_image;
};

namespace detail {

/// 0-based rank of candidate `truth` for one query row of a similarity matrix;
/// candidates with equal similarity and a lower index rank ahead.
inline std::size_t rank_of(const std::vector<double>& sims, std::size_t truth) {
  std::size_t r = 0;
  for (std::size_t j = 0; j < sims.size(); ++j)
    if (sims[j] > sims[truth] || (sims[j] == sims[truth] && j < truth)) ++r;
  return r;
}

template <class T>
double dot_rows(const EmbeddingBatch<T>& a, std::size_t i, const EmbeddingBatch<T>& b, std::size_t j) {
  double s = 0;
  for (std::size_t k = 0; k < a.width(); ++k) s += static_cast<double>(a.row(i)[k]) * static_cast<double>(b.row(j)[k]);
  return s;
}

}  // namespace detail

template <class T>
RetrievalResult retrieval_eval(const EmbeddingBatch<T>& zv, const EmbeddingBatch<T>& zr, const std::vector<std::size_t>& ks) {
  require(zv.values.rank() == 2 && zr.values.rank() == 2, Errc::shape, "embeddings must be rank 2");
  require(zv.rows() == zr.rows() && zv.rows() >= 1, Errc::shape,
          "retrieval needs equal counts, got " + std::to_string(zv.rows()) + " and " + std::to_string(zr.rows()));
  require(zv.width() == zr.width(), Errc::shape, "embedding width mismatch");
  const std::size_t n = zv.rows();
  std::vector<std::vector<double>> sim(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sim[i][j] = detail::dot_rows(zv, i, zr, j);
  std::vector<std::size_t> i2t(n), t2i(n);
  for (std::size_t i = 0; i < n; ++i) {
    i2t[i] = detail::rank_of(sim[i], i);
    std::vector<double> col(n);
    for (std::size_t j = 0; j < n; ++j) col[j] = sim[j][i];
    t2i[i] = detail::rank_of(col, i);
  }
  RetrievalResult res;
  for (std::size_t k : ks) {
    require(k >= 1, Errc::config, "recall cutoff must be positive");
    const auto hits = [k](const std::vector<std::size_t>& ranks) {
      return static_cast<double>(std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r < k; }));
    };
    res.image_to_text[k] = hits(i2t) / static_cast<double>(n);
    res.text_to_image[k] = hits(t2i) / static_cast<double>(n);
  }
  return res;
}

inline nlohmann::json to_json(const RetrievalResult& r) {
  nlohmann::json j;
  for (const auto& [k, v] : r.image_to_text) j["image_to_text"]["R@" + std::to_string(k)] = v;
  for (const auto& [k, v] : r.text_to_image) j["text_to_image"]["R@" + std::to_string(k)] = v;
  return j;
}

// ---------------------------------------------------------------------------
// Embedding helpers

/// Unit-norm global embeddings of volumes, encoded in chunks.
template <class T>
EmbeddingBatch<T> embed_volumes(const T3DModel<T>& model, const std::vector<const Volume*>& vols, std::size_t chunk = 32) {
  require(!vols.empty(), Errc::shape, "no volumes to embed");
  ag::NoGradGuard guard;
  std::vector<T> data;
  std::size_t d = 0;
  for (std::size_t s = 0; s < vols.size(); s += chunk) {
    std::vector<const Volume*> part(vols.begin() + s, vols.begin() + std::min(vols.size(), s + chunk));
    auto z = model.global_embedding(model.features(ag::constant(volumes_to_tensor<T>(part))));
    d = z->value.dim(1);
    data.insert(data.end(), z->value.data.begin(), z->value.data.end());
  }
  return {Tensor<T>({vols.size(), d}, std::move(data)), true};
}

template <class T>
EmbeddingBatch<T> embed_texts(const T3DModel<T>& model, const std::vector<const TokenSequence*>& seqs) {
  require(!seqs.empty(), Errc::shape, "no reports to embed");
  ag::NoGradGuard guard;
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> mask;
  pack_tokens(seqs, model.config().max_tokens, ids, mask);
  auto z = model.text_embedding(model.text(ids, mask, seqs.size()).cls);
  return {z->value, true};
}

// ---------------------------------------------------------------------------
// Zero-shot classification

struct Prompt {
  std::string positive;
  std::string negative;
};

/// attribute -> prompt pair
using PromptSet = std::map<std::string, Prompt>;

inline PromptSet default_prompts(const std::vector<std::string>& attributes, const std::string& negative_template = "no {}") {
  PromptSet ps;
  for (const auto& a : attributes) {
    std::string neg = negative_template;
    neg.replace(neg.find("{}"), 2, a);
    ps[a] = {a, neg};
  }
  return ps;
}

inline PromptSet prompts_from_json(const nlohmann::json& j) {
  require(j.is_object(), Errc::prompt, "prompt file must be a JSON object");
  PromptSet ps;
  for (const auto& [attr, body] : j.items()) {
    require(body.is_object() && body.contains("positive") && body.contains("negative") && body["positive"].is_string() &&
                body["negative"].is_string(),
            Errc::prompt, "prompt '" + attr + "' needs string fields positive and negative");
    ps[attr] = {body["positive"].get<std::string>(), body["negative"].get<std::string>()};
  }
  require(!ps.empty(), Errc::prompt, "prompt set is empty");
  return ps;
}

inline PromptSet load_prompts(const std::filesystem::path& path) {
  const std::string text = detail::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::prompt, "prompt file " + path.string() + ": " + e.what());
  }
  return prompts_from_json(j);
}

/// Tokenizes a prompt; it must contain at least one in-vocabulary word.
inline TokenSequence tokenize_prompt(const std::string& text, const Vocab& vocab, std::size_t max_len) {
  TokenSequence t = tokenize(text, vocab, max_len);
  bool known = false;
  for (std::size_t i = 1; i < t.length(); ++i) known = known || (t.mask[i] && t.ids[i] != Vocab::kUnk);
  require(known, Errc::prompt, "prompt '" + text + "' has no in-vocabulary word");
  return t;
}

/// score = exp(s+/tau) / (exp(s+/tau) + exp(s-/tau)) with s = cosine similarity.
inline double two_way_score(double s_pos, double s_neg, double tau) {
  return 1.0 / (1.0 + std::exp((s_neg - s_pos) / tau));
}

template <class T>
ScoreTable zero_shot_classify(const T3DModel<T>& model, const EmbeddingBatch<T>& zv, const std::vector<std::map<std::string, int>>& labels,
                              const PromptSet& prompts, const Vocab& vocab, double tau) {
  require(!prompts.empty(), Errc::prompt, "prompt set is empty");
  require(labels.size() == zv.rows(), Errc::shape, "one label map per volume is required");
  ScoreTable t;
  std::vector<TokenSequence> seqs;
  for (const auto& [attr, p] : prompts) {
    t.attributes.push_back(attr);
    seqs.push_back(tokenize_prompt(p.positive, vocab, model.config().max_tokens));
    seqs.push_back(tokenize_prompt(p.negative, vocab, model.config().max_tokens));
  }
  std::vector<const TokenSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  const auto zp = embed_texts(model, ptrs);
  for (std::size_t i = 0; i < zv.rows(); ++i) {
    std::vector<double> row;
    std::vector<int> lab;
    for (std::size_t a = 0; a < t.attributes.size(); ++a) {
      row.push_back(two_way_score(detail::dot_rows(zv, i, zp, 2 * a), detail::dot_rows(zv, i, zp, 2 * a + 1), tau));
      const auto it = labels[i].find(t.attributes[a]);
      require(it != labels[i].end(), Errc::prompt, "attribute '" + t.attributes[a] + "' is not a manifest label");
      lab.push_back(it->second);
    }
    t.scores.push_back(std::move(row));
    t.labels.push_back(std::move(lab));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeConfig {
  std::size_t steps = 300;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  std::map<std::string, Metrics> train;
  std::map<std::string, Metrics> test;
  Metrics train_macro, test_macro;
};

/// Fits a two-class linear classifier on frozen embeddings by full-batch AdamW on
/// the mean cross-entropy; returns positive-class probabilities for `eval`.
template <class T>
std::pair<std::vector<double>, std::vector<double>> fit_logistic(const EmbeddingBatch<T>& train, const std::vector<int>& y,
                                                                 const EmbeddingBatch<T>& eval, const ProbeConfig& cfg,
                                                                 const std::string& attr) {
  const bool has_pos = std::find(y.begin(), y.end(), 1) != y.end();
  const bool has_neg = std::find(y.begin(), y.end(), 0) != y.end();
  require(has_pos && has_neg, Errc::degenerate_labels, "attribute '" + attr + "' has a single class in the training labels");
  ParamStore<double> ps;
  Rng rng(cfg.seed);
  Linear<double> head(ps, "probe", train.width(), 2, rng);
  AdamW<double> opt(ps, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  auto x = ag::constant(train.values.template cast<double>());
  std::vector<std::size_t> targets(y.begin(), y.end());
  const double inv_n = 1.0 / static_cast<double>(y.size());
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    ps.zero_grad();
    auto loss = ag::scale(ag::cross_entropy_sum(head(x), targets), inv_n);
    ag::backward(loss);
    opt.step(ps, cfg.lr);
  }
  ag::NoGradGuard guard;
  auto prob = [&](const EmbeddingBatch<T>& e) {
    auto logits = head(ag::constant(e.values.template cast<double>()));
    std::vector<double> p;
    for (std::size_t i = 0; i < e.rows(); ++i)
      p.push_back(two_way_score(logits->value.data[2 * i + 1], logits->value.data[2 * i], 1.0));
    return p;
  };
  return {prob(train), prob(eval)};
}

template <class T>
ProbeResult linear_probe(const EmbeddingBatch<T>& train, const std::vector<std::map<std::string, int>>& train_labels,
                         const EmbeddingBatch<T>& test, const std::vector<std::map<std::string, int>>& test_labels,
                         const std::vector<std::string>& attributes, const ProbeConfig& cfg = {}) {
  require(train.rows() == train_labels.size() && test.rows() == test_labels.size(), Errc::shape,
          "probe embeddings and labels differ in count");
  require(train.width() == test.width(), Errc::shape, "probe embedding widths differ");
  ProbeResult res;
  std::vector<Metrics> tr_all, te_all;
  for (const auto& attr : attributes) {
    auto col = [&](const std::vector<std::map<std::string, int>>& l) {
      std::vector<int> c;
      for (const auto& m : l) {
        const auto it = m.find(attr);
        require(it != m.end(), Errc::config, "attribute '" + attr + "' missing from labels");
        c.push_back(it->second);
      }
      return c;
    };
    const auto ytr = col(train_labels), yte = col(test_labels);
    const auto [ptr, pte] = fit_logistic(train, ytr, test, cfg, attr);
    res.train[attr] = compute_metrics(ptr, ytr);
    res.test[attr] = compute_metrics(pte, yte);
    tr_all.push_back(res.train[attr]);
    te_all.push_back(res.test[attr]);
  }
  res.train_macro = macro_average(tr_all);
  res.test_macro = macro_average(te_all);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint-driven evaluation

/// A frozen model restored from a checkpoint together with the data it is scored on.
struct EvalSession {
  RunConfig config;
  std::string checkpoint_hash;
  std::unique_ptr<T3DModel<float>> model;
};

/// Builds the model described by `cfg` for this corpus and loads the checkpoint
/// into it. Any fingerprint or architecture disagreement is refused.
inline EvalSession open_checkpoint(const RunConfig& cfg, const Corpus& corpus, const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  const CheckpointData ck = deserialize_checkpoint(bytes);
  const auto expected = cfg.model_config(corpus.vocab.size());
  const auto stored_fp = ck.meta.value("fingerprint", std::string());
  require(stored_fp == fingerprint(cfg), Errc::refuse_to_resume,
          "checkpoint fingerprint " + stored_fp + " does not match the config " + fingerprint(cfg));
  require(checkpoint_model_config(ck) == expected, Errc::refuse_to_resume,
          "checkpoint architecture differs from the config");
  EvalSession s{cfg, hex64(fnv1a64(bytes)), std::make_unique<T3DModel<float>>(expected)};
  load_parameters(*s.model, ck);
  return s;
}

inline nlohmann::json table_json(const TableMetrics& tm) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [a, m] : tm.per_attribute) per[a] = to_json(m);
  return per;
}

struct SplitData {
  std::vector<const Volume*> volumes;
  std::vector<const TokenSequence*> tokens;
  std::vector<std::map<std::string, int>> labels;
};

inline SplitData split_data(const Corpus& c, Split s) {
  SplitData d;
  for (std::size_t i : c.indices(s)) {
    d.volumes.push_back(&c.volumes[i]);
    d.tokens.push_back(&c.tokens[i]);
    d.labels.push_back(c.records[i].labels);
  }
  return d;
}

/// Evaluation report for task zeroshot, retrieval or probe:
/// {task, checkpoint_hash, config, metrics, per_attribute}.
inline nlohmann::json evaluate(const std::string& task, const EvalSession& s, const Corpus& corpus, const PromptSet* prompts = nullptr) {
  const Split split = parse_split(s.config.eval.split);
  const SplitData eval = split_data(corpus, split);
  require(!eval.volumes.empty(), Errc::config, std::string("the ") + split_name(split) + " split is empty");
  nlohmann::json report;
  report["task"] = task;
  report["checkpoint_hash"] = s.checkpoint_hash;
  report["config"] = to_json(s.config);
  report["split"] = split_name(split);
  report["samples"] = eval.volumes.size();
  const auto zv = embed_volumes(*s.model, eval.volumes);
  if (task == "retrieval") {
    const auto zr = embed_texts(*s.model, eval.tokens);
    report["metrics"] = to_json(retrieval_eval(zv, zr, s.config.eval.ks));
    report["per_attribute"] = nlohmann::json::object();
  } else if (task == "zeroshot") {
    const PromptSet ps = prompts ? *prompts : default_prompts(corpus.attributes(), s.config.eval.negative_template);
    const auto tm = evaluate_table(zero_shot_classify(*s.model, zv, eval.labels, ps, corpus.vocab, s.config.train.tau));
    report["metrics"] = to_json(tm.macro);
    report["per_attribute"] = table_json(tm);
  } else if (task == "probe") {
    const SplitData train = split_data(corpus, Split::train);
    const auto zt = embed_volumes(*s.model, train.volumes);
    const ProbeConfig pc{s.config.eval.probe_steps, s.config.eval.probe_lr, s.config.eval.probe_seed};
    const auto pr = linear_probe(zt, train.labels, zv, eval.labels, corpus.attributes(), pc);
    report["metrics"] = to_json(pr.test_macro);
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [a, m] : pr.test) per[a] = to_json(m);
    report["per_attribute"] = per;
  } else {
    fail(Errc::config, "unknown evaluation task '" + task + "'");
  }
  return report;
}

}  // namespace t3d
