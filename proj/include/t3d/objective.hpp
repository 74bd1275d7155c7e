// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "t3d/autograd.hpp"
#include "t3d/losses.hpp"
#include "t3d/model.hpp"

namespace t3d {

/// B samples, each with its full volume, M cropped views and its report tokens.
/// views[i * M + m] is view m of sample i.
struct Batch {
  std::vector<const Volume*> volumes;
  std::vector<Volume> views;
  std::vector<const TokenSequence*> tokens;
  std::size_t views_per_sample = 0;

  std::size_t size() const { return volumes.size(); }
};

struct LossOptions {
  double tau = 0.07;
  double tau_tma = 0.07;
  double gca_weight = 1.0;
  double tma_weight = 1.0;
  bool symmetric = false;
};

template <class T>
struct Objective {
  ag::Var<T> root;          // weighted sum, scalar
  LossBreakdown breakdown;  // weighted terms
  ag::Var<T> view_logits;   // [B*M, B], null when the multi-view term is off
};

/// One forward pass over a batch. A term whose weight is zero is not built at all,
/// so the parameters that only feed it receive no gradient.
template <class T>
Objective<T> total_loss(const T3DModel<T>& model, const Batch& batch, const LossOptions& opt) {
  const std::size_t b = batch.size(), m = batch.views_per_sample;
  require(b >= 1 && batch.tokens.size() == b, Errc::shape, "batch needs one report per volume");
  require(opt.gca_weight >= 0 && opt.tma_weight >= 0, Errc::config, "loss weights must be non-negative");
  const bool use_gca = opt.gca_weight > 0, use_tma = opt.tma_weight > 0;

  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> mask;
  pack_tokens(batch.tokens, model.config().max_tokens, ids, mask);
  const auto text = model.text(ids, mask, b);

  Objective<T> out;
  ag::Var<T> gca, tma;
  if (use_gca) {
    auto zv = model.global_embedding(model.features(ag::constant(volumes_to_tensor<T>(batch.volumes))));
    auto zr = model.text_embedding(text.cls);
    gca = ag::scale(gca_objective(zv, zr, static_cast<T>(opt.tau), opt.symmetric), static_cast<T>(opt.gca_weight));
    out.breakdown.gca = static_cast<double>(ag::item(gca));
  }
  if (use_tma) {
    require(m >= 1 && batch.views.size() == b * m, Errc::shape, "batch needs M views per sample");
    std::vector<const Volume*> vptr;
    for (const auto& v : batch.views) vptr.push_back(&v);
    auto fmap = model.features(ag::constant(volumes_to_tensor<T>(vptr)));
    auto z_hat = model.local_embedding(fmap, text.tokens, mask, m);
    out.view_logits = model.cluster_logits(z_hat, b);
    tma = ag::scale(tma_objective(out.view_logits, m, static_cast<T>(opt.tau_tma)), static_cast<T>(opt.tma_weight));
    out.breakdown.tma = static_cast<double>(ag::item(tma));
  }
  out.breakdown.total = out.breakdown.gca + out.breakdown.tma;
  if (gca && tma)
    out.root = ag::add(gca, tma);
  else if (gca || tma)
    out.root = gca ? gca : tma;
  else
    out.root = ag::constant(Tensor<T>({1}));
  return out;
}

}  // namespace t3d
