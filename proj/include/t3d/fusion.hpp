// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "t3d/autograd.hpp"
#include "t3d/encoders.hpp"
#include "t3d/params.hpp"

namespace t3d {

/// One text-informed refinement layer. Visual tokens query the report tokens
/// (cross-attention, residual, layer norm), then pass through a position-wise
/// feed-forward (residual, layer norm). There is no visual self-attention and no
/// positional encoding, so the block is equivariant to visual-token order and
/// invariant to the order of unmasked text tokens.
template <class T>
struct FusionLayer {
  Linear<T> wq, wk, wv, wo, ff1, ff2;
  LayerNorm<T> ln1, ln2;
};

template <class T>
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) : heads_(cfg.fusion_heads) {
    const std::size_t df = cfg.feature_dim(), dr = cfg.d_r;
    for (std::size_t l = 0; l < cfg.fusion_layers; ++l) {
      const std::string p = "fusion.layer" + std::to_string(l);
      FusionLayer<T> L;
      L.wq = Linear<T>(ps, p + ".attn.q", df, df, rng);
      L.wk = Linear<T>(ps, p + ".attn.k", dr, df, rng, false);  // a key bias cancels in the softmax
      L.wv = Linear<T>(ps, p + ".attn.v", dr, df, rng);
      L.wo = Linear<T>(ps, p + ".attn.out", df, df, rng);
      L.ln1 = LayerNorm<T>(ps, p + ".ln1", df);
      L.ff1 = Linear<T>(ps, p + ".ffn.fc1", df, cfg.ffn_mult * df, rng);
      L.ff2 = Linear<T>(ps, p + ".ffn.fc2", cfg.ffn_mult * df, df, rng);
      L.ln2 = LayerNorm<T>(ps, p + ".ln2", df);
      layers_.push_back(std::move(L));
    }
  }

  /// visual [N, L_v, d_f], text [N, L_r, d_r], mask N * L_r -> refined tokens [N, L_v, d_f].
  ag::Var<T> refine(ag::Var<T> visual, const ag::Var<T>& text, const std::vector<std::uint8_t>& mask) const {
    for (const auto& L : layers_) {
      auto att = ag::attention(L.wq(visual), L.wk(text), L.wv(text), mask, heads_);
      visual = L.ln1(ag::add(visual, L.wo(att)));
      visual = L.ln2(ag::add(visual, L.ff2(ag::gelu(L.ff1(visual)))));
    }
    return visual;
  }

  /// Mean over visual positions of the refined tokens -> [N, d_f].
  ag::Var<T> operator()(const ag::Var<T>& visual, const ag::Var<T>& text,
                        const std::vector<std::uint8_t>& mask) const {
    const std::size_t n = visual->value.dim(0), lv = visual->value.dim(1), df = visual->value.dim(2);
    require(lv >= 1, Errc::shape, "fusion needs at least one visual token");
    return ag::mean_mid(refine(visual, text, mask), n, lv, df, {n, df});
  }

  std::size_t layers() const { return layers_.size(); }
  const std::vector<FusionLayer<T>>& layer_list() const { return layers_; }

 private:
  std::vector<FusionLayer<T>> layers_;
  std::size_t heads_ = 1;
};

/// Linear map from the local embedding to cluster slots. Batches narrower than
/// the head use its leading outputs.
template <class T>
class ClusterHead {
 public:
  ClusterHead() = default;
  ClusterHead(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng)
      : proj_(ps, "cluster_head", cfg.feature_dim(), cfg.cluster_slots, rng) {}

  ag::Var<T> operator()(const ag::Var<T>& z_hat, std::size_t active) const {
    require(active >= 1 && active <= slots(), Errc::config,
            "batch of " + std::to_string(active) + " exceeds the cluster head width " + std::to_string(slots()));
    auto logits = proj_(z_hat);
    return active == slots() ? logits : ag::leading_columns(logits, active);
  }

  std::size_t slots() const { return proj_.out_features(); }
  const Linear<T>& projection() const { return proj_; }

 private:
  Linear<T> proj_;
};

}  // namespace t3d
