// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0
//
// Visual and text encoders.
//
// The visual backbone is a shallow 3D residual network: each stage halves every
// spatial axis with a stride-2 convolution and then applies `blocks[s]` basic
// residual blocks. Group normalization is computed per sample, so full volumes and
// local views never share statistics. The text encoder is a pre-norm transformer
// over learned token and position embeddings.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "t3d/autograd.hpp"
#include "t3d/params.hpp"
#include "t3d/rng.hpp"
#include "t3d/tensor.hpp"
#include "t3d/tokenizer.hpp"
#include "t3d/volume.hpp"

namespace t3d {

struct ModelConfig {
  // visual backbone
  std::vector<std::size_t> channels{8, 16, 32};  // last entry is the feature width d_f
  std::vector<std::size_t> blocks{0, 1, 1};       // residual blocks per stage
  std::size_t norm_groups = 4;
  // text encoder
  std::size_t vocab_size = 3;
  std::size_t max_tokens = 32;  // L_r
  std::size_t d_r = 64;
  std::size_t text_layers = 2;
  std::size_t text_heads = 4;
  std::size_t ffn_mult = 4;
  // fusion and heads
  std::size_t fusion_layers = 1;
  std::size_t fusion_heads = 4;
  bool text_informing = true;
  std::size_t d_shared = 768;
  std::size_t cluster_slots = 16;  // widest batch the cluster head can label
  std::uint64_t init_seed = 0;

  std::size_t feature_dim() const { return channels.empty() ? 0 : channels.back(); }
  std::size_t stride_product() const { return std::size_t{1} << channels.size(); }

  void validate() const {
    require(!channels.empty(), Errc::config, "model.channels must not be empty");
    require(blocks.size() == channels.size(), Errc::config, "model.blocks must have one entry per stage");
    for (std::size_t c : channels) {
      require(c > 0, Errc::config, "model.channels entries must be positive");
      require(norm_groups > 0 && c % norm_groups == 0, Errc::config,
              "model.norm_groups must divide every channel count");
    }
    require(vocab_size >= 3, Errc::config, "vocabulary must hold the reserved tokens");
    require(max_tokens >= 1, Errc::config, "model.max_tokens must be positive");
    require(d_r > 0 && text_heads > 0 && d_r % text_heads == 0, Errc::config,
            "model.d_r must be divisible by model.text_heads");
    require(fusion_layers >= 1, Errc::config, "model.fusion_layers must be at least 1");
    require(fusion_heads > 0 && feature_dim() % fusion_heads == 0, Errc::config,
            "feature width must be divisible by model.fusion_heads");
    require(d_shared > 0, Errc::config, "model.d_shared must be positive");
    require(cluster_slots >= 1, Errc::config, "cluster head needs at least one slot");
    require(ffn_mult >= 1, Errc::config, "model.ffn_mult must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Domain types

enum class Provenance { global_volume, local_view };

/// Visual features of one input: [d_f, s, h, w].
template <class T>
struct FeatureMap {
  Tensor<T> values;
  Provenance provenance = Provenance::global_volume;

  std::size_t channels() const { return values.dim(0); }
  Index3 spatial() const { return {values.dim(3), values.dim(2), values.dim(1)}; }  // (w, h, s)
};

/// Token features of one report: tokens [L_r, d_r], the summary row and the mask.
template <class T>
struct TextFeatures {
  Tensor<T> tokens;
  std::vector<T> cls;
  std::vector<std::uint8_t> mask;
};

/// Rows of shared-space embeddings.
template <class T>
struct EmbeddingBatch {
  Tensor<T> values;  // [B, D]
  bool normalized = false;

  std::size_t rows() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  const T* row(std::size_t i) const { return values.data.data() + i * width(); }
};

// ---------------------------------------------------------------------------
// Visual encoder

template <class T>
struct GroupNorm {
  ag::Var<T> gamma, beta;
  std::size_t channels = 0, groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamStore<T>& ps, const std::string& name, std::size_t c, std::size_t g) : channels(c), groups(g) {
    gamma = ps.filled(name + ".gamma", {c}, T(1));
    beta = ps.filled(name + ".beta", {c}, T(0));
  }

  /// x is [N, C, ...spatial].
  ag::Var<T> operator()(const ag::Var<T>& x) const {
    const std::size_t per_sample = x->numel() / x->value.dim(0);
    const std::size_t inner = per_sample / channels;
    return ag::normalize_affine(x, per_sample / groups, channels, inner, gamma, beta);
  }
};

template <class T>
struct Conv3d {
  ag::Var<T> w, b;
  std::size_t stride = 1;

  Conv3d() = default;
  Conv3d(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t s, Rng& rng)
      : stride(s) {
    w = ps.weight(name + ".weight", {out, in, 3, 3, 3}, in * 27, rng, std::sqrt(2.0));
    b = ps.filled(name + ".bias", {out}, T(0));
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::conv3d(x, w, b, stride, 1); }
};

template <class T>
struct ResidualBlock {
  Conv3d<T> conv1, conv2;
  GroupNorm<T> norm1, norm2;

  ag::Var<T> operator()(const ag::Var<T>& x) const {
    auto y = ag::silu(norm1(conv1(x)));
    y = norm2(conv2(y));
    return ag::silu(ag::add(x, y));
  }
};

template <class T>
class VisualEncoder {
 public:
  VisualEncoder() = default;
  VisualEncoder(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    std::size_t in = 1;
    for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
      const std::string pre = "visual.stage" + std::to_string(s);
      const std::size_t c = cfg.channels[s];
      Stage st;
      st.down = Conv3d<T>(ps, pre + ".down", in, c, 2, rng);
      st.norm = GroupNorm<T>(ps, pre + ".norm", c, cfg.norm_groups);
      for (std::size_t k = 0; k < cfg.blocks[s]; ++k) {
        const std::string bp = pre + ".block" + std::to_string(k);
        ResidualBlock<T> rb;
        rb.conv1 = Conv3d<T>(ps, bp + ".conv1", c, c, 1, rng);
        rb.norm1 = GroupNorm<T>(ps, bp + ".norm1", c, cfg.norm_groups);
        rb.conv2 = Conv3d<T>(ps, bp + ".conv2", c, c, 1, rng);
        rb.norm2 = GroupNorm<T>(ps, bp + ".norm2", c, cfg.norm_groups);
        st.blocks.push_back(std::move(rb));
      }
      stages_.push_back(std::move(st));
      in = c;
    }
  }

  /// [N, 1, S, H, W] -> [N, d_f, s, h, w]
  ag::Var<T> operator()(ag::Var<T> x) const {
    for (const auto& st : stages_) {
      x = ag::silu(st.norm(st.down(x)));
      for (const auto& rb : st.blocks) x = rb(x);
    }
    return x;
  }

 private:
  struct Stage {
    Conv3d<T> down;
    GroupNorm<T> norm;
    std::vector<ResidualBlock<T>> blocks;
  };
  std::vector<Stage> stages_;
};

// ---------------------------------------------------------------------------
// Text encoder

template <class T>
struct TextLayer {
  LayerNorm<T> ln1, ln2;
  Linear<T> wq, wk, wv, wo, ff1, ff2;
};

/// Output of the text encoder for a batch: token features [N, L, d_r] and the
/// summary rows [N, d_r].
template <class T>
struct TextOutput {
  ag::Var<T> tokens;
  ag::Var<T> cls;
};

template <class T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng)
      : heads_(cfg.text_heads), max_tokens_(cfg.max_tokens) {
    const std::size_t d = cfg.d_r;
    tok_ = ps.embedding("text.token_embedding", {cfg.vocab_size, d}, rng);
    pos_ = ps.embedding("text.position_embedding", {cfg.max_tokens, d}, rng);
    for (std::size_t l = 0; l < cfg.text_layers; ++l) {
      const std::string p = "text.layer" + std::to_string(l);
      TextLayer<T> L;
      L.ln1 = LayerNorm<T>(ps, p + ".ln1", d);
      L.wq = Linear<T>(ps, p + ".attn.q", d, d, rng);
      L.wk = Linear<T>(ps, p + ".attn.k", d, d, rng, false);  // a key bias cancels in the softmax
      L.wv = Linear<T>(ps, p + ".attn.v", d, d, rng);
      L.wo = Linear<T>(ps, p + ".attn.out", d, d, rng);
      L.ln2 = LayerNorm<T>(ps, p + ".ln2", d);
      L.ff1 = Linear<T>(ps, p + ".ffn.fc1", d, cfg.ffn_mult * d, rng);
      L.ff2 = Linear<T>(ps, p + ".ffn.fc2", cfg.ffn_mult * d, d, rng);
      layers_.push_back(std::move(L));
    }
    final_ = LayerNorm<T>(ps, "text.ln_final", d);
  }

  /// ids and mask are n * max_tokens long, row-major per sequence.
  TextOutput<T> operator()(const std::vector<std::size_t>& ids, const std::vector<std::uint8_t>& mask,
                           std::size_t n) const {
    require(ids.size() == n * max_tokens_ && mask.size() == ids.size(), Errc::shape,
            "token batch does not match the configured sequence length " + std::to_string(max_tokens_));
    auto h = ag::add_tiled(ag::embedding(ids, n, max_tokens_, tok_), pos_);
    for (const auto& L : layers_) {
      auto a = L.ln1(h);
      auto att = ag::attention(L.wq(a), L.wk(a), L.wv(a), mask, heads_);
      h = ag::add(h, L.wo(att));
      auto f = L.ln2(h);
      h = ag::add(h, L.ff2(ag::gelu(L.ff1(f))));
    }
    auto tokens = final_(h);
    auto cls = ag::select_position(tokens, TokenSequence::cls_position);
    return {tokens, cls};
  }

  std::size_t max_tokens() const { return max_tokens_; }

 private:
  ag::Var<T> tok_, pos_;
  std::vector<TextLayer<T>> layers_;
  LayerNorm<T> final_;
  std::size_t heads_ = 1, max_tokens_ = 1;
};

}  // namespace t3d
