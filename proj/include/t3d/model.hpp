// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0
//
// The full dual encoder: visual backbone, text transformer, the two shared-space
// projections, the fusion block and the cluster head, all registered in one
// parameter store. Free functions at the bottom are the tensor-in/tensor-out
// entry points used by evaluation and tests.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "t3d/autograd.hpp"
#include "t3d/encoders.hpp"
#include "t3d/fusion.hpp"
#include "t3d/params.hpp"
#include "t3d/rng.hpp"
#include "t3d/tokenizer.hpp"
#include "t3d/volume.hpp"

namespace t3d {

/// Packs volumes of identical dims into an [N, 1, S, H, W] tensor.
template <class T>
Tensor<T> volumes_to_tensor(const std::vector<const Volume*>& vols) {
  require(!vols.empty(), Errc::shape, "empty volume batch");
  const Index3 dims = vols.front()->dims;
  Tensor<T> out({vols.size(), 1, dims[2], dims[1], dims[0]});
  const std::size_t per = vols.front()->size();
  for (std::size_t i = 0; i < vols.size(); ++i) {
    const Volume& v = *vols[i];
    require(v.dims == dims, Errc::shape,
            "mixed volume dims in one batch: " + to_string(dims) + " vs " + to_string(v.dims));
    require(v.unit_range, Errc::precondition, "encoder input must be normalized to [0, 1]");
    for (std::size_t k = 0; k < per; ++k) out.data[i * per + k] = static_cast<T>(v.voxels[k]);
  }
  return out;
}

/// Flattens token sequences into id and mask arrays.
inline void pack_tokens(const std::vector<const TokenSequence*>& seqs, std::size_t max_tokens,
                        std::vector<std::size_t>& ids, std::vector<std::uint8_t>& mask) {
  ids.clear();
  mask.clear();
  for (const TokenSequence* s : seqs) {
    require(s->length() == max_tokens, Errc::shape,
            "token sequence of length " + std::to_string(s->length()) + " but the model expects " +
                std::to_string(max_tokens));
    ids.insert(ids.end(), s->ids.begin(), s->ids.end());
    mask.insert(mask.end(), s->mask.begin(), s->mask.end());
  }
}

/// Repeats each of n rows `times` times in place: row i -> rows i*times .. i*times+times-1.
inline std::vector<std::size_t> repeat_index(std::size_t n, std::size_t times) {
  std::vector<std::size_t> idx(n * times);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < times; ++m) idx[i * times + m] = i;
  return idx;
}

template <class T>
class T3DModel {
 public:
  explicit T3DModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    visual_ = VisualEncoder<T>(ps_, cfg_, rng);
    text_ = TextEncoder<T>(ps_, cfg_, rng);
    proj_v_ = Linear<T>(ps_, "proj_visual", cfg_.feature_dim(), cfg_.d_shared, rng);
    proj_r_ = Linear<T>(ps_, "proj_text", cfg_.d_r, cfg_.d_shared, rng);
    fusion_ = FusionBlock<T>(ps_, cfg_, rng);
    head_ = ClusterHead<T>(ps_, cfg_, rng);
  }

  T3DModel(const T3DModel&) = delete;
  T3DModel& operator=(const T3DModel&) = delete;
  T3DModel(T3DModel&&) = default;
  T3DModel& operator=(T3DModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  const Linear<T>& visual_projection() const { return proj_v_; }
  const Linear<T>& text_projection() const { return proj_r_; }
  const FusionBlock<T>& fusion() const { return fusion_; }
  const ClusterHead<T>& cluster_head() const { return head_; }

  void freeze_text(bool frozen) { ps_.set_trainable("text.", !frozen); }

  // -- graph builders ------------------------------------------------------

  /// [N, 1, S, H, W] -> [N, d_f, s, h, w]
  ag::Var<T> features(const ag::Var<T>& x) const { return visual_(x); }

  /// [N, d_f, s, h, w] -> unit rows [N, D]
  ag::Var<T> global_embedding(const ag::Var<T>& fmap) const {
    return ag::l2_normalize_rows(proj_v_(spatial_mean(fmap)));
  }

  TextOutput<T> text(const std::vector<std::size_t>& ids, const std::vector<std::uint8_t>& mask,
                     std::size_t n) const {
    return text_(ids, mask, n);
  }

  /// [N, d_r] -> unit rows [N, D]
  ag::Var<T> text_embedding(const ag::Var<T>& cls) const { return ag::l2_normalize_rows(proj_r_(cls)); }

  /// Local embeddings of view feature maps [N*M, d_f, s, h, w]. Row r is refined
  /// with the report tokens of sample r / M. Without text-informing the view
  /// tokens are only mean-pooled.
  ag::Var<T> local_embedding(const ag::Var<T>& view_maps, const ag::Var<T>& text_tokens,
                             const std::vector<std::uint8_t>& text_mask, std::size_t views) const {
    if (!cfg_.text_informing) return spatial_mean(view_maps);
    const std::size_t rows = view_maps->value.dim(0);
    const std::size_t n = text_tokens->value.dim(0), len = text_tokens->value.dim(1);
    require(rows == n * views, Errc::shape, "view count does not match the report batch");
    const auto idx = repeat_index(n, views);
    std::vector<std::uint8_t> mask(rows * len);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(text_mask.begin() + idx[r] * len, len, mask.begin() + r * len);
    return fusion_(view_tokens(view_maps), ag::gather_rows(text_tokens, idx), mask);
  }

  ag::Var<T> cluster_logits(const ag::Var<T>& z_hat, std::size_t active) const { return head_(z_hat, active); }

  /// Mean over spatial positions: [N, C, ...] -> [N, C].
  static ag::Var<T> spatial_mean(const ag::Var<T>& fmap) {
    const std::size_t n = fmap->value.dim(0), c = fmap->value.dim(1);
    const std::size_t p = fmap->numel() / (n * c);
    return ag::mean_mid(fmap, n * c, p, 1, {n, c});
  }

  /// [N, d_f, s, h, w] -> [N, L_v, d_f] with L_v = s*h*w.
  static ag::Var<T> view_tokens(const ag::Var<T>& fmap) {
    const std::size_t n = fmap->value.dim(0), c = fmap->value.dim(1);
    const std::size_t p = fmap->numel() / (n * c);
    return ag::transpose_last2(fmap, n, c, p, {n, p, c});
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> ps_;
  VisualEncoder<T> visual_;
  TextEncoder<T> text_;
  Linear<T> proj_v_, proj_r_;
  FusionBlock<T> fusion_;
  ClusterHead<T> head_;
};

// ---------------------------------------------------------------------------
// Inference entry points

template <class T>
std::vector<FeatureMap<T>> encode_volume(const std::vector<const Volume*>& vols, const T3DModel<T>& model,
                                         Provenance provenance = Provenance::global_volume) {
  ag::NoGradGuard guard;
  auto f = model.features(ag::constant(volumes_to_tensor<T>(vols)));
  const std::size_t n = f->value.dim(0);
  const std::size_t per = f->numel() / n;
  Shape shape(f->shape().begin() + 1, f->shape().end());
  std::vector<FeatureMap<T>> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({Tensor<T>(shape, std::vector<T>(f->value.data.begin() + i * per,
                                                   f->value.data.begin() + (i + 1) * per)),
                   provenance});
  return out;
}

template <class T>
std::vector<FeatureMap<T>> encode_volume(const std::vector<Volume>& vols, const T3DModel<T>& model,
                                         Provenance provenance = Provenance::global_volume) {
  std::vector<const Volume*> ptrs;
  for (const auto& v : vols) ptrs.push_back(&v);
  return encode_volume(ptrs, model, provenance);
}

/// Average pool, project, normalize.
template <class T>
EmbeddingBatch<T> pool_project_visual(const FeatureMap<T>& f, const Linear<T>& proj) {
  require(f.values.rank() == 4 && f.values.numel() > 0, Errc::shape, "feature map must be [d_f, s, h, w]");
  ag::NoGradGuard guard;
  Shape s{1};
  s.insert(s.end(), f.values.shape.begin(), f.values.shape.end());
  auto x = ag::constant(Tensor<T>(s, f.values.data));
  auto z = ag::l2_normalize_rows(proj(T3DModel<T>::spatial_mean(x)));
  return {z->value, true};
}

template <class T>
EmbeddingBatch<T> pool_project_visual(const FeatureMap<T>& f, const T3DModel<T>& model) {
  return pool_project_visual(f, model.visual_projection());
}

template <class T>
std::vector<TextFeatures<T>> encode_text(const std::vector<TokenSequence>& seqs, const T3DModel<T>& model) {
  require(!seqs.empty(), Errc::shape, "empty token batch");
  std::vector<const TokenSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> mask;
  pack_tokens(ptrs, model.config().max_tokens, ids, mask);
  ag::NoGradGuard guard;
  auto out = model.text(ids, mask, seqs.size());
  const std::size_t len = model.config().max_tokens, d = model.config().d_r;
  std::vector<TextFeatures<T>> res;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    TextFeatures<T> tf;
    tf.tokens = Tensor<T>({len, d}, std::vector<T>(out.tokens->value.data.begin() + i * len * d,
                                                   out.tokens->value.data.begin() + (i + 1) * len * d));
    tf.cls.assign(out.cls->value.data.begin() + i * d, out.cls->value.data.begin() + (i + 1) * d);
    tf.mask = seqs[i].mask;
    res.push_back(std::move(tf));
  }
  return res;
}

/// Linear map then L2 normalization of one summary vector.
template <class T>
std::vector<T> project_text(const std::vector<T>& cls, const Linear<T>& proj) {
  ag::NoGradGuard guard;
  auto z = ag::l2_normalize_rows(proj(ag::constant(Tensor<T>({1, cls.size()}, cls))));
  return z->value.data;
}

template <class T>
std::vector<T> project_text(const std::vector<T>& cls, const T3DModel<T>& model) {
  return project_text(cls, model.text_projection());
}

/// Refines one view's tokens [L_v, d_f] with one report and mean-pools to d_f.
template <class T>
std::vector<T> fuse_text_informed(const Tensor<T>& v_seq, const TextFeatures<T>& text, const FusionBlock<T>& block) {
  require(v_seq.rank() == 2 && v_seq.dim(0) >= 1, Errc::shape, "visual tokens must be [L_v, d_f] with L_v >= 1");
  require(text.tokens.rank() == 2 && text.mask.size() == text.tokens.dim(0), Errc::shape,
          "text tokens and mask disagree");
  ag::NoGradGuard guard;
  auto v = ag::constant(Tensor<T>({1, v_seq.dim(0), v_seq.dim(1)}, v_seq.data));
  auto t = ag::constant(Tensor<T>({1, text.tokens.dim(0), text.tokens.dim(1)}, text.tokens.data));
  return block(v, t, text.mask)->value.data;
}

template <class T>
std::vector<T> cluster_logits(const std::vector<T>& z_hat, const ClusterHead<T>& head, std::size_t active_b) {
  ag::NoGradGuard guard;
  return head(ag::constant(Tensor<T>({1, z_hat.size()}, z_hat)), active_b)->value.data;
}

}  // namespace t3d
