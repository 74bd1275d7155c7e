// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0
//
// The two alignment objectives.
//
// Global alignment: for a batch of B volume/report pairs with unit-norm embeddings,
//   L = -sum_i log softmax_j( <zv_i, zr_j> / tau )[i]
// anchored on the volume side; the symmetric variant averages in the report-
// anchored direction.
//
// Multi-view alignment: every local view of pair i is classified into one of B
// cluster slots, the target slot being i:
//   L = -sum_i sum_m log softmax( f(z_hat_i^m) / tau )[i]
//
// Both are sums (not means) over their terms and use max-subtracted log-sum-exp.

#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "t3d/autograd.hpp"
#include "t3d/encoders.hpp"
#include "t3d/error.hpp"

namespace t3d {

namespace detail {

inline std::vector<std::size_t> iota_targets(std::size_t n) {
  std::vector<std::size_t> t(n);
  std::iota(t.begin(), t.end(), std::size_t{0});
  return t;
}

template <class T>
void require_unit_rows(const EmbeddingBatch<T>& e, const char* which) {
  require(e.normalized, Errc::precondition, std::string(which) + " embeddings are not flagged normalized");
  const T tol = T(1e-6) + T(64) * std::numeric_limits<T>::epsilon();
  for (std::size_t i = 0; i < e.rows(); ++i) {
    T ss = 0;
    for (std::size_t k = 0; k < e.width(); ++k) ss += e.row(i)[k] * e.row(i)[k];
    require(std::abs(std::sqrt(ss) - T(1)) <= tol, Errc::precondition,
            std::string(which) + " row " + std::to_string(i) + " is not unit norm");
  }
}

}  // namespace detail

/// Graph form of the global alignment loss; zv and zr are [B, D] unit rows.
template <class T>
ag::Var<T> gca_objective(const ag::Var<T>& zv, const ag::Var<T>& zr, T tau, bool symmetric) {
  require(tau > T(0), Errc::config, "temperature must be positive");
  require(zv->value.rank() == 2 && zv->shape() == zr->shape(), Errc::shape,
          "global alignment needs equal [B, D] embeddings, got " + to_string(zv->shape()) + " and " +
              to_string(zr->shape()));
  const auto targets = detail::iota_targets(zv->value.dim(0));
  auto image_anchored = ag::cross_entropy_sum(ag::scale(ag::matmul_nt(zv, zr), T(1) / tau), targets);
  if (!symmetric) return image_anchored;
  auto text_anchored = ag::cross_entropy_sum(ag::scale(ag::matmul_nt(zr, zv), T(1) / tau), targets);
  return ag::scale(ag::add(image_anchored, text_anchored), T(0.5));
}

/// Graph form of the multi-view loss. logits is [B*M, B] with row i*M + m holding
/// view m of pair i.
template <class T>
ag::Var<T> tma_objective(const ag::Var<T>& logits, std::size_t views, T tau) {
  require(tau > T(0), Errc::config, "temperature must be positive");
  require(logits->value.rank() == 2 && views >= 1, Errc::shape, "cluster logits must be rank 2");
  const std::size_t b = logits->value.dim(1);
  require(logits->value.dim(0) == b * views, Errc::shape,
          "cluster logits " + to_string(logits->shape()) + " do not match " + std::to_string(views) + " views");
  std::vector<std::size_t> targets(b * views);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t m = 0; m < views; ++m) targets[i * views + m] = i;
  return ag::cross_entropy_sum(ag::scale(logits, T(1) / tau), targets);
}

/// Global alignment loss on materialized embeddings.
template <class T>
T gca_loss(const EmbeddingBatch<T>& zv, const EmbeddingBatch<T>& zr, T tau, bool symmetric = false) {
  require(zv.values.rank() == 2 && zr.values.rank() == 2, Errc::shape, "embeddings must be rank 2");
  require(zv.rows() == zr.rows() && zv.rows() >= 1, Errc::shape,
          "batch size mismatch: " + std::to_string(zv.rows()) + " volumes vs " + std::to_string(zr.rows()) +
              " reports");
  require(zv.width() == zr.width(), Errc::shape, "embedding width mismatch");
  detail::require_unit_rows(zv, "volume");
  detail::require_unit_rows(zr, "report");
  ag::NoGradGuard guard;
  return ag::item(gca_objective(ag::constant(zv.values), ag::constant(zr.values), tau, symmetric));
}

/// Multi-view loss on materialized logits [B, M, B].
template <class T>
T tma_loss(const Tensor<T>& logits, T tau) {
  require(logits.rank() == 3 && logits.dim(0) == logits.dim(2) && logits.dim(0) >= 1 && logits.dim(1) >= 1,
          Errc::shape, "cluster logits must be [B, M, B], got " + to_string(logits.shape));
  for (T v : logits.data) require(std::isfinite(v), Errc::precondition, "non-finite cluster logit");
  const std::size_t b = logits.dim(0), m = logits.dim(1);
  ag::NoGradGuard guard;
  auto flat = ag::constant(Tensor<T>({b * m, b}, logits.data));
  return ag::item(tma_objective(flat, m, tau));
}

struct LossBreakdown {
  double gca = 0;
  double tma = 0;
  double total = 0;
};

}  // namespace t3d
