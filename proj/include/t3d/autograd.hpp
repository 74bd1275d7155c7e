// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense tensors.
//
// A forward pass builds a DAG of `Node`s. Every op records a backward closure that
// reads the node's output gradient and accumulates into the gradients of its parents.
// Leaves that own parameters persist across passes; intermediate nodes are released
// when the root goes out of scope. All kernels are single-threaded and use a fixed
// reduction order, so repeated passes are bit-identical.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <unordered_set>
#include <utility>
#include <vector>

#include "t3d/error.hpp"
#include "t3d/tensor.hpp"

namespace t3d::ag {

template <class T>
struct Node;

template <class T>
using Var = std::shared_ptr<Node<T>>;

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables graph construction for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;
  std::vector<Var<T>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  const Shape& shape() const { return value.shape; }
  std::size_t numel() const { return value.numel(); }

  std::vector<T>& g() {
    if (grad.size() != value.numel()) grad.assign(value.numel(), T(0));
    return grad;
  }
  bool has_grad() const { return !grad.empty(); }
};

template <class T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <class T>
Var<T> constant(Tensor<T> value) {
  return leaf(std::move(value), false);
}

template <class T, class F>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents, F&& fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_mode()) {
    bool any = std::any_of(parents.begin(), parents.end(),
                           [](const Var<T>& p) { return p && p->requires_grad; });
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::forward<F>(fn);
    }
  }
  return n;
}

/// Runs reverse accumulation from a scalar root.
template <class T>
void backward(const Var<T>& root) {
  require(root->numel() == 1, Errc::shape, "backward requires a scalar root");
  if (!root->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && p->backward_fn && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->g()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

template <class T>
T item(const Var<T>& v) {
  require(v->numel() == 1, Errc::shape, "item() on non-scalar of shape " + to_string(v->shape()));
  return v->value.data[0];
}

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;
template <class T>
using MapCM = Eigen::Map<const RowMat<T>>;

template <class T>
bool wants(const Var<T>& v) {
  return v && v->requires_grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  require(numel_of(shape) == x->numel(), Errc::shape,
          "cannot reshape " + to_string(x->shape()) + " to " + to_string(shape));
  Tensor<T> out(std::move(shape), x->value.data);
  return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& px = self.parents[0];
    auto& gx = px->g();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a->shape() == b->shape(), Errc::shape,
          "add shape mismatch " + to_string(a->shape()) + " vs " + to_string(b->shape()));
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a->value.data[i] + b->value.data[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& gp = p->g();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    }
  });
}

/// x + y where y is tiled over the leading axes of x (numel(y) divides numel(x)).
template <class T>
Var<T> add_tiled(const Var<T>& x, const Var<T>& y) {
  const std::size_t n = x->numel(), m = y->numel();
  require(m > 0 && n % m == 0, Errc::shape,
          "cannot tile " + to_string(y->shape()) + " over " + to_string(x->shape()));
  Tensor<T> out(x->shape());
  for (std::size_t i = 0; i < n; ++i) out.data[i] = x->value.data[i] + y->value.data[i % m];
  return make_node<T>(std::move(out), {x, y}, [m](Node<T>& self) {
    if (detail::wants(self.parents[0])) {
      auto& gx = self.parents[0]->g();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    }
    if (detail::wants(self.parents[1])) {
      auto& gy = self.parents[1]->g();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gy[i % m] += self.grad[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> out(x->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x->value.data[i] * s;
  return make_node<T>(std::move(out), {x}, [s](Node<T>& self) {
    auto& gx = self.parents[0]->g();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * s;
  });
}

template <class T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out(x->shape());
  std::vector<T> sig(x->numel());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = x->value.data[i];
    sig[i] = T(1) / (T(1) + std::exp(-v));
    out.data[i] = v * sig[i];
  }
  return make_node<T>(std::move(out), {x}, [sig = std::move(sig)](Node<T>& self) {
    auto& px = self.parents[0];
    auto& gx = px->g();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = px->value.data[i];
      gx[i] += self.grad[i] * sig[i] * (T(1) + v * (T(1) - sig[i]));
    }
  });
}

/// Exact (erf) GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  Tensor<T> out(x->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = x->value.data[i];
    out.data[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return make_node<T>(std::move(out), {x}, [inv_sqrt2](Node<T>& self) {
    auto& px = self.parents[0];
    auto& gx = px->g();
    const T inv_sqrt2pi = inv_sqrt2 / std::sqrt(std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = px->value.data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      gx[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

/// Swaps the last two axes of x viewed as [outer, rows, cols].
template <class T>
Var<T> transpose_last2(const Var<T>& x, std::size_t outer, std::size_t rows, std::size_t cols,
                       Shape out_shape) {
  require(outer * rows * cols == x->numel() && numel_of(out_shape) == x->numel(), Errc::shape,
          "transpose extent mismatch for " + to_string(x->shape()));
  Tensor<T> out(std::move(out_shape));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out.data[(o * cols + c) * rows + r] = x->value.data[(o * rows + r) * cols + c];
  return make_node<T>(std::move(out), {x}, [outer, rows, cols](Node<T>& self) {
    auto& gx = self.parents[0]->g();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          gx[(o * rows + r) * cols + c] += self.grad[(o * cols + c) * rows + r];
  });
}

/// Mean over the middle axis of x viewed as [outer, len, inner].
template <class T>
Var<T> mean_mid(const Var<T>& x, std::size_t outer, std::size_t len, std::size_t inner,
                Shape out_shape) {
  require(outer * len * inner == x->numel() && len > 0, Errc::shape,
          "mean extent mismatch for " + to_string(x->shape()));
  require(numel_of(out_shape) == outer * inner, Errc::shape, "mean output shape mismatch");
  Tensor<T> out(std::move(out_shape));
  const T inv = T(1) / static_cast<T>(len);
  for (std::size_t o = 0; o < outer; ++o) {
    T* dst = out.data.data() + o * inner;
    for (std::size_t l = 0; l < len; ++l) {
      const T* src = x->value.data.data() + (o * len + l) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
    for (std::size_t i = 0; i < inner; ++i) dst[i] *= inv;
  }
  return make_node<T>(std::move(out), {x}, [outer, len, inner, inv](Node<T>& self) {
    auto& gx = self.parents[0]->g();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i)
          gx[(o * len + l) * inner + i] += self.grad[o * inner + i] * inv;
  });
}

/// Picks rows (first-axis slices) of x by index; repeated indices are allowed.
template <class T>
Var<T> gather_rows(const Var<T>& x, const std::vector<std::size_t>& index) {
  require(x->value.rank() >= 1, Errc::shape, "gather_rows on a scalar");
  const std::size_t rows = x->value.dim(0);
  const std::size_t stride = rows ? x->numel() / rows : 0;
  Shape shape = x->shape();
  shape[0] = index.size();
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < index.size(); ++r) {
    require(index[r] < rows, Errc::shape, "gather index out of range");
    std::copy_n(x->value.data.data() + index[r] * stride, stride, out.data.data() + r * stride);
  }
  return make_node<T>(std::move(out), {x}, [index, stride](Node<T>& self) {
    auto& gx = self.parents[0]->g();
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t i = 0; i < stride; ++i) gx[index[r] * stride + i] += self.grad[r * stride + i];
  });
}

/// x[:, pos, :] for x of shape [N, L, D].
template <class T>
Var<T> select_position(const Var<T>& x, std::size_t pos) {
  require(x->value.rank() == 3 && pos < x->value.dim(1), Errc::shape, "select_position out of range");
  const std::size_t n = x->value.dim(0), len = x->value.dim(1), d = x->value.dim(2);
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x->value.data.data() + (i * len + pos) * d, d, out.data.data() + i * d);
  return make_node<T>(std::move(out), {x}, [n, len, d, pos](Node<T>& self) {
    auto& gx = self.parents[0]->g();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) gx[(i * len + pos) * d + k] += self.grad[i * d + k];
  });
}

/// Columns [0, count) of a rank-2 x.
template <class T>
Var<T> leading_columns(const Var<T>& x, std::size_t count) {
  require(x->value.rank() == 2 && count <= x->value.dim(1), Errc::shape, "leading_columns out of range");
  const std::size_t rows = x->value.dim(0), cols = x->value.dim(1);
  Tensor<T> out({rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x->value.data.data() + r * cols, count, out.data.data() + r * count);
  return make_node<T>(std::move(out), {x}, [rows, cols, count](Node<T>& self) {
    auto& gx = self.parents[0]->g();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) gx[r * cols + c] += self.grad[r * count + c];
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

/// y = x W^T + b over the last axis of x; W is [out, in], b is [out] or null.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  using namespace detail;
  require(w->value.rank() == 2, Errc::shape, "linear weight must be rank 2");
  const std::size_t out_f = w->value.dim(0), in_f = w->value.dim(1);
  require(x->value.rank() >= 1 && x->shape().back() == in_f, Errc::shape,
          "linear input " + to_string(x->shape()) + " does not match weight " + to_string(w->shape()));
  require(!b || b->numel() == out_f, Errc::shape, "linear bias width mismatch");
  const std::size_t rows = x->numel() / in_f;
  Shape shape = x->shape();
  shape.back() = out_f;
  Tensor<T> out(shape);
  {
    MapCM<T> X(x->value.data.data(), rows, in_f);
    MapCM<T> W(w->value.data.data(), out_f, in_f);
    MapM<T> Y(out.data.data(), rows, out_f);
    Y.noalias() = X * W.transpose();
    if (b) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b->value.data.data(), out_f);
      Y.rowwise() += bv;
    }
  }
  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(b);
  return make_node<T>(std::move(out), std::move(parents), [rows, in_f, out_f](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    MapCM<T> G(self.grad.data(), rows, out_f);
    if (px->requires_grad) {
      MapM<T> GX(px->g().data(), rows, in_f);
      MapCM<T> W(pw->value.data.data(), out_f, in_f);
      GX.noalias() += G * W;
    }
    if (pw->requires_grad) {
      MapM<T> GW(pw->g().data(), out_f, in_f);
      MapCM<T> X(px->value.data.data(), rows, in_f);
      GW.noalias() += G.transpose() * X;
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->g();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < out_f; ++c) gb[c] += self.grad[r * out_f + c];
    }
  });
}

/// a [N, D] times b [M, D] transposed -> [N, M].
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  using namespace detail;
  require(a->value.rank() == 2 && b->value.rank() == 2 && a->value.dim(1) == b->value.dim(1),
          Errc::shape, "matmul_nt shape mismatch " + to_string(a->shape()) + " vs " + to_string(b->shape()));
  const std::size_t n = a->value.dim(0), m = b->value.dim(0), d = a->value.dim(1);
  Tensor<T> out({n, m});
  MapM<T>(out.data.data(), n, m).noalias() =
      MapCM<T>(a->value.data.data(), n, d) * MapCM<T>(b->value.data.data(), m, d).transpose();
  return make_node<T>(std::move(out), {a, b}, [n, m, d](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    MapCM<T> G(self.grad.data(), n, m);
    if (pa->requires_grad)
      MapM<T>(pa->g().data(), n, d).noalias() += G * MapCM<T>(pb->value.data.data(), m, d);
    if (pb->requires_grad)
      MapM<T>(pb->g().data(), m, d).noalias() += G.transpose() * MapCM<T>(pa->value.data.data(), n, d);
  });
}

/// Row lookup: ids (length N*L) into table [V, D] -> [N, L, D].
template <class T>
Var<T> embedding(const std::vector<std::size_t>& ids, std::size_t n, std::size_t len,
                 const Var<T>& table) {
  require(table->value.rank() == 2, Errc::shape, "embedding table must be rank 2");
  require(ids.size() == n * len, Errc::shape, "embedding id count mismatch");
  const std::size_t vocab = table->value.dim(0), d = table->value.dim(1);
  Tensor<T> out({n, len, d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < vocab, Errc::vocab,
            "token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    std::copy_n(table->value.data.data() + ids[i] * d, d, out.data.data() + i * d);
  }
  return make_node<T>(std::move(out), {table}, [ids, d](Node<T>& self) {
    auto& gt = self.parents[0]->g();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) gt[ids[i] * d + k] += self.grad[i * d + k];
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Standardizes contiguous rows of `row` elements, then applies a per-channel
/// affine map. The channel of flat element i is (i / inner) % channels, which
/// covers layer norm (inner = 1) and group norm over [N, C, P] (inner = P).
template <class T>
Var<T> normalize_affine(const Var<T>& x, std::size_t row, std::size_t channels, std::size_t inner,
                        const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  require(row > 0 && x->numel() % row == 0, Errc::shape, "normalization row does not divide input");
  require(gamma->numel() == channels && beta->numel() == channels, Errc::shape,
          "normalization affine width mismatch");
  const std::size_t rows = x->numel() / row;
  Tensor<T> out(x->shape());
  std::vector<T> xhat(x->numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x->value.data.data() + r * row;
    T mean = 0;
    for (std::size_t i = 0; i < row; ++i) mean += src[i];
    mean /= static_cast<T>(row);
    T var = 0;
    for (std::size_t i = 0; i < row; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(row);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < row; ++i) {
      const std::size_t k = r * row + i;
      const std::size_t c = (k / inner) % channels;
      xhat[k] = (src[i] - mean) * rstd[r];
      out.data[k] = xhat[k] * gamma->value.data[c] + beta->value.data[c];
    }
  }
  return make_node<T>(
      std::move(out), {x, gamma, beta},
      [row, rows, channels, inner, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const T* dy = self.grad.data();
        if (pg->requires_grad || pb->requires_grad) {
          auto& gg = pg->g();
          auto& gb = pb->g();
          for (std::size_t k = 0; k < xhat.size(); ++k) {
            const std::size_t c = (k / inner) % channels;
            gg[c] += dy[k] * xhat[k];
            gb[c] += dy[k];
          }
        }
        if (px->requires_grad) {
          auto& gx = px->g();
          const T* gam = pg->value.data.data();
          std::vector<T> dxhat(row);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t i = 0; i < row; ++i) {
              const std::size_t k = r * row + i;
              dxhat[i] = dy[k] * gam[(k / inner) % channels];
              mean_d += dxhat[i];
              mean_dx += dxhat[i] * xhat[k];
            }
            mean_d /= static_cast<T>(row);
            mean_dx /= static_cast<T>(row);
            for (std::size_t i = 0; i < row; ++i) {
              const std::size_t k = r * row + i;
              gx[k] += rstd[r] * (dxhat[i] - mean_d - xhat[k] * mean_dx);
            }
          }
        }
      });
}

/// Scales each row of a rank-2 x to unit Euclidean norm.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  require(x->value.rank() == 2, Errc::shape, "l2_normalize_rows expects rank 2");
  const std::size_t n = x->value.dim(0), d = x->value.dim(1);
  Tensor<T> out(x->shape());
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T ss = 0;
    for (std::size_t k = 0; k < d; ++k) ss += x->value.data[i * d + k] * x->value.data[i * d + k];
    norms[i] = std::sqrt(ss);
    require(norms[i] > std::numeric_limits<T>::min() && std::isfinite(norms[i]), Errc::degenerate_norm,
            "cannot normalize a zero or non-finite vector (row " + std::to_string(i) + ")");
    for (std::size_t k = 0; k < d; ++k) out.data[i * d + k] = x->value.data[i * d + k] / norms[i];
  }
  return make_node<T>(std::move(out), {x}, [n, d, norms = std::move(norms)](Node<T>& self) {
    auto& gx = self.parents[0]->g();
    const auto& y = self.value.data;
    for (std::size_t i = 0; i < n; ++i) {
      T dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += y[i * d + k] * self.grad[i * d + k];
      for (std::size_t k = 0; k < d; ++k)
        gx[i * d + k] += (self.grad[i * d + k] - y[i * d + k] * dot) / norms[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Sum over rows of -log softmax(logits[r])[target[r]], with max subtraction.
template <class T>
Var<T> cross_entropy_sum(const Var<T>& logits, const std::vector<std::size_t>& targets) {
  require(logits->value.rank() == 2, Errc::shape, "cross_entropy expects rank-2 logits");
  const std::size_t rows = logits->value.dim(0), cols = logits->value.dim(1);
  require(targets.size() == rows, Errc::shape, "cross_entropy target count mismatch");
  std::vector<T> prob(rows * cols);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    require(targets[r] < cols, Errc::shape, "cross_entropy target out of range");
    const T* z = logits->value.data.data() + r * cols;
    const T mx = *std::max_element(z, z + cols);
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(z[c] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t c = 0; c < cols; ++c) prob[r * cols + c] = std::exp(z[c] - lse);
    total += lse - z[targets[r]];
  }
  Tensor<T> out({1}, std::vector<T>{total});
  return make_node<T>(std::move(out), {logits},
                      [rows, cols, targets, prob = std::move(prob)](Node<T>& self) {
                        auto& gz = self.parents[0]->g();
                        const T g = self.grad[0];
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t c = 0; c < cols; ++c) gz[r * cols + c] += g * prob[r * cols + c];
                          gz[r * cols + targets[r]] -= g;
                        }
                      });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention.
///
/// q is [N, Lq, D]; k and v are [N, Lk, D] (already projected). `key_mask` holds
/// N*Lk flags, nonzero = attendable; an empty mask means every key is valid.
/// Masked keys are skipped outright, so their values never enter any sum.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                 const std::vector<std::uint8_t>& key_mask, std::size_t heads) {
  require(q->value.rank() == 3 && k->value.rank() == 3 && v->value.rank() == 3, Errc::shape,
          "attention expects rank-3 inputs");
  const std::size_t n = q->value.dim(0), lq = q->value.dim(1), dm = q->value.dim(2);
  const std::size_t lk = k->value.dim(1);
  require(k->value.dim(0) == n && v->value.dim(0) == n && k->value.dim(2) == dm &&
              v->value.dim(2) == dm && v->value.dim(1) == lk,
          Errc::shape, "attention operand shapes disagree");
  require(heads > 0 && dm % heads == 0, Errc::shape, "model width not divisible by head count");
  require(key_mask.empty() || key_mask.size() == n * lk, Errc::shape, "attention mask size mismatch");
  const std::size_t dh = dm / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  auto valid = [&key_mask, lk](std::size_t b, std::size_t j) {
    return key_mask.empty() || key_mask[b * lk + j] != 0;
  };
  for (std::size_t b = 0; b < n; ++b) {
    bool any = false;
    for (std::size_t j = 0; j < lk; ++j) any = any || valid(b, j);
    require(any, Errc::degenerate_attention, "every key is masked for batch row " + std::to_string(b));
  }

  const T* Q = q->value.data.data();
  const T* K = k->value.data.data();
  const T* V = v->value.data.data();
  Tensor<T> out({n, lq, dm});
  std::vector<T> prob(n * heads * lq * lk, T(0));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < lq; ++i) {
        T* p = prob.data() + ((b * heads + h) * lq + i) * lk;
        const T* qi = Q + (b * lq + i) * dm + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < lk; ++j) {
          if (!valid(b, j)) continue;
          const T* kj = K + (b * lk + j) * dm + h * dh;
          T s = 0;
          for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
          p[j] = s * sc;
          mx = std::max(mx, p[j]);
        }
        T sum = 0;
        for (std::size_t j = 0; j < lk; ++j) {
          if (!valid(b, j)) continue;
          p[j] = std::exp(p[j] - mx);
          sum += p[j];
        }
        T* oi = out.data.data() + (b * lq + i) * dm + h * dh;
        for (std::size_t j = 0; j < lk; ++j) {
          if (!valid(b, j)) continue;
          p[j] /= sum;
          const T* vj = V + (b * lk + j) * dm + h * dh;
          for (std::size_t d = 0; d < dh; ++d) oi[d] += p[j] * vj[d];
        }
      }
    }
  }

  return make_node<T>(
      std::move(out), {q, k, v},
      [n, lq, lk, dm, dh, heads, sc, key_mask, prob = std::move(prob)](Node<T>& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        const T* Q = pq->value.data.data();
        const T* K = pk->value.data.data();
        const T* V = pv->value.data.data();
        T* GQ = pq->requires_grad ? pq->g().data() : nullptr;
        T* GK = pk->requires_grad ? pk->g().data() : nullptr;
        T* GV = pv->requires_grad ? pv->g().data() : nullptr;
        std::vector<T> dp(lk);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < lq; ++i) {
              const T* p = prob.data() + ((b * heads + h) * lq + i) * lk;
              const T* go = self.grad.data() + (b * lq + i) * dm + h * dh;
              T dot = 0;
              for (std::size_t j = 0; j < lk; ++j) {
                const bool ok = key_mask.empty() || key_mask[b * lk + j] != 0;
                dp[j] = 0;
                if (!ok) continue;
                const T* vj = V + (b * lk + j) * dm + h * dh;
                for (std::size_t d = 0; d < dh; ++d) dp[j] += go[d] * vj[d];
                dot += dp[j] * p[j];
                if (GV) {
                  T* gvj = GV + (b * lk + j) * dm + h * dh;
                  for (std::size_t d = 0; d < dh; ++d) gvj[d] += p[j] * go[d];
                }
              }
              const T* qi = Q + (b * lq + i) * dm + h * dh;
              for (std::size_t j = 0; j < lk; ++j) {
                const bool ok = key_mask.empty() || key_mask[b * lk + j] != 0;
                if (!ok) continue;
                const T ds = p[j] * (dp[j] - dot) * sc;
                const T* kj = K + (b * lk + j) * dm + h * dh;
                if (GQ) {
                  T* gqi = GQ + (b * lq + i) * dm + h * dh;
                  for (std::size_t d = 0; d < dh; ++d) gqi[d] += ds * kj[d];
                }
                if (GK) {
                  T* gkj = GK + (b * lk + j) * dm + h * dh;
                  for (std::size_t d = 0; d < dh; ++d) gkj[d] += ds * qi[d];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// 3D convolution

struct ConvGeometry {
  std::size_t channels, depth, height, width;  // input
  std::size_t kernel, stride, pad;
  std::size_t out_depth, out_height, out_width;

  static std::size_t out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
    require(in + 2 * p >= k, Errc::shape, "convolution kernel larger than padded input");
    return (in + 2 * p - k) / s + 1;
  }

  ConvGeometry(std::size_t c, std::size_t d, std::size_t h, std::size_t w, std::size_t k,
               std::size_t s, std::size_t p)
      : channels(c), depth(d), height(h), width(w), kernel(k), stride(s), pad(p),
        out_depth(out_extent(d, k, s, p)), out_height(out_extent(h, k, s, p)),
        out_width(out_extent(w, k, s, p)) {}

  std::size_t in_volume() const { return depth * height * width; }
  std::size_t out_volume() const { return out_depth * out_height * out_width; }
  std::size_t patch() const { return channels * kernel * kernel * kernel; }
};

namespace detail {

/// Unfolds one sample [C, D, H, W] into columns [C*k^3, Do*Ho*Wo].
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t P = g.out_volume();
  const std::ptrdiff_t D = g.depth, H = g.height, W = g.width;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x + c * g.in_volume();
    for (std::size_t kz = 0; kz < g.kernel; ++kz)
      for (std::size_t ky = 0; ky < g.kernel; ++ky)
        for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
          T* dst = col + row * P;
          // output columns whose input x falls inside [0, W)
          const std::ptrdiff_t s = g.stride, off = std::ptrdiff_t(kx) - std::ptrdiff_t(g.pad);
          const std::ptrdiff_t Wo = g.out_width;
          const std::ptrdiff_t lo = std::min(Wo, off >= 0 ? 0 : (-off + s - 1) / s);
          const std::ptrdiff_t hi = std::max(lo, std::min(Wo, W - off > 0 ? (W - off + s - 1) / s : 0));
          for (std::size_t oz = 0; oz < g.out_depth; ++oz) {
            const std::ptrdiff_t iz = std::ptrdiff_t(oz * g.stride + kz) - std::ptrdiff_t(g.pad);
            for (std::size_t oy = 0; oy < g.out_height; ++oy, dst += Wo) {
              const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.pad);
              if (iz < 0 || iz >= D || iy < 0 || iy >= H) {
                std::fill(dst, dst + Wo, T(0));
                continue;
              }
              const T* src = xc + (iz * H + iy) * W + off;
              std::fill(dst, dst + lo, T(0));
              for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * s];
              std::fill(dst + hi, dst + Wo, T(0));
            }
          }
        }
  }
}

/// Adjoint of im2col: scatters columns back into [C, D, H, W] (accumulating).
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* x) {
  const std::ptrdiff_t D = g.depth, H = g.height, W = g.width;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* xc = x + c * g.in_volume();
    for (std::size_t kz = 0; kz < g.kernel; ++kz)
      for (std::size_t ky = 0; ky < g.kernel; ++ky)
        for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
          const T* src = col + row * g.out_volume();
          for (std::size_t oz = 0; oz < g.out_depth; ++oz) {
            const std::ptrdiff_t iz = std::ptrdiff_t(oz * g.stride + kz) - std::ptrdiff_t(g.pad);
            for (std::size_t oy = 0; oy < g.out_height; ++oy) {
              const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.pad);
              const bool plane_ok = iz >= 0 && iz < D && iy >= 0 && iy < H;
              T* dst = plane_ok ? xc + (iz * H + iy) * W : nullptr;
              for (std::size_t ox = 0; ox < g.out_width; ++ox, ++src) {
                const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.pad);
                if (plane_ok && ix >= 0 && ix < W) dst[ix] += *src;
              }
            }
          }
        }
  }
}

}  // namespace detail

/// Cubic-kernel 3D convolution. x is [N, C, D, H, W]; w is [O, C, k, k, k]; b is [O].
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride,
              std::size_t pad) {
  using namespace detail;
  require(x->value.rank() == 5 && w->value.rank() == 5, Errc::shape, "conv3d expects rank-5 operands");
  const std::size_t n = x->value.dim(0);
  const std::size_t out_c = w->value.dim(0);
  const std::size_t k = w->value.dim(2);
  require(w->value.dim(1) == x->value.dim(1) && w->value.dim(3) == k && w->value.dim(4) == k,
          Errc::shape, "conv3d weight " + to_string(w->shape()) + " does not fit input " + to_string(x->shape()));
  require(b && b->numel() == out_c, Errc::shape, "conv3d bias width mismatch");
  const ConvGeometry geo(x->value.dim(1), x->value.dim(2), x->value.dim(3), x->value.dim(4), k, stride, pad);
  const std::size_t P = geo.out_volume(), CK = geo.patch();

  Tensor<T> out({n, out_c, geo.out_depth, geo.out_height, geo.out_width});
  std::vector<T> col(CK * P);
  MapCM<T> W(w->value.data.data(), out_c, CK);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(b->value.data.data(), out_c);
  for (std::size_t s = 0; s < n; ++s) {
    im2col(x->value.data.data() + s * geo.channels * geo.in_volume(), geo, col.data());
    MapM<T> Y(out.data.data() + s * out_c * P, out_c, P);
    Y.noalias() = W * MapCM<T>(col.data(), CK, P);
    Y.colwise() += bias;
  }

  return make_node<T>(std::move(out), {x, w, b}, [geo, n, out_c](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    const std::size_t P = geo.out_volume(), CK = geo.patch();
    const std::size_t in_stride = geo.channels * geo.in_volume();
    std::vector<T> col(CK * P);
    MapCM<T> W(pw->value.data.data(), out_c, CK);
    for (std::size_t s = 0; s < n; ++s) {
      MapCM<T> G(self.grad.data() + s * out_c * P, out_c, P);
      if (pw->requires_grad) {
        im2col(px->value.data.data() + s * in_stride, geo, col.data());
        MapM<T>(pw->g().data(), out_c, CK).noalias() += G * MapCM<T>(col.data(), CK, P).transpose();
      }
      if (pb->requires_grad) {
        auto& gb = pb->g();
        for (std::size_t o = 0; o < out_c; ++o) gb[o] += G.row(o).sum();
      }
      if (px->requires_grad) {
        MapM<T>(col.data(), CK, P).noalias() = W.transpose() * G;
        col2im(col.data(), geo, px->g().data() + s * in_stride);
      }
    }
  });
}

}  // namespace t3d::ag
