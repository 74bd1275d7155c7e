// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "t3d/autograd.hpp"
#include "t3d/error.hpp"
#include "t3d/rng.hpp"
#include "t3d/tensor.hpp"

namespace t3d {

template <class T>
struct Parameter {
  std::string name;
  ag::Var<T> var;
  bool decay = true;  // false for biases and normalization affines

  Tensor<T>& value() { return var->value; }
  const Tensor<T>& value() const { return var->value; }
};

/// Ordered registry of named trainable tensors. Insertion order is the
/// serialization and optimizer order.
template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  ag::Var<T> add(std::string name, Tensor<T> init, bool decay) {
    for (const auto& p : params_)
      require(p.name != name, Errc::config, "duplicate parameter name '" + name + "'");
    auto var = ag::leaf(std::move(init), true);
    params_.push_back({std::move(name), var, decay});
    return var;
  }

  /// Truncated-normal weight with standard deviation gain / sqrt(fan_in).
  ag::Var<T> weight(std::string name, Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
    Tensor<T> t(std::move(shape));
    const double sd = gain / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<T>(truncated_normal(rng, sd));
    return add(std::move(name), std::move(t), true);
  }

  ag::Var<T> embedding(std::string name, Shape shape, Rng& rng, double sd = 0.02) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(truncated_normal(rng, sd));
    return add(std::move(name), std::move(t), true);
  }

  ag::Var<T> filled(std::string name, Shape shape, T value) {
    return add(std::move(name), Tensor<T>(std::move(shape), value), false);
  }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var->numel();
    return n;
  }

  /// Drops accumulated gradients. A parameter left without a gradient after the
  /// next backward pass did not take part in the loss.
  void zero_grad() {
    for (auto& p : params_) p.var->grad.clear();
  }

  /// Toggles trainability for every parameter whose name starts with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) p.var->requires_grad = trainable;
  }

 private:
  std::vector<Parameter<T>> params_;
};

// ---------------------------------------------------------------------------
// Building blocks

template <class T>
struct Linear {
  ag::Var<T> w, b;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool bias = true) {
    w = ps.weight(name + ".weight", {out, in}, in, rng);
    if (bias) b = ps.filled(name + ".bias", {out}, T(0));
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::linear(x, w, b); }
  std::size_t in_features() const { return w->value.dim(1); }
  std::size_t out_features() const { return w->value.dim(0); }
};

template <class T>
struct LayerNorm {
  ag::Var<T> gamma, beta;
  std::size_t width = 0;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t d) : width(d) {
    gamma = ps.filled(name + ".gamma", {d}, T(1));
    beta = ps.filled(name + ".beta", {d}, T(0));
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const {
    return ag::normalize_affine(x, width, width, 1, gamma, beta);
  }
};

}  // namespace t3d
