// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "t3d/error.hpp"
#include "t3d/params.hpp"

namespace t3d {

struct Schedule {
  double base_lr = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;
};

/// Linear warmup from zero, then half-cosine decay to zero at total_steps.
inline double lr_at(std::size_t step, const Schedule& s) {
  if (step < s.warmup_steps) return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (s.total_steps <= s.warmup_steps) return step == s.warmup_steps ? s.base_lr : 0.0;
  double progress = static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  progress = std::min(progress, 1.0);
  return std::max(0.0, s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <class T>
double clip_grad_norm(ParamStore<T>& ps, double max_norm) {
  double ss = 0;
  for (auto& p : ps.all())
    for (T g : p.var->grad) ss += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : ps.all())
      for (T& g : p.var->grad) g *= factor;
  }
  return norm;
}

/// Adam with decoupled weight decay. Moments are kept per parameter in store
/// order. Parameters that are frozen or received no gradient are left untouched.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamStore<T>& ps, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& p : ps.all()) {
      m_.emplace_back(p.var->numel(), T(0));
      v_.emplace_back(p.var->numel(), T(0));
    }
  }

  void step(ParamStore<T>& ps, double lr) {
    require(ps.size() == m_.size(), Errc::shape, "optimizer state does not match the parameter store");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(cfg_.eps);
    const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto& p = ps.all()[k];
      if (!p.var->requires_grad || !p.var->has_grad()) continue;
      auto& w = p.var->value.data;
      const auto& g = p.var->grad;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        if (p.decay) w[i] *= decay;
        w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
      }
    }
  }

  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace t3d
