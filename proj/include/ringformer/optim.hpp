#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "ringformer/errors.hpp"
#include "ringformer/tensor.hpp"

namespace ringformer {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update. An empty gradient tensor counts as zero.
/// Nothing is modified when any gradient holds a non-finite value.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
               AdamState<T>& state, double lr, const AdamConfig& cfg = {},
               const std::vector<std::string>* names = nullptr) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i]->empty() && grads[i]->shape() != params[i]->shape()) {
      throw DimensionError("adam_step: gradient " + shape_string(grads[i]->shape()) + " for parameter " +
                           shape_string(params[i]->shape()));
    }
    if (!grads[i]->all_finite()) {
      throw NumericError("adam_step: non-finite gradient for " +
                         (names ? (*names)[i] : "parameter #" + std::to_string(i)) + "; update rejected");
    }
  }
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.eps), rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    const bool has_grad = !grads[i]->empty();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T g = has_grad ? (*grads[i])[j] : T{0};
      m[j] = b1 * m[j] + (T{1} - b1) * g;
      v[j] = b2 * v[j] + (T{1} - b2) * g * g;
      const T m_hat = m[j] / c1;
      const T v_hat = v[j] / c2;
      p[j] -= rate * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

/// Linear warm-up from 0 to max_lr, then half-cosine decay to 0 at total_steps.
inline double cosine_warmup_lr(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps,
                               double max_lr) {
  if (step <= 0 && warmup_steps > 0) return 0.0;
  if (step <= warmup_steps) {
    return warmup_steps == 0 ? max_lr : max_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps) return 0.0;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Scales every gradient by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm measured before clipping.
template <typename T>
double clip_global_norm(const std::vector<Tensor<T>*>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto* g : grads)
    for (T v : g->values()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto* g : grads)
      for (auto& v : g->values()) v *= factor;
  }
  return norm;
}

}  // namespace ringformer
