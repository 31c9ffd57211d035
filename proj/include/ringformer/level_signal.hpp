#pragma once

// Depth-specific, input-dependent level signals g_i(x) = M_i x with
// M_i = A_i B_i^T kept factorized, plus the per-level layer norms that travel
// with them.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ringformer/autograd.hpp"
#include "ringformer/blocks.hpp"
#include "ringformer/config.hpp"
#include "ringformer/params.hpp"
#include "ringformer/rng.hpp"

namespace ringformer {

/// Which factor pairs a signal variant carries.
struct SignalSites {
  bool q = false, k = false, v = false, f = false;
  bool f_to_ff = false;  // f maps H -> FF (inter_ffn)

  std::size_t attention_pairs() const { return q + k + v; }
};

inline SignalSites signal_sites(SignalKind kind) {
  switch (kind) {
    case SignalKind::full:
    case SignalKind::before_attn: return {true, true, true, true, false};
    case SignalKind::static_sinusoidal: return {};
    case SignalKind::no_attn_signal: return {false, false, false, true, false};
    case SignalKind::no_ffn_signal: return {true, true, true, false, false};
    case SignalKind::inter_ffn: return {true, true, true, true, true};
  }
  return {};
}

/// A is [out x r], B is [in x r]; applied as (x B) A^T.
template <typename T>
struct LowRankFactorPair {
  Var<T> a;
  Var<T> b;

  std::size_t rank() const { return a.value().dim(1); }
  std::size_t in_dim() const { return b.value().dim(0); }
  std::size_t out_dim() const { return a.value().dim(0); }
};

template <typename T>
struct LevelSignalSet {
  std::optional<LowRankFactorPair<T>> q, k, v, f;
  NormParams<T> ln_attn;
  std::optional<NormParams<T>> ln_cross;
  std::optional<NormParams<T>> ln_ffn;

  static LevelSignalSet from(const ParamStore<T>& store, const std::string& prefix) {
    LevelSignalSet set;
    auto pair = [&](const char* which) -> std::optional<LowRankFactorPair<T>> {
      const std::string base = prefix + ".signal_" + which;
      if (!store.contains(base + ".a")) return std::nullopt;
      return LowRankFactorPair<T>{store.get(base + ".a"), store.get(base + ".b")};
    };
    set.q = pair("q");
    set.k = pair("k");
    set.v = pair("v");
    set.f = pair("f");
    set.ln_attn = NormParams<T>::from(store, prefix + ".ln_attn");
    if (store.contains(prefix + ".ln_cross.gamma")) set.ln_cross = NormParams<T>::from(store, prefix + ".ln_cross");
    if (store.contains(prefix + ".ln_ffn.gamma")) set.ln_ffn = NormParams<T>::from(store, prefix + ".ln_ffn");
    return set;
  }
};

inline void append_signal_pair(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in,
                               std::size_t outdim, std::size_t rank) {
  out.push_back({prefix + ".a", {outdim, rank}, ParamGroup::signal, false, InitKind::normal,
                 1.0 / std::sqrt(static_cast<double>(rank))});
  out.push_back({prefix + ".b", {in, rank}, ParamGroup::signal, false, InitKind::zeros, 0.0});
}

/// Layout of per-level signal pairs and norms for one stack:
/// {prefix}.{i}.signal_{q,k,v,f}.{a,b} and {prefix}.{i}.ln_{attn,cross,ffn}.{gamma,beta}.
inline void append_level_signal_layout(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t hidden,
                                       std::size_t ff, std::size_t levels, const RankPolicy& policy,
                                       SignalKind kind, bool with_cross_ln, bool with_ffn = true) {
  const SignalSites sites = signal_sites(kind);
  const std::size_t rank = (sites.attention_pairs() || sites.f) ? policy.rank_for(hidden) : 0;
  for (std::size_t i = 0; i < levels; ++i) {
    const std::string level = prefix + "." + std::to_string(i);
    if (sites.q) append_signal_pair(out, level + ".signal_q", hidden, hidden, rank);
    if (sites.k) append_signal_pair(out, level + ".signal_k", hidden, hidden, rank);
    if (sites.v) append_signal_pair(out, level + ".signal_v", hidden, hidden, rank);
    if (sites.f && with_ffn) append_signal_pair(out, level + ".signal_f", hidden, sites.f_to_ff ? ff : hidden, rank);
    append_norm(out, level + ".ln_attn", hidden);
    if (with_cross_ln) append_norm(out, level + ".ln_cross", hidden);
    if (with_ffn) append_norm(out, level + ".ln_ffn", hidden);
  }
}

/// Fresh per-level signal sets: A ~ N(0, 1/r), B = 0, gamma = 1, beta = 0.
template <typename T>
std::vector<LevelSignalSet<T>> make_level_signals(std::size_t hidden, std::size_t ff, std::size_t levels,
                                                  const RankPolicy& policy, SignalKind kind, bool with_cross_ln,
                                                  Rng& rng) {
  if (hidden < 1 || levels < 1) throw ConfigError("level signals need hidden >= 1 and levels >= 1");
  std::vector<ParamSpec> layout;
  append_level_signal_layout(layout, "levels", hidden, ff, levels, policy, kind, with_cross_ln);
  const ParamStore<T> store = ParamStore<T>::allocate(layout, rng);
  std::vector<LevelSignalSet<T>> sets;
  for (std::size_t i = 0; i < levels; ++i) sets.push_back(LevelSignalSet<T>::from(store, "levels." + std::to_string(i)));
  return sets;
}

/// g(x) = (x B) A^T, never materializing A B^T.
template <typename T>
Var<T> apply_signal(const LowRankFactorPair<T>& pair, const Var<T>& x) {
  if (x.cols() != pair.in_dim()) {
    throw DimensionError("apply_signal: input " + shape_string(x.shape()) + " for factor B " +
                         shape_string(pair.b.shape()));
  }
  return matmul(matmul(x, pair.b), pair.a, /*transpose_b=*/true);
}

template <typename T>
Tensor<T> apply_signal(const LowRankFactorPair<T>& pair, const Tensor<T>& x) {
  NoGradGuard guard;
  return apply_signal(pair, constant(x)).value();
}

/// Parameter count of the level signals of a model, split into factor pairs
/// and per-level norms (2H per norm site).
struct SignalCount {
  std::size_t pairs = 0;
  std::size_t norms = 0;
  std::size_t total() const { return pairs + norms; }
};

inline SignalCount signal_param_count(std::size_t hidden, std::size_t ff, const RankPolicy& policy, SignalKind kind,
                                      std::size_t levels, ModelMode mode) {
  const SignalSites sites = signal_sites(kind);
  const std::size_t r = (sites.attention_pairs() || sites.f) ? policy.rank_for(hidden) : 0;
  const std::size_t square_pair = 2 * hidden * r;
  const std::size_t f_pair = sites.f_to_ff ? (hidden + ff) * r : square_pair;
  const std::size_t per_level_pairs = sites.attention_pairs() * square_pair + (sites.f ? f_pair : 0);
  const std::size_t stacks = mode == ModelMode::encoder_decoder ? 2 : 1;
  const std::size_t norm_sites = mode == ModelMode::encoder_decoder ? 2 + 3 : 2;
  return {stacks * levels * per_level_pairs, levels * norm_sites * 2 * hidden};
}

}  // namespace ringformer
