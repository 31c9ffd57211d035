#pragma once

// Parameter bundles of the Transformer sub-layers and their layout entries.

#include <string>
#include <vector>

#include "ringformer/autograd.hpp"
#include "ringformer/functional.hpp"
#include "ringformer/params.hpp"

namespace ringformer {

inline void append_linear(std::vector<ParamSpec>& out, const std::string& prefix, const std::string& suffix,
                          std::size_t in, std::size_t outdim, ParamGroup group = ParamGroup::block) {
  out.push_back({prefix + ".w_" + suffix, {in, outdim}, group, false, InitKind::xavier, 0.0});
  out.push_back({prefix + ".b_" + suffix, {outdim}, group, true, InitKind::zeros, 0.0});
}

inline void append_attention(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t hidden) {
  for (const char* s : {"q", "k", "v", "o"}) append_linear(out, prefix, s, hidden, hidden);
}

inline void append_ffn(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t hidden, std::size_t ff) {
  append_linear(out, prefix, "up", hidden, ff);
  append_linear(out, prefix, "down", ff, hidden);
}

inline void append_norm(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t hidden) {
  out.push_back({prefix + ".gamma", {hidden}, ParamGroup::norm, false, InitKind::ones, 0.0});
  out.push_back({prefix + ".beta", {hidden}, ParamGroup::norm, false, InitKind::zeros, 0.0});
}

template <typename T>
struct AttentionParams {
  Var<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;

  static AttentionParams from(const ParamStore<T>& store, const std::string& prefix) {
    auto g = [&](const char* n) { return store.get(prefix + "." + n); };
    return {g("w_q"), g("b_q"), g("w_k"), g("b_k"), g("w_v"), g("b_v"), g("w_o"), g("b_o")};
  }

  AttentionProjections<T> tensors() const {
    return {w_q.value(), w_k.value(), w_v.value(), w_o.value(),
            b_q.value(), b_k.value(), b_v.value(), b_o.value()};
  }
};

template <typename T>
struct FfnParams {
  Var<T> w_up, b_up, w_down, b_down;

  static FfnParams from(const ParamStore<T>& store, const std::string& prefix) {
    auto g = [&](const char* n) { return store.get(prefix + "." + n); };
    return {g("w_up"), g("b_up"), g("w_down"), g("b_down")};
  }
};

template <typename T>
struct NormParams {
  Var<T> gamma, beta;

  static NormParams from(const ParamStore<T>& store, const std::string& prefix) {
    return {store.get(prefix + ".gamma"), store.get(prefix + ".beta")};
  }
};

}  // namespace ringformer
