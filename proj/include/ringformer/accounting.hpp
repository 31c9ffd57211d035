#pragma once

// Parameter and multiply-accumulate accounting. Counts come from enumerating
// the parameter layout; closed_form_param_count is an independent algebraic
// route used to cross-check it.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ringformer/config.hpp"
#include "ringformer/level_signal.hpp"
#include "ringformer/model.hpp"

namespace ringformer {

enum class CountConvention { weights_only, with_biases };
enum class CountExclusions { none, embeddings_and_head };

inline std::string_view to_string(CountConvention c) {
  return c == CountConvention::weights_only ? "weights_only" : "with_biases";
}

inline std::string_view to_string(CountExclusions e) {
  return e == CountExclusions::none ? "none" : "embeddings_and_head";
}

struct ParamCountReport {
  // attention, cross_attention, ffn, norms, signals, embeddings, head
  std::vector<std::pair<std::string, std::size_t>> components;
  std::size_t total = 0;

  std::size_t component(const std::string& name) const {
    for (const auto& [n, c] : components)
      if (n == name) return c;
    return 0;
  }
};

inline std::string param_component(const ParamSpec& spec) {
  switch (spec.group) {
    case ParamGroup::signal: return "signals";
    case ParamGroup::norm: return "norms";
    case ParamGroup::embedding: return "embeddings";
    case ParamGroup::head: return "head";
    case ParamGroup::block: break;
  }
  if (spec.name.find(".cross_attn.") != std::string::npos) return "cross_attention";
  if (spec.name.find(".self_attn.") != std::string::npos) return "attention";
  return "ffn";
}

inline bool counted(const ParamSpec& spec, CountConvention convention, CountExclusions exclusions) {
  if (convention == CountConvention::weights_only && spec.is_bias) return false;
  if (exclusions == CountExclusions::embeddings_and_head &&
      (spec.group == ParamGroup::embedding || spec.group == ParamGroup::head)) {
    return false;
  }
  return true;
}

inline ParamCountReport count_params_report(const ModelConfig& cfg, CountConvention convention,
                                            CountExclusions exclusions) {
  ParamCountReport report;
  for (const char* name : {"attention", "cross_attention", "ffn", "norms", "signals", "embeddings", "head"})
    report.components.emplace_back(name, 0);
  for (const auto& spec : model_layout(cfg)) {
    if (!counted(spec, convention, exclusions)) continue;
    const std::string comp = param_component(spec);
    for (auto& [n, c] : report.components)
      if (n == comp) c += spec.numel();
    report.total += spec.numel();
  }
  return report;
}

/// Exact count by enumerating every parameter the config constructs.
inline std::size_t count_params(const ModelConfig& cfg, CountConvention convention = CountConvention::weights_only,
                                CountExclusions exclusions = CountExclusions::embeddings_and_head) {
  return count_params_report(cfg, convention, exclusions).total;
}

/// The same count from closed-form sub-layer sizes.
inline std::size_t closed_form_param_count(const ModelConfig& cfg, CountConvention convention,
                                           CountExclusions exclusions) {
  cfg.validate();
  const std::size_t h = cfg.hidden, ff = cfg.ff, n = cfg.levels;
  const bool biases = convention == CountConvention::with_biases;
  const std::size_t attn = 4 * h * h + (biases ? 4 * h : 0);
  const std::size_t ffn = 2 * h * ff + (biases ? h + ff : 0);
  const std::size_t norm = 2 * h;
  const bool pre = cfg.norm_placement() == NormPlacement::pre;

  auto stack = [&](bool decoder) {
    const std::size_t attn_per_level = decoder ? 2 : 1;
    const std::size_t norm_sites = decoder ? 3 : 2;
    std::size_t total = pre ? norm : 0;
    switch (cfg.arch) {
      case Arch::vanilla:
        total += n * (attn_per_level * attn + ffn + norm_sites * norm);
        break;
      case Arch::universal:
        total += attn_per_level * attn + ffn + norm_sites * norm;
        break;
      case Arch::owf:
        total += n * (attn_per_level * attn + 2 * norm) + (decoder ? 0 : ffn);
        break;
      case Arch::ringformer: {
        total += attn_per_level * attn + ffn + n * norm_sites * norm;
        const SignalCount sc = signal_param_count(h, ff, cfg.rank, cfg.signal, n, ModelMode::encoder_only);
        total += sc.pairs;
        break;
      }
    }
    return total;
  };

  std::size_t total = stack(false) + (cfg.has_decoder() ? stack(true) : 0);
  if (exclusions == CountExclusions::none) {
    if (cfg.has_decoder()) {
      total += 2 * cfg.vocab * h + h * cfg.vocab + (biases ? cfg.vocab : 0);
    } else {
      total += cfg.patch_dim() * h + (biases ? h : 0) + h + cfg.tokens_per_image() * h;
      total += h * cfg.classes + (biases ? cfg.classes : 0);
    }
  }
  return total;
}

/// Multiply-accumulate counts of one forward pass (1 MAC = 1 FLOP).
struct FlopReport {
  std::uint64_t projections = 0;       // Q, K, V, O linear maps
  std::uint64_t attention_scores = 0;  // Q K^T
  std::uint64_t attention_mixing = 0;  // P V
  std::uint64_t ffn = 0;
  std::uint64_t signals = 0;
  std::uint64_t embeddings = 0;  // patch projection
  std::uint64_t head = 0;

  std::uint64_t total() const {
    return projections + attention_scores + attention_mixing + ffn + signals + embeddings + head;
  }

  std::vector<std::pair<std::string, std::uint64_t>> components() const {
    return {{"projections", projections}, {"attention_scores", attention_scores},
            {"attention_mixing", attention_mixing}, {"ffn", ffn}, {"signals", signals},
            {"embeddings", embeddings}, {"head", head}};
  }
};

/// MACs for n_tokens input tokens (class token included in encoder-only mode;
/// source and target length both n_tokens in encoder-decoder mode unless
/// target_tokens is given).
inline FlopReport count_flops(const ModelConfig& cfg, std::uint64_t n_tokens, std::uint64_t target_tokens = 0) {
  cfg.validate();
  const std::uint64_t h = cfg.hidden, ff = cfg.ff, levels = cfg.levels;
  const std::uint64_t src = n_tokens, tgt = target_tokens ? target_tokens : n_tokens;
  const SignalSites sites = cfg.is_ringformer() ? signal_sites(cfg.signal) : SignalSites{};
  const std::uint64_t r = (sites.attention_pairs() || sites.f) ? cfg.signal_rank() : 0;

  FlopReport f;
  auto self_level = [&](std::uint64_t n, bool with_ffn) {
    f.projections += 4 * n * h * h;
    f.attention_scores += n * n * h;
    f.attention_mixing += n * n * h;
    if (with_ffn) f.ffn += 2 * n * h * ff;
    f.signals += sites.attention_pairs() * 2 * n * h * r;
    if (sites.f && with_ffn) f.signals += sites.f_to_ff ? n * h * r + n * r * ff : 2 * n * h * r;
  };
  for (std::uint64_t i = 0; i < levels; ++i) self_level(src, true);
  if (cfg.has_decoder()) {
    const bool dec_ffn = cfg.arch != Arch::owf;
    for (std::uint64_t i = 0; i < levels; ++i) {
      self_level(tgt, dec_ffn);
      f.projections += 2 * tgt * h * h + 2 * src * h * h;
      f.attention_scores += tgt * src * h;
      f.attention_mixing += tgt * src * h;
    }
    f.head = tgt * h * cfg.vocab;
  } else {
    const std::uint64_t patches = n_tokens > 0 ? n_tokens - 1 : 0;
    f.embeddings = patches * cfg.patch_dim() * h;
    f.head = h * cfg.classes;
  }
  return f;
}

}  // namespace ringformer
