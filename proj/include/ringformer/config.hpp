#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "ringformer/errors.hpp"

namespace ringformer {

enum class Arch { vanilla, universal, owf, ringformer };
enum class ModelMode { encoder_only, encoder_decoder };
enum class NormPlacement { pre, post };

/// Where (and whether) level signals enter the shared block.
enum class SignalKind { full, static_sinusoidal, no_attn_signal, no_ffn_signal, before_attn, inter_ffn };

inline std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::vanilla: return "vanilla";
    case Arch::universal: return "universal";
    case Arch::owf: return "owf";
    case Arch::ringformer: return "ringformer";
  }
  return "?";
}

inline std::string_view to_string(ModelMode m) {
  return m == ModelMode::encoder_only ? "encoder_only" : "encoder_decoder";
}

inline std::string_view to_string(NormPlacement n) { return n == NormPlacement::pre ? "pre" : "post"; }

inline std::string_view to_string(SignalKind s) {
  switch (s) {
    case SignalKind::full: return "full";
    case SignalKind::static_sinusoidal: return "static_sinusoidal";
    case SignalKind::no_attn_signal: return "no_attn_signal";
    case SignalKind::no_ffn_signal: return "no_ffn_signal";
    case SignalKind::before_attn: return "before_attn";
    case SignalKind::inter_ffn: return "inter_ffn";
  }
  return "?";
}

inline Arch parse_arch(std::string_view s) {
  for (Arch a : {Arch::vanilla, Arch::universal, Arch::owf, Arch::ringformer})
    if (s == to_string(a)) return a;
  throw ConfigError("unknown architecture '" + std::string(s) + "' (vanilla, universal, owf, ringformer)");
}

inline ModelMode parse_mode(std::string_view s) {
  if (s == "encoder_only") return ModelMode::encoder_only;
  if (s == "encoder_decoder") return ModelMode::encoder_decoder;
  throw ConfigError("unknown mode '" + std::string(s) + "' (encoder_only, encoder_decoder)");
}

inline NormPlacement parse_norm(std::string_view s) {
  if (s == "pre") return NormPlacement::pre;
  if (s == "post") return NormPlacement::post;
  throw ConfigError("unknown norm placement '" + std::string(s) + "' (pre, post)");
}

inline SignalKind parse_signal(std::string_view s) {
  for (SignalKind k : {SignalKind::full, SignalKind::static_sinusoidal, SignalKind::no_attn_signal,
                       SignalKind::no_ffn_signal, SignalKind::before_attn, SignalKind::inter_ffn})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown signal variant '" + std::string(s) + "'");
}

/// Rank of the low-rank factor pairs: floor(H / divisor), an explicit rank, or H.
struct RankPolicy {
  enum class Kind { ratio, explicit_rank, full };
  Kind kind = Kind::ratio;
  std::size_t value = 16;

  static RankPolicy ratio(std::size_t divisor) { return {Kind::ratio, divisor}; }
  static RankPolicy explicit_rank(std::size_t r) { return {Kind::explicit_rank, r}; }
  static RankPolicy full() { return {Kind::full, 0}; }

  std::size_t rank_for(std::size_t hidden) const {
    std::size_t r = 0;
    switch (kind) {
      case Kind::ratio:
        if (value == 0) throw ConfigError("rank divisor must be positive");
        r = hidden / value;
        break;
      case Kind::explicit_rank: r = value; break;
      case Kind::full: r = hidden; break;
    }
    if (r < 1) {
      throw ConfigError("rank policy " + to_string() + " gives rank " + std::to_string(r) + " for hidden size " +
                        std::to_string(hidden));
    }
    if (r > hidden) {
      throw ConfigError("rank " + std::to_string(r) + " exceeds hidden size " + std::to_string(hidden));
    }
    return r;
  }

  // "ratio:16", "explicit:8", "full"
  std::string to_string() const {
    switch (kind) {
      case Kind::ratio: return "ratio:" + std::to_string(value);
      case Kind::explicit_rank: return "explicit:" + std::to_string(value);
      case Kind::full: return "full";
    }
    return "?";
  }

  static RankPolicy parse(std::string_view s) {
    if (s == "full") return full();
    auto number = [&](std::string_view digits) {
      if (digits.empty() || digits.find_first_not_of("0123456789") != std::string_view::npos) {
        throw ConfigError("bad rank policy '" + std::string(s) + "' (ratio:N, explicit:N, full)");
      }
      return static_cast<std::size_t>(std::stoull(std::string(digits)));
    };
    if (s.starts_with("ratio:")) return ratio(number(s.substr(6)));
    if (s.starts_with("explicit:")) return explicit_rank(number(s.substr(9)));
    throw ConfigError("bad rank policy '" + std::string(s) + "' (ratio:N, explicit:N, full)");
  }

  friend bool operator==(const RankPolicy&, const RankPolicy&) = default;
};

struct ModelConfig {
  Arch arch = Arch::ringformer;
  ModelMode mode = ModelMode::encoder_decoder;
  std::size_t hidden = 64;
  std::size_t ff = 256;
  std::size_t levels = 2;
  std::size_t heads = 4;
  RankPolicy rank = RankPolicy::ratio(16);
  SignalKind signal = SignalKind::full;
  // Unset means post-norm for encoder-decoder and pre-norm for encoder-only.
  std::optional<NormPlacement> norm;
  // encoder-decoder
  std::size_t vocab = 32;
  std::size_t max_seq_len = 64;
  // encoder-only
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t classes = 4;

  NormPlacement norm_placement() const {
    if (norm) return *norm;
    return mode == ModelMode::encoder_only ? NormPlacement::pre : NormPlacement::post;
  }

  bool has_decoder() const { return mode == ModelMode::encoder_decoder; }
  bool is_ringformer() const { return arch == Arch::ringformer; }

  // Static sinusoidal transitions between levels (universal, or ringformer's static ablation).
  bool static_transition() const {
    return arch == Arch::universal || (arch == Arch::ringformer && signal == SignalKind::static_sinusoidal);
  }

  std::size_t patches_per_side() const { return patch_size ? image_size / patch_size : 0; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t tokens_per_image() const { return num_patches() + 1; }

  std::size_t signal_rank() const { return rank.rank_for(hidden); }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (hidden == 0 || ff == 0 || levels == 0 || heads == 0) fail("hidden, ff, levels and heads must be positive");
    if (hidden % heads != 0) {
      fail("hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) + " heads");
    }
    if ((static_transition() || has_decoder()) && hidden % 2 != 0) {
      fail("sinusoidal encodings need an even hidden size, got " + std::to_string(hidden));
    }
    if (is_ringformer() && signal != SignalKind::static_sinusoidal) (void)signal_rank();
    if (mode == ModelMode::encoder_only) {
      if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        fail("image size " + std::to_string(image_size) + " is not a multiple of patch size " +
             std::to_string(patch_size));
      }
      if (channels == 0 || classes == 0) fail("channels and classes must be positive");
    } else {
      if (vocab < 4) fail("vocabulary needs at least 4 tokens (pad, bos, eos, one symbol)");
      if (max_seq_len == 0) fail("max_seq_len must be positive");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace ringformer
