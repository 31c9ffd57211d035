#pragma once

// The four architectures (vanilla, universal, one-wide-FFN, ringformer) in
// encoder-only (patch classifier) and encoder-decoder (seq2seq) modes.
//
// Parameter layout is a pure function of the config; the model allocates from
// it and wires per-level views onto the shared or per-level weights.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ringformer/autograd.hpp"
#include "ringformer/blocks.hpp"
#include "ringformer/config.hpp"
#include "ringformer/functional.hpp"
#include "ringformer/level_signal.hpp"
#include "ringformer/params.hpp"
#include "ringformer/rng.hpp"

namespace ringformer {

inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kEosToken = 2;
inline constexpr int kFirstSymbol = 3;

namespace detail {

inline void append_stack_layout(std::vector<ParamSpec>& out, const ModelConfig& cfg, const std::string& prefix,
                                bool decoder) {
  const std::size_t h = cfg.hidden, ff = cfg.ff;
  auto sublayers = [&](const std::string& p, bool with_ffn) {
    append_attention(out, p + ".self_attn", h);
    if (decoder) append_attention(out, p + ".cross_attn", h);
    if (with_ffn) append_ffn(out, p + ".ffn", h, ff);
  };
  auto norms = [&](const std::string& p, bool with_ffn) {
    append_norm(out, p + ".ln_attn", h);
    if (decoder) append_norm(out, p + ".ln_cross", h);
    if (with_ffn) append_norm(out, p + ".ln_ffn", h);
  };
  switch (cfg.arch) {
    case Arch::vanilla:
      for (std::size_t i = 0; i < cfg.levels; ++i) {
        const std::string p = prefix + ".layers." + std::to_string(i);
        sublayers(p, true);
        norms(p, true);
      }
      break;
    case Arch::universal:
      sublayers(prefix + ".block", true);
      norms(prefix + ".block", true);
      break;
    case Arch::owf:
      // Per-level attention, one FFN shared by the encoder levels, no decoder FFN.
      for (std::size_t i = 0; i < cfg.levels; ++i) {
        const std::string p = prefix + ".layers." + std::to_string(i);
        sublayers(p, false);
        norms(p, !decoder);
      }
      if (!decoder) append_ffn(out, prefix + ".shared_ffn", h, ff);
      break;
    case Arch::ringformer:
      sublayers(prefix + ".block", true);
      append_level_signal_layout(out, prefix + ".levels", h, ff, cfg.levels, cfg.rank, cfg.signal, decoder);
      break;
  }
  if (cfg.norm_placement() == NormPlacement::pre) append_norm(out, prefix + ".final_ln", h);
}

}  // namespace detail

/// Every parameter of the model described by cfg, in allocation order.
inline std::vector<ParamSpec> model_layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  const std::size_t h = cfg.hidden;
  if (cfg.mode == ModelMode::encoder_only) {
    out.push_back({"embed.patch.w", {cfg.patch_dim(), h}, ParamGroup::embedding, false, InitKind::xavier, 0.0});
    out.push_back({"embed.patch.b", {h}, ParamGroup::embedding, true, InitKind::zeros, 0.0});
    out.push_back({"embed.cls", {1, h}, ParamGroup::embedding, false, InitKind::normal, 0.02});
    out.push_back({"embed.pos", {cfg.tokens_per_image(), h}, ParamGroup::embedding, false, InitKind::normal, 0.02});
  } else {
    out.push_back({"encoder.embed.tokens", {cfg.vocab, h}, ParamGroup::embedding, false, InitKind::normal, 1.0});
    out.push_back({"decoder.embed.tokens", {cfg.vocab, h}, ParamGroup::embedding, false, InitKind::normal, 1.0});
  }
  detail::append_stack_layout(out, cfg, "encoder", false);
  if (cfg.has_decoder()) detail::append_stack_layout(out, cfg, "decoder", true);
  const std::size_t outputs = cfg.has_decoder() ? cfg.vocab : cfg.classes;
  out.push_back({"head.w", {h, outputs}, ParamGroup::head, false, InitKind::xavier, 0.0});
  out.push_back({"head.b", {outputs}, ParamGroup::head, true, InitKind::zeros, 0.0});
  return out;
}

/// Resolved weights for one level of a stack. Null pointers mark absent sub-layers.
template <typename T>
struct LevelWeights {
  const AttentionParams<T>* self_attn = nullptr;
  const AttentionParams<T>* cross_attn = nullptr;
  const FfnParams<T>* ffn = nullptr;
  const NormParams<T>* ln_attn = nullptr;
  const NormParams<T>* ln_cross = nullptr;
  const NormParams<T>* ln_ffn = nullptr;
  const LevelSignalSet<T>* signals = nullptr;
};

template <typename T>
struct Stack {
  std::vector<AttentionParams<T>> self_attn, cross_attn;
  std::vector<FfnParams<T>> ffn;
  std::vector<NormParams<T>> ln_attn, ln_cross, ln_ffn;
  std::vector<LevelSignalSet<T>> signals;
  std::optional<NormParams<T>> final_ln;
  std::size_t levels = 0;
  bool static_transition = false;

  LevelWeights<T> level(std::size_t i) const {
    auto pick = [i](const auto& v) { return v.empty() ? nullptr : &v[v.size() == 1 ? 0 : i]; };
    LevelWeights<T> w;
    w.self_attn = pick(self_attn);
    w.cross_attn = pick(cross_attn);
    w.ffn = pick(ffn);
    if (!signals.empty()) {
      const auto& s = signals[i];
      w.signals = &s;
      w.ln_attn = &s.ln_attn;
      w.ln_cross = s.ln_cross ? &*s.ln_cross : nullptr;
      w.ln_ffn = s.ln_ffn ? &*s.ln_ffn : nullptr;
    } else {
      w.ln_attn = pick(ln_attn);
      w.ln_cross = pick(ln_cross);
      w.ln_ffn = pick(ln_ffn);
    }
    return w;
  }

  static Stack wire(const ParamStore<T>& store, const ModelConfig& cfg, const std::string& prefix, bool decoder) {
    Stack s;
    s.levels = cfg.levels;
    s.static_transition = cfg.static_transition();
    auto take = [&](const std::string& p, bool with_ffn, bool with_norms) {
      s.self_attn.push_back(AttentionParams<T>::from(store, p + ".self_attn"));
      if (decoder) s.cross_attn.push_back(AttentionParams<T>::from(store, p + ".cross_attn"));
      if (with_ffn) s.ffn.push_back(FfnParams<T>::from(store, p + ".ffn"));
      if (with_norms) {
        s.ln_attn.push_back(NormParams<T>::from(store, p + ".ln_attn"));
        if (decoder) s.ln_cross.push_back(NormParams<T>::from(store, p + ".ln_cross"));
        if (store.contains(p + ".ln_ffn.gamma")) s.ln_ffn.push_back(NormParams<T>::from(store, p + ".ln_ffn"));
      }
    };
    switch (cfg.arch) {
      case Arch::vanilla:
        for (std::size_t i = 0; i < cfg.levels; ++i) take(prefix + ".layers." + std::to_string(i), true, true);
        break;
      case Arch::universal:
        take(prefix + ".block", true, true);
        break;
      case Arch::owf:
        for (std::size_t i = 0; i < cfg.levels; ++i) take(prefix + ".layers." + std::to_string(i), false, true);
        if (!decoder) s.ffn.push_back(FfnParams<T>::from(store, prefix + ".shared_ffn"));
        break;
      case Arch::ringformer:
        take(prefix + ".block", true, false);
        for (std::size_t i = 0; i < cfg.levels; ++i)
          s.signals.push_back(LevelSignalSet<T>::from(store, prefix + ".levels." + std::to_string(i)));
        break;
    }
    if (store.contains(prefix + ".final_ln.gamma")) s.final_ln = NormParams<T>::from(store, prefix + ".final_ln");
    return s;
  }
};

template <typename T>
struct ForwardContext {
  bool training = false;
  T dropout = T{0};
  Rng* rng = nullptr;

  bool dropout_active() const { return training && dropout > T{0}; }
};

/// Per-level hidden states and attention maps captured during a forward pass.
template <typename T>
struct ForwardTrace {
  SeqLayout layout;
  std::vector<Tensor<T>> hidden;                   // levels + 1 entries; [0] is the stack input
  std::vector<std::vector<Tensor<T>>> attn_maps;   // [level][sequence] -> [heads x nq x nk]
  std::vector<std::vector<Tensor<T>>> cross_maps;  // decoder only
};

/// sinusoidal(position) + sinusoidal(level) for every token of a ragged batch.
template <typename T>
Tensor<T> static_transition_table(const SeqLayout& layout, std::size_t level, std::size_t hidden) {
  const Tensor<T> level_code = sinusoidal_encoding<T>(level, hidden);
  Tensor<T> table(Shape{layout.total(), hidden});
  std::vector<Tensor<T>> positions;
  for (std::size_t s = 0; s < layout.count(); ++s) {
    for (std::size_t p = 0; p < layout.length(s); ++p) {
      while (positions.size() <= p) positions.push_back(sinusoidal_encoding<T>(positions.size(), hidden));
      T* row = table.data().data() + (layout.offset(s) + p) * hidden;
      for (std::size_t c = 0; c < hidden; ++c) row[c] = positions[p][c] + level_code[c];
    }
  }
  return table;
}

/// Universal-Transformer level transition on one sequence [n x H]:
/// x + sinusoidal(position) + sinusoidal(level).
template <typename T>
Tensor<T> universal_level_transition(const Tensor<T>& x, std::size_t level) {
  const SeqLayout layout = SeqLayout::uniform(1, x.rows());
  return add(x, static_transition_table<T>(layout, level, x.cols()));
}

template <typename T>
class Model {
 public:
  static Model build(const ModelConfig& cfg, Rng& rng) {
    return Model(cfg, ParamStore<T>::allocate(model_layout(cfg), rng));
  }

  /// Wires a model onto existing parameters; names and shapes must match the layout.
  static Model from_store(const ModelConfig& cfg, ParamStore<T> store) {
    const auto layout = model_layout(cfg);
    if (layout.size() != store.size()) {
      throw ConfigError("parameter set has " + std::to_string(store.size()) + " entries, config expects " +
                        std::to_string(layout.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& p = store.params()[i];
      if (p.name != layout[i].name || p.var.shape() != layout[i].shape) {
        throw ConfigError("parameter #" + std::to_string(i) + " is '" + p.name + "' " + shape_string(p.var.shape()) +
                          ", config expects '" + layout[i].name + "' " + shape_string(layout[i].shape));
      }
    }
    return Model(cfg, std::move(store));
  }

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Model clone() const { return Model(cfg_, store_.clone()); }

  const ModelConfig& config() const noexcept { return cfg_; }
  const ParamStore<T>& params() const noexcept { return store_; }
  ParamStore<T>& params() noexcept { return store_; }
  const Stack<T>& encoder() const noexcept { return encoder_; }
  const Stack<T>& decoder() const noexcept { return decoder_; }

  /// Runs one stack. memory/mem_layout are the encoder output for decoder stacks.
  Var<T> run_stack(const Stack<T>& stack, Var<T> x, const SeqLayout& layout, const Var<T>* memory,
                   const SeqLayout* mem_layout, bool causal, const ForwardContext<T>& ctx,
                   ForwardTrace<T>* trace = nullptr) const {
    if (!stack.cross_attn.empty() && (!memory || !mem_layout)) {
      throw ConfigError("decoder stack needs the encoder output");
    }
    if (!stack.signals.empty() && stack.signals.size() != stack.levels) {
      throw ConfigError("stack has " + std::to_string(stack.levels) + " levels but " +
                        std::to_string(stack.signals.size()) + " signal sets");
    }
    const bool pre = cfg_.norm_placement() == NormPlacement::pre;
    if (trace) {
      trace->layout = layout;
      trace->hidden.assign(1, x.value());
      trace->attn_maps.clear();
      trace->cross_maps.clear();
    }
    auto drop = [&](const Var<T>& v) { return ctx.dropout_active() ? dropout(v, ctx.dropout, *ctx.rng) : v; };
    auto norm = [](const Var<T>& v, const NormParams<T>* n) { return layer_norm(v, n->gamma, n->beta); };
    AttentionOptions<T> attn_opt;
    attn_opt.heads = cfg_.heads;
    attn_opt.dropout = ctx.dropout_active() ? ctx.dropout : T{0};
    attn_opt.rng = ctx.rng;

    for (std::size_t i = 0; i < stack.levels; ++i) {
      const LevelWeights<T> w = stack.level(i);
      if (stack.static_transition) {
        x = add(x, constant(static_transition_table<T>(layout, i, cfg_.hidden)));
      }

      // self-attention
      {
        const Var<T> xn = pre ? norm(x, w.ln_attn) : x;
        std::vector<Tensor<T>>* maps = nullptr;
        if (trace) maps = &trace->attn_maps.emplace_back();
        attn_opt.causal = causal;
        attn_opt.maps = maps;
        const Var<T> a = self_attention(xn, *w.self_attn, w.signals, layout, attn_opt);
        const Var<T> r = add(x, drop(a));
        x = pre ? r : norm(r, w.ln_attn);
      }
      // cross-attention (shared projections, no level signals)
      if (w.cross_attn) {
        const Var<T> xn = pre ? norm(x, w.ln_cross) : x;
        std::vector<Tensor<T>>* maps = nullptr;
        if (trace) maps = &trace->cross_maps.emplace_back();
        attn_opt.causal = false;
        attn_opt.maps = maps;
        const AttentionParams<T>& p = *w.cross_attn;
        const Var<T> q = linear(xn, p.w_q, p.b_q);
        const Var<T> k = linear(*memory, p.w_k, p.b_k);
        const Var<T> v = linear(*memory, p.w_v, p.b_v);
        const Var<T> a = linear(attention(q, k, v, layout, *mem_layout, attn_opt), p.w_o, p.b_o);
        const Var<T> r = add(x, drop(a));
        x = pre ? r : norm(r, w.ln_cross);
      }
      // feed-forward
      if (w.ffn) {
        const Var<T> xn = pre ? norm(x, w.ln_ffn) : x;
        const Var<T> f = feed_forward(xn, *w.ffn, w.signals);
        const Var<T> r = add(x, drop(f));
        x = pre ? r : norm(r, w.ln_ffn);
      }
      if (trace) trace->hidden.push_back(x.value());
    }
    if (stack.final_ln) x = norm(x, &*stack.final_ln);
    return x;
  }

  // ---- encoder-decoder -------------------------------------------------

  /// Token embeddings plus sinusoidal positions for a ragged batch.
  Var<T> embed_sequences(bool decoder_side, const std::vector<std::vector<int>>& seqs, SeqLayout& layout) const {
    require_mode(ModelMode::encoder_decoder, "embed_sequences");
    std::vector<std::size_t> lengths, ids;
    for (const auto& s : seqs) {
      if (s.size() > cfg_.max_seq_len) {
        throw ConfigError("sequence of length " + std::to_string(s.size()) + " exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));
      }
      lengths.push_back(s.size());
      for (int t : s) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab) {
          throw DimensionError("token " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg_.vocab));
        }
        ids.push_back(static_cast<std::size_t>(t));
      }
    }
    layout = SeqLayout::from_lengths(lengths);
    const Var<T>& table = store_.get(decoder_side ? "decoder.embed.tokens" : "encoder.embed.tokens");
    Tensor<T> positions(Shape{layout.total(), cfg_.hidden});
    std::vector<Tensor<T>> codes;
    for (std::size_t s = 0; s < layout.count(); ++s) {
      for (std::size_t p = 0; p < layout.length(s); ++p) {
        while (codes.size() <= p) codes.push_back(sinusoidal_encoding<T>(codes.size(), cfg_.hidden));
        std::copy(codes[p].values().begin(), codes[p].values().end(),
                  positions.values().begin() + (layout.offset(s) + p) * cfg_.hidden);
      }
    }
    return add(gather_rows(table, std::move(ids)), constant(std::move(positions)));
  }

  struct Encoded {
    Var<T> memory;
    SeqLayout layout;
  };

  Encoded encode(const std::vector<std::vector<int>>& src, const ForwardContext<T>& ctx,
                 ForwardTrace<T>* trace = nullptr) const {
    Encoded e;
    const Var<T> x = embed_sequences(false, src, e.layout);
    e.memory = run_stack(encoder_, x, e.layout, nullptr, nullptr, false, ctx, trace);
    return e;
  }

  /// Decoder logits [sum(len(tgt_in)) x vocab] for teacher-forced inputs.
  Var<T> decode(const std::vector<std::vector<int>>& tgt_in, const Encoded& enc, const ForwardContext<T>& ctx,
                ForwardTrace<T>* trace = nullptr) const {
    SeqLayout layout;
    const Var<T> y = embed_sequences(true, tgt_in, layout);
    if (layout.count() != enc.layout.count()) throw DimensionError("decode: batch size differs from encoder batch");
    const Var<T> h = run_stack(decoder_, y, layout, &enc.memory, &enc.layout, true, ctx, trace);
    return linear(h, store_.get("head.w"), store_.get("head.b"));
  }

  Var<T> seq2seq_logits(const std::vector<std::vector<int>>& src, const std::vector<std::vector<int>>& tgt_in,
                        const ForwardContext<T>& ctx, ForwardTrace<T>* enc_trace = nullptr,
                        ForwardTrace<T>* dec_trace = nullptr) const {
    return decode(tgt_in, encode(src, ctx, enc_trace), ctx, dec_trace);
  }

  /// Greedy argmax decoding; stops at EOS or max_lengths[i] generated tokens.
  /// Outputs exclude BOS and EOS.
  std::vector<std::vector<int>> greedy_decode(const std::vector<std::vector<int>>& src,
                                              const std::vector<std::size_t>& max_lengths) const {
    NoGradGuard guard;
    const ForwardContext<T> ctx;
    const Encoded enc = encode(src, ctx);
    const std::size_t n = src.size();
    std::vector<std::vector<int>> out(n);
    std::vector<bool> done(n, false);
    for (std::size_t i = 0; i < n; ++i) done[i] = max_lengths[i] == 0;
    const std::size_t h = cfg_.hidden;
    while (true) {
      std::vector<std::size_t> active;
      for (std::size_t i = 0; i < n; ++i)
        if (!done[i]) active.push_back(i);
      if (active.empty()) break;
      std::vector<std::vector<int>> prefixes;
      std::vector<std::size_t> mem_lengths;
      std::vector<T> mem_rows;
      for (std::size_t i : active) {
        std::vector<int> p{kBosToken};
        p.insert(p.end(), out[i].begin(), out[i].end());
        prefixes.push_back(std::move(p));
        mem_lengths.push_back(enc.layout.length(i));
        const auto& mv = enc.memory.value().values();
        mem_rows.insert(mem_rows.end(), mv.begin() + enc.layout.offset(i) * h,
                        mv.begin() + (enc.layout.offset(i) + enc.layout.length(i)) * h);
      }
      Encoded sub;
      sub.layout = SeqLayout::from_lengths(mem_lengths);
      sub.memory = constant(Tensor<T>(Shape{sub.layout.total(), h}, std::move(mem_rows)));
      const Var<T> logits = decode(prefixes, sub, ctx);
      const std::size_t vocab = cfg_.vocab;
      std::size_t row_end = 0;
      for (std::size_t a = 0; a < active.size(); ++a) {
        row_end += prefixes[a].size();
        const T* row = logits.value().data().data() + (row_end - 1) * vocab;
        const int next = static_cast<int>(std::max_element(row, row + vocab) - row);
        const std::size_t i = active[a];
        if (next == kEosToken) {
          done[i] = true;
        } else {
          out[i].push_back(next);
          if (out[i].size() >= max_lengths[i]) done[i] = true;
        }
      }
    }
    return out;
  }

  // ---- encoder-only ----------------------------------------------------

  /// Patch tokens [B*(P+1) x H]: class token, then patches in row-major order,
  /// plus learned positions.
  Var<T> embed_images(const std::vector<Tensor<T>>& images, SeqLayout& layout) const {
    require_mode(ModelMode::encoder_only, "embed_images");
    const std::size_t b = images.size(), p = cfg_.patch_size, g = cfg_.patches_per_side(), c = cfg_.channels;
    const std::size_t s = cfg_.image_size, np = cfg_.num_patches(), pd = cfg_.patch_dim();
    Tensor<T> patches(Shape{b * np, pd});
    for (std::size_t i = 0; i < b; ++i) {
      if (images[i].shape() != Shape{c, s, s}) {
        throw DimensionError("image " + std::to_string(i) + " has shape " + shape_string(images[i].shape()) +
                             ", expected " + shape_string({c, s, s}));
      }
      for (std::size_t pr = 0; pr < g; ++pr)
        for (std::size_t pc = 0; pc < g; ++pc) {
          T* row = patches.data().data() + (i * np + pr * g + pc) * pd;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t dy = 0; dy < p; ++dy)
              for (std::size_t dx = 0; dx < p; ++dx)
                row[(ch * p + dy) * p + dx] = images[i][(ch * s + pr * p + dy) * s + pc * p + dx];
        }
    }
    const Var<T> emb = linear(constant(std::move(patches)), store_.get("embed.patch.w"), store_.get("embed.patch.b"));
    const Var<T> with_cls = concat_rows(store_.get("embed.cls"), emb);
    std::vector<std::size_t> order, pos;
    for (std::size_t i = 0; i < b; ++i) {
      order.push_back(0);
      pos.push_back(0);
      for (std::size_t k = 0; k < np; ++k) {
        order.push_back(1 + i * np + k);
        pos.push_back(1 + k);
      }
    }
    layout = SeqLayout::uniform(b, np + 1);
    return add(gather_rows(with_cls, std::move(order)), gather_rows(store_.get("embed.pos"), std::move(pos)));
  }

  /// Class logits [B x classes] read from the final class-token state.
  Var<T> classify(const std::vector<Tensor<T>>& images, const ForwardContext<T>& ctx,
                  ForwardTrace<T>* trace = nullptr) const {
    SeqLayout layout;
    const Var<T> x = embed_images(images, layout);
    const Var<T> h = run_stack(encoder_, x, layout, nullptr, nullptr, false, ctx, trace);
    std::vector<std::size_t> cls_rows;
    for (std::size_t i = 0; i < layout.count(); ++i) cls_rows.push_back(layout.offset(i));
    return linear(gather_rows(h, std::move(cls_rows)), store_.get("head.w"), store_.get("head.b"));
  }

 private:
  Model(const ModelConfig& cfg, ParamStore<T> store) : cfg_(cfg), store_(std::move(store)) {
    encoder_ = Stack<T>::wire(store_, cfg_, "encoder", false);
    if (cfg_.has_decoder()) decoder_ = Stack<T>::wire(store_, cfg_, "decoder", true);
  }

  void require_mode(ModelMode mode, const char* what) const {
    if (cfg_.mode != mode) {
      throw ConfigError(std::string(what) + " needs a " + std::string(to_string(mode)) + " model");
    }
  }

  Var<T> self_attention(const Var<T>& xn, const AttentionParams<T>& p, const LevelSignalSet<T>* sig,
                        const SeqLayout& layout, const AttentionOptions<T>& opt) const {
    const bool before = cfg_.signal == SignalKind::before_attn;
    auto project = [&](const Var<T>& w, const Var<T>& b, const std::optional<LowRankFactorPair<T>>* pair) {
      if (!pair || !*pair) return linear(xn, w, b);
      if (before) return linear(add(xn, apply_signal(**pair, xn)), w, b);
      return add(linear(xn, w, b), apply_signal(**pair, xn));
    };
    const Var<T> q = project(p.w_q, p.b_q, sig ? &sig->q : nullptr);
    const Var<T> k = project(p.w_k, p.b_k, sig ? &sig->k : nullptr);
    const Var<T> v = project(p.w_v, p.b_v, sig ? &sig->v : nullptr);
    return linear(attention(q, k, v, layout, layout, opt), p.w_o, p.b_o);
  }

  Var<T> feed_forward(const Var<T>& xn, const FfnParams<T>& p, const LevelSignalSet<T>* sig) const {
    Var<T> up;
    if (sig && sig->f) {
      if (cfg_.signal == SignalKind::inter_ffn) {
        up = add(linear(xn, p.w_up, p.b_up), apply_signal(*sig->f, xn));
      } else {
        up = linear(add(xn, apply_signal(*sig->f, xn)), p.w_up, p.b_up);
      }
    } else {
      up = linear(xn, p.w_up, p.b_up);
    }
    return linear(gelu(up), p.w_down, p.b_down);
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  Stack<T> encoder_;
  Stack<T> decoder_;
};

/// Eval-mode pass of the encoder stack over already-embedded tokens.
template <typename T>
std::pair<Tensor<T>, ForwardTrace<T>> encoder_forward(const Model<T>& model, const Tensor<T>& x,
                                                      const SeqLayout& layout) {
  NoGradGuard guard;
  ForwardTrace<T> trace;
  const Var<T> out = model.run_stack(model.encoder(), constant(x), layout, nullptr, nullptr, false, {}, &trace);
  return {out.value(), std::move(trace)};
}

/// Eval-mode pass of the decoder stack (causal self-attention, cross-attention to enc_out).
template <typename T>
std::pair<Tensor<T>, ForwardTrace<T>> decoder_forward(const Model<T>& model, const Tensor<T>& y,
                                                      const SeqLayout& layout, const Tensor<T>& enc_out,
                                                      const SeqLayout& enc_layout) {
  if (!model.config().has_decoder()) throw ConfigError("decoder_forward needs an encoder-decoder model");
  NoGradGuard guard;
  ForwardTrace<T> trace;
  const Var<T> memory = constant(enc_out);
  const Var<T> out =
      model.run_stack(model.decoder(), constant(y), layout, &memory, &enc_layout, true, {}, &trace);
  return {out.value(), std::move(trace)};
}

}  // namespace ringformer
