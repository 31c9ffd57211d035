#pragma once

// Shared helpers for the unit suites and the acceptance binary: random
// tensors, the finite-difference harness for ops and whole models, and the
// signal-free reference recurrence.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ringformer/ringformer.hpp"

namespace rf_test {

using namespace ringformer;
using T64 = Tensor<double>;
using V64 = Var<double>;

inline T64 random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  T64 t(std::move(shape));
  for (auto& v : t.values()) v = rng.normal(0.0, scale);
  return t;
}

inline std::size_t random_extent(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

using OpFn = std::function<V64(const std::vector<V64>&)>;

/// Worst relative error between backward() and central differences of
/// L = sum(op(inputs) * W) over every input, with W a fixed random weight.
inline double op_gradient_error(const OpFn& op, const std::vector<T64>& inputs, Rng& rng) {
  std::vector<V64> vars;
  for (const auto& x : inputs) vars.emplace_back(x, true);
  const V64 out = op(vars);
  const V64 weight = constant(random_tensor(out.shape(), rng));
  backward(sum(mul(out, weight)));

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const T64 numeric = finite_difference_gradient<double>(
        [&](const T64& t) {
          NoGradGuard guard;
          std::vector<V64> consts;
          for (std::size_t j = 0; j < inputs.size(); ++j) consts.push_back(constant(j == i ? t : inputs[j]));
          return sum(mul(op(consts), weight)).value().item();
        },
        inputs[i]);
    worst = std::max(worst, relative_error(vars[i].mutable_grad(), numeric));
  }
  return worst;
}

struct OpCase {
  std::string name;
  std::function<double(Rng&)> run;  // one randomized case -> relative error
};

/// One entry per differentiable op; every call draws fresh shapes and values.
inline std::vector<OpCase> op_gradient_cases() {
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::function<double(Rng&)> fn) { cases.push_back({std::move(name), fn}); };

  add_case("matmul", [](Rng& rng) {
    const std::size_t m = random_extent(rng, 1, 5), k = random_extent(rng, 1, 5), n = random_extent(rng, 1, 5);
    return op_gradient_error([](const auto& v) { return matmul(v[0], v[1]); },
                             {random_tensor({m, k}, rng), random_tensor({k, n}, rng)}, rng);
  });
  add_case("matmul_transposed", [](Rng& rng) {
    const std::size_t m = random_extent(rng, 1, 5), k = random_extent(rng, 1, 5), n = random_extent(rng, 1, 5);
    return op_gradient_error([](const auto& v) { return matmul(v[0], v[1], true); },
                             {random_tensor({m, k}, rng), random_tensor({n, k}, rng)}, rng);
  });
  add_case("matmul_batched", [](Rng& rng) {
    const std::size_t m = random_extent(rng, 1, 4), k = random_extent(rng, 1, 4), n = random_extent(rng, 1, 4);
    return op_gradient_error([](const auto& v) { return matmul(v[0], v[1]); },
                             {random_tensor({2, m, k}, rng), random_tensor({k, n}, rng)}, rng);
  });
  add_case("add", [](Rng& rng) {
    const Shape s{random_extent(rng, 1, 4), random_extent(rng, 1, 4)};
    return op_gradient_error([](const auto& v) { return add(v[0], v[1]); },
                             {random_tensor(s, rng), random_tensor(s, rng)}, rng);
  });
  add_case("add_bias", [](Rng& rng) {
    const std::size_t r = random_extent(rng, 1, 4), c = random_extent(rng, 1, 5);
    return op_gradient_error([](const auto& v) { return add_bias(v[0], v[1]); },
                             {random_tensor({r, c}, rng), random_tensor({c}, rng)}, rng);
  });
  add_case("linear", [](Rng& rng) {
    const std::size_t r = random_extent(rng, 1, 4), i = random_extent(rng, 1, 5), o = random_extent(rng, 1, 5);
    return op_gradient_error([](const auto& v) { return linear(v[0], v[1], v[2]); },
                             {random_tensor({r, i}, rng), random_tensor({i, o}, rng), random_tensor({o}, rng)},
                             rng);
  });
  add_case("scale", [](Rng& rng) {
    const double f = rng.uniform(-3.0, 3.0);
    return op_gradient_error([f](const auto& v) { return scale(v[0], f); },
                             {random_tensor({random_extent(rng, 1, 4), 3}, rng)}, rng);
  });
  add_case("mul", [](Rng& rng) {
    const Shape s{random_extent(rng, 1, 4), random_extent(rng, 1, 4)};
    return op_gradient_error([](const auto& v) { return mul(v[0], v[1]); },
                             {random_tensor(s, rng), random_tensor(s, rng)}, rng);
  });
  add_case("sum", [](Rng& rng) {
    return op_gradient_error([](const auto& v) { return sum(v[0]); },
                             {random_tensor({random_extent(rng, 1, 4), random_extent(rng, 1, 4)}, rng)}, rng);
  });
  add_case("gelu", [](Rng& rng) {
    return op_gradient_error([](const auto& v) { return gelu(v[0]); },
                             {random_tensor({random_extent(rng, 1, 4), random_extent(rng, 1, 6)}, rng, 2.0)}, rng);
  });
  add_case("layer_norm", [](Rng& rng) {
    const std::size_t r = random_extent(rng, 1, 4), d = random_extent(rng, 2, 8);
    T64 gamma = random_tensor({d}, rng, 0.3);
    for (auto& g : gamma.values()) g += 1.0;
    return op_gradient_error([](const auto& v) { return layer_norm(v[0], v[1], v[2]); },
                             {random_tensor({r, d}, rng), gamma, random_tensor({d}, rng)}, rng);
  });
  add_case("softmax", [](Rng& rng) {
    return op_gradient_error([](const auto& v) { return softmax(v[0]); },
                             {random_tensor({random_extent(rng, 1, 4), random_extent(rng, 1, 6)}, rng, 2.0)}, rng);
  });
  add_case("dropout", [](Rng& rng) {
    const std::uint64_t seed = rng.next_u64();
    const double rate = rng.uniform(0.05, 0.6);
    return op_gradient_error(
        [seed, rate](const auto& v) {
          Rng mask_rng(seed);  // same mask on every evaluation
          return dropout(v[0], rate, mask_rng);
        },
        {random_tensor({random_extent(rng, 1, 4), random_extent(rng, 1, 6)}, rng)}, rng);
  });
  add_case("gather_rows", [](Rng& rng) {
    const std::size_t rows = random_extent(rng, 1, 5), picks = random_extent(rng, 1, 7);
    std::vector<std::size_t> index;
    for (std::size_t i = 0; i < picks; ++i) index.push_back(rng.below(rows));
    return op_gradient_error([index](const auto& v) { return gather_rows(v[0], index); },
                             {random_tensor({rows, 3}, rng)}, rng);
  });
  add_case("concat_rows", [](Rng& rng) {
    const std::size_t c = random_extent(rng, 1, 4);
    return op_gradient_error([](const auto& v) { return concat_rows(v[0], v[1]); },
                             {random_tensor({random_extent(rng, 1, 3), c}, rng),
                              random_tensor({random_extent(rng, 1, 3), c}, rng)},
                             rng);
  });
  add_case("cross_entropy", [](Rng& rng) {
    const std::size_t n = random_extent(rng, 2, 5), classes = random_extent(rng, 2, 6);
    std::vector<int> targets;
    for (std::size_t i = 0; i < n; ++i) targets.push_back(static_cast<int>(rng.below(classes)));
    targets[0] = 1;  // never every position ignored
    return op_gradient_error([targets](const auto& v) { return cross_entropy(v[0], targets, 0); },
                             {random_tensor({n, classes}, rng, 2.0)}, rng);
  });
  add_case("attention", [](Rng& rng) {
    const std::size_t heads = random_extent(rng, 1, 3), width = heads * random_extent(rng, 1, 3);
    const std::size_t seqs = random_extent(rng, 1, 3);
    std::vector<std::size_t> lq, lk;
    for (std::size_t s = 0; s < seqs; ++s) {
      lq.push_back(random_extent(rng, 1, 4));
      lk.push_back(random_extent(rng, 1, 4));
    }
    const bool causal = rng.below(2) == 1;
    if (causal) lk = lq;
    const SeqLayout ql = SeqLayout::from_lengths(lq), kl = SeqLayout::from_lengths(lk);
    return op_gradient_error(
        [=](const auto& v) {
          AttentionOptions<double> opt;
          opt.heads = heads;
          opt.causal = causal;
          return attention(v[0], v[1], v[2], ql, kl, opt);
        },
        {random_tensor({ql.total(), width}, rng), random_tensor({kl.total(), width}, rng),
         random_tensor({kl.total(), width}, rng)},
        rng);
  });
  add_case("attention_dropout", [](Rng& rng) {
    const std::size_t n = random_extent(rng, 1, 4);
    const std::uint64_t seed = rng.next_u64();
    const SeqLayout l = SeqLayout::uniform(1, n);
    return op_gradient_error(
        [=](const auto& v) {
          Rng drop_rng(seed);
          AttentionOptions<double> opt;
          opt.heads = 2;
          opt.dropout = 0.3;
          opt.rng = &drop_rng;
          return attention(v[0], v[1], v[2], l, l, opt);
        },
        {random_tensor({n, 4}, rng), random_tensor({n, 4}, rng), random_tensor({n, 4}, rng)}, rng);
  });
  add_case("apply_signal", [](Rng& rng) {
    const std::size_t in = random_extent(rng, 2, 6), out = random_extent(rng, 2, 6), r = random_extent(rng, 1, 3);
    return op_gradient_error(
        [](const auto& v) { return apply_signal(LowRankFactorPair<double>{v[1], v[2]}, v[0]); },
        {random_tensor({random_extent(rng, 1, 4), in}, rng), random_tensor({out, r}, rng),
         random_tensor({in, r}, rng)},
        rng);
  });
  return cases;
}

/// Moves every parameter off its initialization so all paths carry gradient.
inline void randomize_params(ParamStore<double>& store, Rng& rng, double scale = 0.4) {
  for (auto& p : store.params()) {
    const bool gamma = p.name.ends_with(".gamma");
    for (auto& v : p.var.mutable_value().values()) v = (gamma ? 1.0 : 0.0) + rng.normal(0.0, gamma ? 0.2 : scale);
  }
}

/// Tiny encoder-decoder RingFormer: H=8, FF=16, N=2, 2 heads.
inline ModelConfig tiny_ringformer_config() {
  ModelConfig cfg;
  cfg.arch = Arch::ringformer;
  cfg.mode = ModelMode::encoder_decoder;
  cfg.hidden = 8;
  cfg.ff = 16;
  cfg.levels = 2;
  cfg.heads = 2;
  cfg.rank = RankPolicy::explicit_rank(2);
  cfg.vocab = 7;
  cfg.max_seq_len = 8;
  return cfg;
}

/// Worst relative error, over the concatenation of all parameter gradients,
/// between backward() and central differences of the model loss. The model
/// is randomized first (B = 0 would zero the A gradients).
inline double model_gradient_error(const ModelConfig& cfg, Rng& rng) {
  Model<double> model = Model<double>::build(cfg, rng);
  randomize_params(model.params(), rng);
  std::function<double()> loss_value;
  std::function<V64()> loss_var;
  if (cfg.has_decoder()) {
    std::vector<std::vector<int>> src(2), tgt_in(2);
    std::vector<int> targets;
    for (int s = 0; s < 2; ++s) {
      tgt_in[s].push_back(kBosToken);
      for (int t = 0; t < 3; ++t) src[s].push_back(kFirstSymbol + static_cast<int>(rng.below(cfg.vocab - kFirstSymbol)));
      for (int t = 0; t < 2; ++t) tgt_in[s].push_back(src[s][t]);
      for (int t = 0; t < 2; ++t) targets.push_back(src[s][t]);
      targets.push_back(kEosToken);
    }
    loss_var = [&model, src, tgt_in, targets] {
      return cross_entropy(model.seq2seq_logits(src, tgt_in, {}), targets, kPadToken);
    };
  } else {
    std::vector<T64> images;
    std::vector<int> labels;
    for (int i = 0; i < 2; ++i) {
      images.push_back(random_tensor({cfg.channels, cfg.image_size, cfg.image_size}, rng));
      labels.push_back(static_cast<int>(rng.below(cfg.classes)));
    }
    loss_var = [&model, images, labels] { return cross_entropy(model.classify(images, {}), labels); };
  }

  backward(loss_var());
  T64 analytic(Shape{model.params().numel()}), numeric(Shape{model.params().numel()});
  std::size_t offset = 0;
  for (auto& p : model.params().params()) {
    const T64 base = p.var.value();
    const T64 g = finite_difference_gradient<double>(
        [&](const T64& t) {
          NoGradGuard guard;
          p.var.mutable_value() = t;
          const double l = loss_var().value().item();
          p.var.mutable_value() = base;
          return l;
        },
        base);
    const T64& a = p.var.mutable_grad();
    std::copy(a.values().begin(), a.values().end(), analytic.values().begin() + offset);
    std::copy(g.values().begin(), g.values().end(), numeric.values().begin() + offset);
    offset += base.size();
  }
  return relative_error(analytic, numeric);
}

/// Random small RingFormer over every signal variant and norm placement.
inline ModelConfig random_ringformer_config(Rng& rng, ModelMode mode) {
  ModelConfig cfg;
  cfg.arch = Arch::ringformer;
  cfg.mode = mode;
  cfg.heads = random_extent(rng, 1, 3);
  cfg.hidden = cfg.heads * 2 * random_extent(rng, 1, 4);
  cfg.ff = random_extent(rng, 1, 4) * 8;
  cfg.levels = random_extent(rng, 1, 4);
  cfg.rank = RankPolicy::explicit_rank(random_extent(rng, 1, cfg.hidden));
  const SignalKind kinds[] = {SignalKind::full, SignalKind::no_attn_signal, SignalKind::no_ffn_signal,
                              SignalKind::before_attn, SignalKind::inter_ffn};
  cfg.signal = kinds[rng.below(5)];
  if (rng.below(2)) cfg.norm = rng.below(2) ? NormPlacement::pre : NormPlacement::post;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.vocab = 11;
  return cfg;
}

inline std::vector<std::size_t> random_lengths(Rng& rng, std::size_t count, std::size_t max_len) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_extent(rng, 1, max_len));
  return out;
}

// Moves everything except the B factors, so the block is non-trivial but g stays zero.
inline void randomize_except_b(Model<double>& model, Rng& rng) {
  for (auto& p : model.params().params()) {
    if (p.name.ends_with(".b") && p.group == ParamGroup::signal) continue;
    const bool gamma = p.name.ends_with(".gamma");
    for (auto& v : p.var.mutable_value().values()) v = (gamma ? 1.0 : 0.0) + rng.normal(0.0, gamma ? 0.2 : 0.4);
  }
}

/// Signal-free recurrence of one shared block built from the functional ops:
/// what a RingFormer stack computes when every g_i is zero.
inline T64 reference_recurrence(const Model<double>& model, const Stack<double>& stack, T64 x,
                                const SeqLayout& layout, const T64* memory, const SeqLayout* mem_layout,
                                bool causal) {
  const ModelConfig& cfg = model.config();
  const bool pre = cfg.norm_placement() == NormPlacement::pre;
  auto norm = [](const T64& v, const NormParams<double>* n) { return layer_norm(v, n->gamma.value(), n->beta.value()); };
  auto rows = [](const T64& t, std::size_t from, std::size_t count) {
    T64 out(Shape{count, t.cols()});
    std::copy_n(t.values().begin() + from * t.cols(), count * t.cols(), out.values().begin());
    return out;
  };
  auto per_sequence_attention = [&](const T64& q_in, const T64* kv_in, const SeqLayout* kv_layout,
                                    const AttentionParams<double>& w, bool mask_future) {
    T64 out(Shape{q_in.rows(), cfg.hidden});
    const AttentionProjections<double> proj = w.tensors();
    for (std::size_t s = 0; s < layout.count(); ++s) {
      const T64 q = rows(q_in, layout.offset(s), layout.length(s));
      const T64 kv = kv_in ? rows(*kv_in, kv_layout->offset(s), kv_layout->length(s)) : q;
      const AttentionMask mask = AttentionMask::causal(q.rows());
      const T64 a = multi_head_attention(q, kv, proj, cfg.heads, mask_future ? &mask : nullptr);
      std::copy(a.values().begin(), a.values().end(), out.values().begin() + layout.offset(s) * cfg.hidden);
    }
    return out;
  };
  for (std::size_t i = 0; i < stack.levels; ++i) {
    const LevelWeights<double> w = stack.level(i);
    {
      const T64 xn = pre ? norm(x, w.ln_attn) : x;
      const T64 r = add(x, per_sequence_attention(xn, nullptr, nullptr, *w.self_attn, causal));
      x = pre ? r : norm(r, w.ln_attn);
    }
    if (w.cross_attn) {
      const T64 xn = pre ? norm(x, w.ln_cross) : x;
      const T64 r = add(x, per_sequence_attention(xn, memory, mem_layout, *w.cross_attn, false));
      x = pre ? r : norm(r, w.ln_cross);
    }
    {
      const T64 xn = pre ? norm(x, w.ln_ffn) : x;
      const FfnParams<double>& f = *w.ffn;
      const T64 r = add(x, feed_forward(xn, f.w_up.value(), f.b_up.value(), f.w_down.value(), f.b_down.value()));
      x = pre ? r : norm(r, w.ln_ffn);
    }
  }
  if (stack.final_ln) x = norm(x, &*stack.final_ln);
  return x;
}

}  // namespace rf_test
