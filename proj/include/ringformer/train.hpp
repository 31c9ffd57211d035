#pragma once

// Training loop (Adam, warm-up + cosine schedule, global-norm clipping,
// dropout), evaluation with greedy decoding, and the metrics CSV.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ringformer/autograd.hpp"
#include "ringformer/checkpoint.hpp"
#include "ringformer/metrics.hpp"
#include "ringformer/model.hpp"
#include "ringformer/optim.hpp"
#include "ringformer/tasks.hpp"

namespace ringformer {

struct TrainConfig {
  double max_lr = 1e-3;
  std::int64_t warmup_steps = 200;
  std::int64_t total_steps = 1000;
  std::size_t batch_size = 32;
  double clip_norm = 1.0;
  double dropout = 0.1;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 0;    // 0: evaluate only after the last step
  std::size_t eval_samples = 0;   // 0: the whole eval split
  bool bleu = true;
  AdamConfig adam;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (total_steps < 0 || warmup_steps < 0 || eval_every < 0) fail("step counts must be non-negative");
    // a zero-step run is allowed so an untrained model can be written out
    if (total_steps > 0 && warmup_steps >= total_steps) {
      fail("warmup_steps (" + std::to_string(warmup_steps) + ") must be below total_steps (" +
           std::to_string(total_steps) + ")");
    }
    if (batch_size == 0) fail("batch_size must be at least 1");
    if (!(max_lr > 0.0) || !std::isfinite(max_lr)) fail("max_lr must be positive");
    if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct MetricsRecord {
  std::int64_t step = 0;
  double loss = 0.0;            // teacher-forced eval loss, no dropout
  double token_accuracy = 0.0;  // class accuracy for classification
  double sequence_accuracy = 0.0;
  std::optional<double> bleu;
  double learning_rate = 0.0;   // rate used by update number `step`

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

namespace detail {

template <typename T>
struct Batch {
  std::vector<TokenSeq> src, tgt_in;
  std::vector<Tensor<T>> images;
  std::vector<int> targets;
};

template <typename T>
Batch<T> make_batch(const Dataset& d, const std::vector<std::size_t>& idx) {
  Batch<T> b;
  for (std::size_t i : idx) {
    if (d.images) {
      b.images.push_back(d.imgs[i].image.template cast<T>());
      b.targets.push_back(d.imgs[i].label);
    } else {
      const SeqExample& ex = d.seqs[i];
      b.src.push_back(ex.src);
      TokenSeq in{kBosToken};
      in.insert(in.end(), ex.tgt.begin(), ex.tgt.end());
      b.tgt_in.push_back(std::move(in));
      b.targets.insert(b.targets.end(), ex.tgt.begin(), ex.tgt.end());
      b.targets.push_back(kEosToken);
    }
  }
  return b;
}

template <typename T>
Var<T> batch_loss(const Model<T>& model, const Batch<T>& b, const ForwardContext<T>& ctx) {
  // class labels start at 0, so only token targets skip padding
  if (!b.images.empty()) return cross_entropy(model.classify(b.images, ctx), b.targets);
  return cross_entropy(model.seq2seq_logits(b.src, b.tgt_in, ctx), b.targets, kPadToken);
}

inline std::vector<std::size_t> eval_indices(std::size_t n, std::size_t limit) {
  std::vector<std::size_t> idx(limit ? std::min(n, limit) : n);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

}  // namespace detail

/// Metrics on the first `limit` examples (0: all). Sequence tasks decode
/// greedily up to target length + 4 tokens.
template <typename T>
MetricsRecord evaluate(const Model<T>& model, const Dataset& data, bool want_bleu = true, std::size_t limit = 0) {
  if (data.empty()) throw ConfigError("evaluate: empty dataset");
  NoGradGuard guard;
  const std::vector<std::size_t> all = detail::eval_indices(data.size(), limit);
  constexpr std::size_t chunk = 64;
  MetricsRecord r;
  double loss_sum = 0.0;
  std::size_t loss_terms = 0, correct = 0;
  std::vector<TokenSeq> hyps, refs;
  for (std::size_t start = 0; start < all.size(); start += chunk) {
    const std::vector<std::size_t> idx(all.begin() + start, all.begin() + std::min(all.size(), start + chunk));
    const auto b = detail::make_batch<T>(data, idx);
    const double l = static_cast<double>(detail::batch_loss(model, b, {}).value().item());
    loss_sum += l * static_cast<double>(b.targets.size());
    loss_terms += b.targets.size();
    if (data.images) {
      const Var<T> logits = model.classify(b.images, {});
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto row = logits.value().row(i);
        const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        correct += best == b.targets[i];
      }
    } else {
      std::vector<std::size_t> max_len;
      for (std::size_t i : idx) max_len.push_back(data.seqs[i].tgt.size() + 4);
      for (auto& h : model.greedy_decode(b.src, max_len)) hyps.push_back(std::move(h));
      for (std::size_t i : idx) refs.push_back(data.seqs[i].tgt);
    }
  }
  r.loss = loss_sum / static_cast<double>(loss_terms);
  if (data.images) {
    r.token_accuracy = r.sequence_accuracy = static_cast<double>(correct) / static_cast<double>(all.size());
  } else {
    const AccuracyCounts c = accuracy_counts(hyps, refs);
    r.token_accuracy = c.token_accuracy();
    r.sequence_accuracy = c.sequence_accuracy();
    if (want_bleu) r.bleu = bleu(hyps, refs);
  }
  return r;
}

template <typename T>
struct TrainResult {
  std::vector<MetricsRecord> records;
  std::vector<double> step_losses;  // training loss of each update run in this call
};

/// Starting state of a fresh run under cfg.seed.
template <typename T>
TrainState<T> initial_train_state(const TrainConfig& cfg) {
  return TrainState<T>{0, Rng::derive(cfg.seed, 0x7472).state(), {}};
}

/// Runs updates state.step + 1 .. cfg.total_steps on model, recording metrics
/// every eval_every updates and after the last one. On a non-finite loss or
/// gradient the model and state are rolled back to the last recorded step and
/// DivergenceError is thrown.
template <typename T>
TrainResult<T> train(Model<T>& model, const TaskData& data, const TrainConfig& cfg, TrainState<T>& state,
                     const std::function<void(const MetricsRecord&)>& on_record = {}) {
  cfg.validate();
  if (data.train.empty() && cfg.total_steps > state.step) throw ConfigError("train: empty training split");
  check_compatible(data.train, model.config());
  if (!data.eval.empty()) check_compatible(data.eval, model.config());
  const Dataset& eval_set = data.eval.empty() ? data.train : data.eval;

  auto& store = model.params();
  std::vector<Tensor<T>*> values;
  for (auto& p : store.params()) values.push_back(&p.var.mutable_value());

  TrainResult<T> result;
  ParamStore<T> good_params = store.clone();
  TrainState<T> good_state = state;
  auto diverge = [&](const std::string& why, std::int64_t step) {
    for (std::size_t i = 0; i < values.size(); ++i) *values[i] = good_params.params()[i].var.value();
    state = good_state;
    throw DivergenceError("training diverged at step " + std::to_string(step) + ": " + why +
                              "; rolled back to step " + std::to_string(good_state.step),
                          step);
  };

  auto record = [&](std::int64_t step) {
    MetricsRecord r = eval_set.empty() ? MetricsRecord{} : evaluate(model, eval_set, cfg.bleu, cfg.eval_samples);
    // a blown-up model can still pass a finite training loss for one step
    if (!std::isfinite(r.loss)) diverge("non-finite evaluation loss", step);
    r.step = step;
    r.learning_rate = cosine_warmup_lr(step, cfg.warmup_steps, cfg.total_steps, cfg.max_lr);
    result.records.push_back(r);
    good_params = store.clone();
    good_state = state;
    if (on_record) on_record(r);
  };
  const ForwardContext<T> base_ctx{true, static_cast<T>(cfg.dropout), nullptr};
  while (state.step < cfg.total_steps) {
    const std::int64_t step = state.step + 1;
    Rng rng(state.rng_state);
    std::vector<std::size_t> idx(cfg.batch_size);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(data.train.size()));
    const auto batch = detail::make_batch<T>(data.train, idx);
    ForwardContext<T> ctx = base_ctx;
    ctx.rng = &rng;
    store.zero_grad();
    const Var<T> loss = detail::batch_loss(model, batch, ctx);
    const double loss_value = static_cast<double>(loss.value().item());
    if (!std::isfinite(loss_value)) diverge("non-finite loss", step);
    backward(loss);
    std::vector<const Tensor<T>*> grads;
    std::vector<Tensor<T>*> grad_ptrs;
    for (auto& p : store.params()) {
      grad_ptrs.push_back(&p.var.mutable_grad());
      grads.push_back(grad_ptrs.back());
    }
    const double norm = clip_global_norm(grad_ptrs, cfg.clip_norm);
    if (!std::isfinite(norm)) diverge("non-finite gradient norm", step);
    adam_step(values, grads, state.adam, cosine_warmup_lr(step, cfg.warmup_steps, cfg.total_steps, cfg.max_lr),
              cfg.adam);
    state.step = step;
    state.rng_state = rng.state();
    result.step_losses.push_back(loss_value);
    if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.total_steps) record(step);
  }
  if (result.records.empty()) record(state.step);
  return result;
}

inline std::string metrics_csv_header() { return "step,loss,token_acc,seq_acc,bleu,lr"; }

/// One CSV row; values use 9 significant digits, a missing BLEU is empty.
inline std::string metrics_csv_row(const MetricsRecord& r) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  return std::to_string(r.step) + "," + num(r.loss) + "," + num(r.token_accuracy) + "," + num(r.sequence_accuracy) +
         "," + (r.bleu ? num(*r.bleu) : std::string()) + "," + num(r.learning_rate);
}

inline std::string metrics_csv(const std::vector<MetricsRecord>& records) {
  std::string out = metrics_csv_header() + "\n";
  for (const auto& r : records) out += metrics_csv_row(r) + "\n";
  return out;
}

}  // namespace ringformer
