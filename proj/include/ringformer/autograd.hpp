#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every op returns a Var whose node remembers its parents and a backward
// closure. backward(loss) walks the graph in reverse topological order and
// accumulates gradients into every node that requires them. Forward values are
// computed with the kernels from functional.hpp.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ringformer/errors.hpp"
#include "ringformer/functional.hpp"
#include "ringformer/rng.hpp"
#include "ringformer/tensor.hpp"

namespace ringformer {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread for its lifetime (evaluation, decoding).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename T>
struct Node {
  using NodePtr = std::shared_ptr<Node>;
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, std::span<const NodePtr> parents)>;

  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward;

  Tensor<T>& grad_buffer() {
    if (!has_grad()) grad = Tensor<T>(value.shape());
    return grad;
  }

  // A scalar and a default-constructed tensor share the empty shape, so size is checked too.
  bool has_grad() const { return grad.size() == value.size() && grad.shape() == value.shape(); }
};

/// Handle to a node of the computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  explicit operator bool() const noexcept { return node_ != nullptr; }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }

  void zero_grad() {
    if (node_->has_grad()) node_->grad.fill(T{0});
  }

  const NodePtr& node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
void accumulate(const std::shared_ptr<Node<T>>& node, const Tensor<T>& delta) {
  if (!node->requires_grad) return;
  Tensor<T>& g = node->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

template <typename T>
Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, typename Node<T>::BackwardFn backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

}  // namespace detail

/// Runs reverse accumulation from a scalar root.
template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) {
    throw DimensionError("backward: root must be a scalar, got " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer().fill(T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->has_grad()) {
      node->backward(node->grad, node->parents);
    }
  }
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

/// a [.. x k] times b [k x n], or times b^T when b is [n x k] and transpose_b is set.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const std::size_t k = av.cols();
  if (bv.rank() != 2 || (transpose_b ? bv.dim(1) : bv.dim(0)) != k || av.rank() < 1) {
    throw DimensionError("matmul: cannot multiply " + shape_string(av.shape()) + " by " +
                         (transpose_b ? "transpose of " : "") + shape_string(bv.shape()));
  }
  const std::size_t m = av.size() / std::max<std::size_t>(k, 1);
  const std::size_t n = transpose_b ? bv.dim(0) : bv.dim(1);
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor<T> c(out_shape);
  if (transpose_b) {
    kernel::gemm_nt(av.data().data(), bv.data().data(), c.data().data(), m, k, n, false);
  } else {
    kernel::gemm_nn(av.data().data(), bv.data().data(), c.data().data(), m, k, n, false);
  }
  return detail::record<T>(std::move(c), {a, b},
                           [m, k, n, transpose_b](const Tensor<T>& g, auto parents) {
                             const auto& pa = parents[0];
                             const auto& pb = parents[1];
                             const T* gv = g.data().data();
                             if (pa->requires_grad) {
                               T* ga = pa->grad_buffer().data().data();
                               const T* bp = pb->value.data().data();
                               if (transpose_b) {
                                 kernel::gemm_nn(gv, bp, ga, m, n, k, true);
                               } else {
                                 kernel::gemm_nt(gv, bp, ga, m, n, k, true);
                               }
                             }
                             if (pb->requires_grad) {
                               T* gb = pb->grad_buffer().data().data();
                               const T* ap = pa->value.data().data();
                               if (transpose_b) {
                                 kernel::gemm_tn(gv, ap, gb, n, m, k, true);
                               } else {
                                 kernel::gemm_tn(ap, gv, gb, k, m, n, true);
                               }
                             }
                           });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = ringformer::add(a.value(), b.value());
  return detail::record<T>(std::move(out), {a, b}, [](const Tensor<T>& g, auto parents) {
    detail::accumulate(parents[0], g);
    detail::accumulate(parents[1], g);
  });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  Tensor<T> out = ringformer::add_bias(x.value(), bias.value());
  return detail::record<T>(std::move(out), {x, bias}, [](const Tensor<T>& g, auto parents) {
    detail::accumulate(parents[0], g);
    if (parents[1]->requires_grad) {
      Tensor<T>& gb = parents[1]->grad_buffer();
      const std::size_t d = gb.size();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
    }
  });
}

/// x . w + b, skipping the bias when it is a null Var.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Var<T> y = matmul(x, w);
  return b ? add_bias(y, b) : y;
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= factor;
  return detail::record<T>(std::move(out), {x}, [factor](const Tensor<T>& g, auto parents) {
    if (!parents[0]->requires_grad) return;
    Tensor<T>& gx = parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::record<T>(std::move(out), {a, b}, [](const Tensor<T>& g, auto parents) {
    for (int side = 0; side < 2; ++side) {
      if (!parents[side]->requires_grad) continue;
      const Tensor<T>& other = parents[1 - side]->value;
      Tensor<T>& gs = parents[side]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i] * other[i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total{0};
  for (T v : x.value().values()) total += v;
  return detail::record<T>(Tensor<T>::scalar(total), {x}, [](const Tensor<T>& g, auto parents) {
    if (!parents[0]->requires_grad) return;
    Tensor<T>& gx = parents[0]->grad_buffer();
    for (auto& v : gx.values()) v += g[0];
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  return detail::record<T>(ringformer::gelu(x.value()), {x}, [](const Tensor<T>& g, auto parents) {
    if (!parents[0]->requires_grad) return;
    const Tensor<T>& xv = parents[0]->value;
    Tensor<T>& gx = parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * kernel::gelu_grad(xv[i]);
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Tensor<T>& xv = x.value();
  const std::size_t d = xv.rank() ? xv.cols() : 0;
  if (d == 0) throw DimensionError("layer_norm: normalized extent is zero");
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw DimensionError("layer_norm: input " + shape_string(xv.shape()) + " with gamma " +
                         shape_string(gamma.shape()));
  }
  const std::size_t rows = xv.size() / d;
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    rstd[r] = kernel::layer_norm_row(xv.data().data() + r * d, gamma.value().data().data(),
                                     beta.value().data().data(), eps, xhat.data().data() + r * d,
                                     out.data().data() + r * d, d);
  }
  return detail::record<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), rstd = std::move(rstd), d, rows](const Tensor<T>& g, auto parents) {
        const Tensor<T>& gamma_v = parents[1]->value;
        if (parents[1]->requires_grad || parents[2]->requires_grad) {
          Tensor<T>& gg = parents[1]->grad_buffer();
          Tensor<T>& gbeta = parents[2]->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += g[r * d + j] * xhat[r * d + j];
              gbeta[j] += g[r * d + j];
            }
          }
        }
        if (!parents[0]->requires_grad) return;
        Tensor<T>& gx = parents[0]->grad_buffer();
        const T inv_d = T{1} / static_cast<T>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          T sum_g{0}, sum_gx{0};
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = g[r * d + j] * gamma_v[j];
            sum_g += gh;
            sum_gx += gh * xhat[r * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = g[r * d + j] * gamma_v[j];
            gx[r * d + j] += rstd[r] * (gh - inv_d * sum_g - xhat[r * d + j] * inv_d * sum_gx);
          }
        }
      });
}

/// Softmax over the last axis.
template <typename T>
Var<T> softmax(const Var<T>& x) {
  Tensor<T> out = ringformer::softmax(x.value(), x.value().rank() - 1);
  Tensor<T> saved = out;
  return detail::record<T>(std::move(out), {x}, [p = std::move(saved)](const Tensor<T>& g, auto parents) {
    if (!parents[0]->requires_grad) return;
    Tensor<T>& gx = parents[0]->grad_buffer();
    const std::size_t n = p.cols();
    for (std::size_t r = 0; r < p.size() / n; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * p[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += p[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

/// Inverted dropout: kept entries are scaled by 1/(1-rate).
template <typename T>
Var<T> dropout(const Var<T>& x, T rate, Rng& rng) {
  if (rate <= T{0}) return x;
  Tensor<T> mask(x.shape());
  const T keep_scale = T{1} / (T{1} - rate);
  for (auto& m : mask.values()) m = rng.uniform() >= static_cast<double>(rate) ? keep_scale : T{0};
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return detail::record<T>(std::move(out), {x}, [mask = std::move(mask)](const Tensor<T>& g, auto parents) {
    if (!parents[0]->requires_grad) return;
    Tensor<T>& gx = parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

/// Rows of x selected by index (embedding lookup, class-token readout).
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> index) {
  const Tensor<T>& xv = x.value();
  const std::size_t c = xv.cols(), r = xv.rows();
  Tensor<T> out(Shape{index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) {
      throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " outside " + std::to_string(r) +
                           " rows");
    }
    std::copy_n(xv.data().data() + index[i] * c, c, out.data().data() + i * c);
  }
  return detail::record<T>(std::move(out), {x}, [index = std::move(index), c](const Tensor<T>& g, auto parents) {
    if (!parents[0]->requires_grad) return;
    Tensor<T>& gx = parents[0]->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gx[index[i] * c + j] += g[i * c + j];
  });
}

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  const std::size_t c = a.cols();
  if (b.cols() != c) {
    throw DimensionError("concat_rows: " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t ra = a.value().size() / c, rb = b.value().size() / c;
  Tensor<T> out(Shape{ra + rb, c});
  std::copy(a.value().values().begin(), a.value().values().end(), out.values().begin());
  std::copy(b.value().values().begin(), b.value().values().end(), out.values().begin() + ra * c);
  return detail::record<T>(std::move(out), {a, b}, [split = ra * c](const Tensor<T>& g, auto parents) {
    if (parents[0]->requires_grad) {
      Tensor<T>& ga = parents[0]->grad_buffer();
      for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
    }
    if (parents[1]->requires_grad) {
      Tensor<T>& gb = parents[1]->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
    }
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::vector<int> targets, std::optional<int> ignore_index = std::nullopt) {
  Tensor<T> probs;
  const T loss = ringformer::cross_entropy(logits.value(), targets, ignore_index, &probs);
  std::size_t counted = 0;
  for (int t : targets) counted += !(ignore_index && t == *ignore_index);
  return detail::record<T>(
      Tensor<T>::scalar(loss), {logits},
      [probs = std::move(probs), targets = std::move(targets), ignore_index, counted](const Tensor<T>& g,
                                                                                      auto parents) {
        if (!parents[0]->requires_grad) return;
        Tensor<T>& gl = parents[0]->grad_buffer();
        const std::size_t classes = probs.cols();
        const T w = g[0] / static_cast<T>(counted);
        for (std::size_t i = 0; i < targets.size(); ++i) {
          if (ignore_index && targets[i] == *ignore_index) continue;
          for (std::size_t j = 0; j < classes; ++j) {
            const T onehot = static_cast<std::size_t>(targets[i]) == j ? T{1} : T{0};
            gl[i * classes + j] += w * (probs[i * classes + j] - onehot);
          }
        }
      });
}

/// Token offsets of a ragged batch: sequence s occupies rows [offset(s), offset(s+1)).
class SeqLayout {
 public:
  SeqLayout() : offsets_{0} {}

  static SeqLayout from_lengths(std::span<const std::size_t> lengths) {
    SeqLayout layout;
    for (std::size_t len : lengths) layout.offsets_.push_back(layout.offsets_.back() + len);
    return layout;
  }

  static SeqLayout uniform(std::size_t count, std::size_t length) {
    std::vector<std::size_t> lengths(count, length);
    return from_lengths(lengths);
  }

  std::size_t count() const noexcept { return offsets_.size() - 1; }
  std::size_t offset(std::size_t s) const { return offsets_[s]; }
  std::size_t length(std::size_t s) const { return offsets_[s + 1] - offsets_[s]; }
  std::size_t total() const noexcept { return offsets_.back(); }

  friend bool operator==(const SeqLayout&, const SeqLayout&) = default;

 private:
  std::vector<std::size_t> offsets_;
};

/// Options of the fused attention op.
template <typename T>
struct AttentionOptions {
  std::size_t heads = 1;
  bool causal = false;
  T dropout = T{0};
  Rng* rng = nullptr;
  // When set, receives one [heads x nq x nk] probability tensor per sequence
  // (pre-dropout).
  std::vector<Tensor<T>>* maps = nullptr;
};

/// Scaled dot-product attention over a ragged batch: already-projected q
/// [Nq x W] and k, v [Nk x W] are split into heads of width W/heads, and
/// sequence s of q attends only to sequence s of k/v.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const SeqLayout& q_layout,
                 const SeqLayout& kv_layout, const AttentionOptions<T>& opt) {
  const std::size_t width = q.cols();
  if (opt.heads == 0 || width % opt.heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " is not divisible by " +
                      std::to_string(opt.heads) + " heads");
  }
  if (k.cols() != width || v.cols() != width || q.rows() != q_layout.total() || k.rows() != kv_layout.total() ||
      v.rows() != kv_layout.total() || q_layout.count() != kv_layout.count()) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) + ", v " +
                         shape_string(v.shape()) + " do not match the sequence layout");
  }
  const std::size_t heads = opt.heads, d = width / heads;
  const bool drop = opt.dropout > T{0};
  if (drop && !opt.rng) throw ConfigError("attention dropout needs a random generator");

  // probability blocks per (sequence, head), and the dropout-scaled copy
  std::vector<std::size_t> block_offset(q_layout.count() + 1, 0);
  for (std::size_t s = 0; s < q_layout.count(); ++s)
    block_offset[s + 1] = block_offset[s] + heads * q_layout.length(s) * kv_layout.length(s);
  std::vector<T> probs(block_offset.back());
  std::vector<T> dropped;
  Tensor<T> out(Shape{q_layout.total(), width});
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();

  for (std::size_t s = 0; s < q_layout.count(); ++s) {
    const std::size_t nq = q_layout.length(s), nk = kv_layout.length(s);
    const std::size_t qo = q_layout.offset(s), ko = kv_layout.offset(s);
    auto blocked = [causal = opt.causal](std::size_t i, std::size_t j) { return causal && j > i; };
    for (std::size_t h = 0; h < heads; ++h) {
      kernel::attention_head<T>({qv.data().data() + qo * width + h * d, width},
                                {kv.data().data() + ko * width + h * d, width},
                                {vv.data().data() + ko * width + h * d, width}, nq, nk, d, blocked,
                                probs.data() + block_offset[s] + h * nq * nk,
                                out.data().data() + qo * width + h * d, width);
    }
    if (opt.maps) {
      opt.maps->emplace_back(Shape{heads, nq, nk},
                             std::vector<T>(probs.begin() + block_offset[s], probs.begin() + block_offset[s + 1]));
    }
  }

  if (drop) {
    const T keep_scale = T{1} / (T{1} - opt.dropout);
    dropped.resize(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i)
      dropped[i] = opt.rng->uniform() >= static_cast<double>(opt.dropout) ? probs[i] * keep_scale : T{0};
    for (std::size_t s = 0; s < q_layout.count(); ++s) {
      const std::size_t nq = q_layout.length(s), nk = kv_layout.length(s);
      const std::size_t qo = q_layout.offset(s), ko = kv_layout.offset(s);
      for (std::size_t h = 0; h < heads; ++h) {
        const T* p = dropped.data() + block_offset[s] + h * nq * nk;
        for (std::size_t i = 0; i < nq; ++i) {
          T* oi = out.data().data() + (qo + i) * width + h * d;
          std::fill(oi, oi + d, T{0});
          for (std::size_t j = 0; j < nk; ++j) {
            const T* vj = vv.data().data() + (ko + j) * width + h * d;
            for (std::size_t c = 0; c < d; ++c) oi[c] += p[i * nk + j] * vj[c];
          }
        }
      }
    }
  }

  return detail::record<T>(
      std::move(out), {q, k, v},
      [probs = std::move(probs), dropped = std::move(dropped), block_offset = std::move(block_offset), q_layout,
       kv_layout, heads, d, width, keep = drop ? T{1} / (T{1} - opt.dropout) : T{1}](const Tensor<T>& g,
                                                                                     auto parents) {
        const Tensor<T>& qv = parents[0]->value;
        const Tensor<T>& kv = parents[1]->value;
        const Tensor<T>& vv = parents[2]->value;
        T* gq = parents[0]->requires_grad ? parents[0]->grad_buffer().data().data() : nullptr;
        T* gk = parents[1]->requires_grad ? parents[1]->grad_buffer().data().data() : nullptr;
        T* gv = parents[2]->requires_grad ? parents[2]->grad_buffer().data().data() : nullptr;
        const T scale = T{1} / std::sqrt(static_cast<T>(d));
        std::vector<T> dp;
        for (std::size_t s = 0; s < q_layout.count(); ++s) {
          const std::size_t nq = q_layout.length(s), nk = kv_layout.length(s);
          const std::size_t qo = q_layout.offset(s), ko = kv_layout.offset(s);
          dp.assign(nk, T{0});
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + block_offset[s] + h * nq * nk;
            const T* pd = dropped.empty() ? p : dropped.data() + block_offset[s] + h * nq * nk;
            for (std::size_t i = 0; i < nq; ++i) {
              const T* gi = g.data().data() + (qo + i) * width + h * d;
              // dP'[j] = g_i . v_j ; dV_j += P'[i][j] g_i
              for (std::size_t j = 0; j < nk; ++j) {
                const T* vj = vv.data().data() + (ko + j) * width + h * d;
                T dot{0};
                for (std::size_t c = 0; c < d; ++c) dot += gi[c] * vj[c];
                dp[j] = dropped.empty() ? dot : (pd[i * nk + j] != T{0} ? dot * keep : T{0});
                if (gv) {
                  T* gvj = gv + (ko + j) * width + h * d;
                  const T w = pd[i * nk + j];
                  for (std::size_t c = 0; c < d; ++c) gvj[c] += w * gi[c];
                }
              }
              T row_dot{0};
              for (std::size_t j = 0; j < nk; ++j) row_dot += p[i * nk + j] * dp[j];
              const T* qi = qv.data().data() + (qo + i) * width + h * d;
              T* gqi = gq ? gq + (qo + i) * width + h * d : nullptr;
              for (std::size_t j = 0; j < nk; ++j) {
                const T ds = p[i * nk + j] * (dp[j] - row_dot) * scale;
                if (ds == T{0}) continue;
                const T* kj = kv.data().data() + (ko + j) * width + h * d;
                if (gqi)
                  for (std::size_t c = 0; c < d; ++c) gqi[c] += ds * kj[c];
                if (gk) {
                  T* gkj = gk + (ko + j) * width + h * d;
                  for (std::size_t c = 0; c < d; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace ringformer
