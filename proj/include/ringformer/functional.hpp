#pragma once

// Forward math on plain tensors. The autograd ops in autograd.hpp call these
// same kernels, so a model forward pass and a hand-composed call sequence built
// from these functions agree bit for bit.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ringformer/errors.hpp"
#include "ringformer/tensor.hpp"

namespace ringformer {

namespace kernel {

// c[m x n] (+)= a[m x k] . b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] (+)= a[k x m]^T . b[k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = ap[i];
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

template <typename T>
void transpose(const T* a, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
}

// c[m x n] (+)= a[m x k] . b[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  std::vector<T> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

// Numerically stable softmax of one row. Entries equal to -inf get weight 0;
// a row that is entirely -inf yields all zeros.
template <typename T>
void softmax_row(const T* in, T* out, std::size_t n) {
  T hi = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) hi = std::max(hi, in[j]);
  if (hi == -std::numeric_limits<T>::infinity()) {
    std::fill(out, out + n, T{0});
    return;
  }
  T sum{0};
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - hi);
    sum += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
}

template <typename T>
T gelu(T x) {
  return x * T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

// d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
template <typename T>
T gelu_grad(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

// Normalizes one row; xhat receives the normalized values, the return value is 1/std.
template <typename T>
T layer_norm_row(const T* x, const T* gamma, const T* beta, T eps, T* xhat, T* out, std::size_t d) {
  T mean{0};
  for (std::size_t j = 0; j < d; ++j) mean += x[j];
  mean /= static_cast<T>(d);
  T var{0};
  for (std::size_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
  var /= static_cast<T>(d);
  const T rstd = T{1} / std::sqrt(var + eps);
  for (std::size_t j = 0; j < d; ++j) {
    xhat[j] = (x[j] - mean) * rstd;
    out[j] = xhat[j] * gamma[j] + beta[j];
  }
  return rstd;
}

// Strided view of one head: row i starts at base + i * stride, d contiguous values.
template <typename T>
struct HeadView {
  const T* base;
  std::size_t stride;
};

// One attention head. probs is nq x nk and receives the post-softmax weights;
// out rows (stride out_stride) receive the mixed values.
template <typename T, typename Blocked>
void attention_head(HeadView<T> q, HeadView<T> k, HeadView<T> v, std::size_t nq, std::size_t nk,
                    std::size_t d, Blocked&& blocked, T* probs, T* out, std::size_t out_stride) {
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  std::vector<T> logits(nk);
  for (std::size_t i = 0; i < nq; ++i) {
    const T* qi = q.base + i * q.stride;
    for (std::size_t j = 0; j < nk; ++j) {
      if (blocked(i, j)) {
        logits[j] = -std::numeric_limits<T>::infinity();
        continue;
      }
      const T* kj = k.base + j * k.stride;
      T dot{0};
      for (std::size_t c = 0; c < d; ++c) dot += qi[c] * kj[c];
      logits[j] = dot * scale;
    }
    T* pi = probs + i * nk;
    softmax_row(logits.data(), pi, nk);
    T* oi = out + i * out_stride;
    std::fill(oi, oi + d, T{0});
    for (std::size_t j = 0; j < nk; ++j) {
      const T w = pi[j];
      const T* vj = v.base + j * v.stride;
      for (std::size_t c = 0; c < d; ++c) oi[c] += w * vj[c];
    }
  }
}

}  // namespace kernel

/// Boolean attention mask; blocked(i, j) means query i may not see key j.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> blocked_flags;

  AttentionMask() = default;
  AttentionMask(std::size_t r, std::size_t c) : rows(r), cols(c), blocked_flags(r * c, 0) {}

  static AttentionMask causal(std::size_t n) {
    AttentionMask m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) m.block(i, j);
    return m;
  }

  void block(std::size_t i, std::size_t j) { blocked_flags[i * cols + j] = 1; }
  bool blocked(std::size_t i, std::size_t j) const { return blocked_flags[i * cols + j] != 0; }
};

/// Matrix product with leading batch extents. b may be 2-D (broadcast over a's
/// batch), a may be 2-D (broadcast over b's batch), or both share batch extents.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.shape().back() != b.shape()[b.rank() - 2]) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape().back();
  const std::size_t n = b.shape().back();
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  if (b_batch.empty()) {
    batch = a_batch;
  } else if (a_batch.empty() || a_batch == b_batch) {
    batch = b_batch;
  } else {
    throw DimensionError("matmul: batch extents of " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " do not broadcast");
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> c(out_shape);
  const std::size_t batches = shape_numel(batch);
  for (std::size_t s = 0; s < batches; ++s) {
    const T* ap = a.data().data() + (a_batch.empty() ? 0 : s * m * k);
    const T* bp = b.data().data() + (b_batch.empty() ? 0 : s * k * n);
    kernel::gemm_nn(ap, bp, c.data().data() + s * m * n, m, k, n, false);
  }
  return c;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const std::size_t extent = x.dim(axis);
  if (extent == 0) throw DimensionError("softmax: axis " + std::to_string(axis) + " is empty");
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t outer = x.size() / (extent * inner);
  Tensor<T> out(x.shape());
  std::vector<T> in_line(extent), out_line(extent);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      for (std::size_t j = 0; j < extent; ++j) in_line[j] = x[base + j * inner];
      kernel::softmax_row(in_line.data(), out_line.data(), extent);
      for (std::size_t j = 0; j < extent; ++j) out[base + j * inner] = out_line[j];
    }
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.rank() ? x.shape().back() : 0;
  if (d == 0) throw DimensionError("layer_norm: normalized extent is zero");
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " with gamma " +
                         shape_string(gamma.shape()) + " and beta " + shape_string(beta.shape()));
  }
  Tensor<T> out(x.shape());
  std::vector<T> xhat(d);
  for (std::size_t r = 0; r < x.size() / d; ++r) {
    kernel::layer_norm_row(x.data().data() + r * d, gamma.data().data(), beta.data().data(), eps,
                           xhat.data(), out.data().data() + r * d, d);
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = kernel::gelu(x[i]);
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

// x[..., d] + bias[d]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t d = x.cols();
  if (bias.size() != d) {
    throw DimensionError("add_bias: input " + shape_string(x.shape()) + " with bias " +
                         shape_string(bias.shape()));
  }
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % d];
  return out;
}

/// x . w (+ b). An empty bias tensor means no bias.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  Tensor<T> y = matmul(x, w);
  return b.empty() ? y : add_bias(y, b);
}

/// softmax(q k^T / sqrt(d)) v for one head. Masked positions get -inf logits;
/// a fully masked query row produces the zero vector.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionMask* mask = nullptr, Tensor<T>* probs = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
      k.dim(0) != v.dim(0) || q.dim(1) == 0) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) +
                         ", v " + shape_string(v.shape()));
  }
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1), dv = v.dim(1);
  if (dv != d) throw DimensionError("attention: value width must equal key width");
  if (mask && (mask->rows != nq || mask->cols != nk)) {
    throw DimensionError("attention: mask is " + std::to_string(mask->rows) + "x" +
                         std::to_string(mask->cols) + " for " + std::to_string(nq) + "x" +
                         std::to_string(nk) + " scores");
  }
  Tensor<T> out(Shape{nq, d});
  Tensor<T> p(Shape{nq, nk});
  auto blocked = [mask](std::size_t i, std::size_t j) { return mask && mask->blocked(i, j); };
  kernel::attention_head<T>({q.data().data(), d}, {k.data().data(), d}, {v.data().data(), d}, nq, nk, d,
                            blocked, p.data().data(), out.data().data(), d);
  if (probs) *probs = std::move(p);
  return out;
}

/// Weights of one attention sub-layer. Row-vector convention: y = x . W + b.
template <typename T>
struct AttentionProjections {
  Tensor<T> w_q, w_k, w_v, w_o;
  Tensor<T> b_q, b_k, b_v, b_o;  // empty when absent
};

/// Splits already-projected q/k/v [n x H] into heads, attends per head and
/// concatenates; probs (optional) receives [heads x nq x nk].
template <typename T>
Tensor<T> attend_heads(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                       const AttentionMask* mask = nullptr, Tensor<T>* probs = nullptr) {
  const std::size_t width = q.cols();
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t nq = q.rows(), nk = k.rows(), d = width / heads;
  if (k.cols() != width || v.cols() != width || v.rows() != nk) {
    throw DimensionError("attend_heads: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) +
                         ", v " + shape_string(v.shape()));
  }
  Tensor<T> out(Shape{nq, width});
  Tensor<T> p(Shape{heads, nq, nk});
  auto blocked = [mask](std::size_t i, std::size_t j) { return mask && mask->blocked(i, j); };
  for (std::size_t h = 0; h < heads; ++h) {
    kernel::attention_head<T>({q.data().data() + h * d, width}, {k.data().data() + h * d, width},
                              {v.data().data() + h * d, width}, nq, nk, d, blocked,
                              p.data().data() + h * nq * nk, out.data().data() + h * d, width);
  }
  if (probs) *probs = std::move(p);
  return out;
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x_q, const Tensor<T>& x_kv, const AttentionProjections<T>& w,
                               std::size_t heads, const AttentionMask* mask = nullptr,
                               Tensor<T>* probs = nullptr) {
  const Tensor<T> q = linear(x_q, w.w_q, w.b_q);
  const Tensor<T> k = linear(x_kv, w.w_k, w.b_k);
  const Tensor<T> v = linear(x_kv, w.w_v, w.b_v);
  return linear(attend_heads(q, k, v, heads, mask, probs), w.w_o, w.b_o);
}

/// gelu(x . W_up + b_up) . W_down + b_down
template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const Tensor<T>& w_up, const Tensor<T>& b_up,
                       const Tensor<T>& w_down, const Tensor<T>& b_down) {
  if (w_up.rank() != 2 || w_down.rank() != 2 || x.cols() != w_up.dim(0) || w_up.dim(1) != w_down.dim(0) ||
      w_down.dim(1) != x.cols()) {
    throw DimensionError("feed_forward: input " + shape_string(x.shape()) + ", W_up " +
                         shape_string(w_up.shape()) + ", W_down " + shape_string(w_down.shape()));
  }
  return linear(gelu(linear(x, w_up, b_up)), w_down, b_down);
}

/// Interleaved sin/cos encoding with frequency base 10000:
/// out[2k] = sin(index * w_k), out[2k+1] = cos(index * w_k), w_k = 10000^(-2k/d).
template <typename T>
Tensor<T> sinusoidal_encoding(std::size_t index, std::size_t d) {
  if (d % 2 != 0) throw ConfigError("sinusoidal encoding needs an even width, got " + std::to_string(d));
  Tensor<T> out(Shape{d});
  for (std::size_t k = 0; k < d / 2; ++k) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(d));
    const double angle = static_cast<double>(index) * freq;
    out[2 * k] = static_cast<T>(std::sin(angle));
    out[2 * k + 1] = static_cast<T>(std::cos(angle));
  }
  return out;
}

/// Mean negative log-likelihood of targets under softmax(logits) over the
/// positions whose target differs from ignore_index.
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                std::optional<int> ignore_index = std::nullopt, Tensor<T>* probs = nullptr) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) + " for " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  Tensor<T> p(logits.shape());
  T total{0};
  std::size_t counted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    kernel::softmax_row(logits.data().data() + i * classes, p.data().data() + i * classes, classes);
    if (ignore_index && targets[i] == *ignore_index) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= classes) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " outside [0," +
                           std::to_string(classes) + ")");
    }
    // log-sum-exp form keeps the loss finite for saturated logits
    const T* row = logits.data().data() + i * classes;
    T hi = row[0];
    for (std::size_t j = 1; j < classes; ++j) hi = std::max(hi, row[j]);
    T sum{0};
    for (std::size_t j = 0; j < classes; ++j) sum += std::exp(row[j] - hi);
    total += hi + std::log(sum) - row[targets[i]];
    ++counted;
  }
  if (counted == 0) throw NumericError("cross_entropy: every position is ignored, mean is undefined");
  if (probs) *probs = std::move(p);
  return total / static_cast<T>(counted);
}

}  // namespace ringformer
