#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mlma/rng.hpp"
#include "mlma/tensor.hpp"

MLMA_NAMESPACE_BEGIN

// Differentiable primitives. Rank-2 tensors are row-major matrices; a rank-1
// tensor of length n is treated as a 1 x n row wherever a matrix is expected.

enum class Transpose { No, Yes };

/// a[m x k] * b[k x n], or a * b^T when `tb` is Yes (b is then n x k).
Tensor matmul(const Tensor& a, const Tensor& b, Transpose tb = Transpose::No);

// Elementwise binaries. `b` must match `a`, be a row of length a.cols()
// (broadcast down the rows), or be a single value.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, Real c);
Tensor add_scalar(const Tensor& a, Real c);
Tensor neg(const Tensor& a);

Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Column sums of an m x n matrix, shape 1 x n.
Tensor sum_rows(const Tensor& a);
Tensor mean_rows(const Tensor& a);

/// Euclidean norm of all entries; subgradient 0 at the origin.
Tensor l2_norm(const Tensor& a);
Tensor l1_norm(const Tensor& a);
/// Per-row Euclidean norm, shape m x 1.
Tensor row_norms(const Tensor& a);

/// Softmax along `axis` (0 = down columns, 1 = along rows) of a matrix.
/// Throws NumericError on non-finite input.
Tensor softmax(const Tensor& a, int axis = 1);
Tensor log_softmax(const Tensor& a);

inline constexpr std::int64_t kIgnoreTarget = -1;

/// Summed negative log-likelihood of `targets` under softmax(logits) rows.
/// Rows whose target is kIgnoreTarget contribute nothing.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = Real(1e-5));

/// Inverted dropout; identity when not training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
/// Row lookup; gradient scatters back into `table`.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);

struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

enum class AttentionMask {
  /// Position k attends to positions <= k.
  Causal,
  /// Position k attends to positions >= k.
  ReverseCausal,
};

/// Multi-head scaled dot-product attention over packed rows. Each segment is
/// an independent sequence; no attention crosses segment boundaries.
/// q, k, v are T x d with d divisible by `heads`.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const Segment> segments,
                        std::size_t heads, AttentionMask mask);

/// (1 / (|X| |Y|)) * sum_{x in X, y in Y} ||x - y||_2 over the rows of x and y.
Tensor mean_pairwise_distance(const Tensor& x, const Tensor& y);

/// stack is N x (L*D), layer blocks side by side; weights is N x L.
/// out[k, :] = sum_l weights[k, l] * stack[k, l-th block].
Tensor weighted_layer_sum(const Tensor& weights, const Tensor& stack);

/// weights is L x D. out[k, d] = sum_l weights[l, d] * stack[k, l*D + d].
Tensor dimwise_layer_sum(const Tensor& weights, const Tensor& stack);

/// LSTM cell nonlinearity. gates is N x 4h pre-activations ordered
/// [input, forget, candidate, output]; c_prev is N x h. Returns N x 2h
/// holding [h_next | c_next].
Tensor lstm_cell(const Tensor& gates, const Tensor& c_prev);

MLMA_NAMESPACE_END
