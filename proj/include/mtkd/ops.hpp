// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <type_traits>

#include "mtkd/autodiff.hpp"

namespace mtkd {

// Differentiable operations. Every op checks shapes up front (DimensionError
// naming both operands) and the tape rejects non-finite outputs.
//
// Scalars are taken as std::type_identity_t<T> so calls like scale(x, 0.5)
// work for both float and double graphs.

template <typename T>
using Scalar = std::type_identity_t<T>;

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// a * b^T, used for the tied output head.
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
/// Elementwise product.
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, Scalar<T> s);
/// Adds a 1xn row to every row of an mxn input.
template <typename T> Var<T> add_bias(Var<T> a, Var<T> bias);
/// x * w + bias as one node; same values as add_bias(matmul(x, w), bias).
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> bias);

template <typename T> Var<T> transpose(Var<T> a);
/// Row-major reinterpretation; rows*cols must equal the input size.
template <typename T> Var<T> reshape(Var<T> a, Index rows, Index cols);
template <typename T> Var<T> slice(Var<T> a, Index row0, Index col0, Index rows, Index cols);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);

template <typename T> Var<T> reduce_sum(Var<T> a);
template <typename T> Var<T> reduce_mean(Var<T> a);

/// Gathers table rows; the backward pass scatter-adds into the table.
template <typename T> Var<T> embedding_lookup(Var<T> table, std::span<const int> ids);

/// Per-row normalization with learnable 1xn gain and bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, Scalar<T> eps = Scalar<T>(1e-5));

/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T> Var<T> gelu(Var<T> x);

template <typename T> Var<T> softmax_rows(Var<T> logits);
/// Computed as x - max - log(sum exp(x - max)), not as log(softmax).
template <typename T> Var<T> log_softmax_rows(Var<T> logits);

/// Scores are stacked square blocks of size `block` (one per sequence and
/// head). Entry (i, j) of a block with j > i is replaced by `fill`.
template <typename T> Var<T> causal_mask_fill(Var<T> scores, Index block, Scalar<T> fill);

/// Multi-head causal self-attention over packed [q | k | v] rows.
///
/// `qkv` is (n_seq * seq_len) x (3 d); each group of seq_len rows is one
/// sequence. Output is (n_seq * seq_len) x d with heads concatenated.
template <typename T> Var<T> causal_self_attention(Var<T> qkv, int n_heads, Index seq_len);

/// sum(weights .* x) with constant weights; returns 1x1.
template <typename T> Var<T> weighted_sum(Var<T> x, const Matrix<T>& weights);

/// sum_r row_weights[r] * x(r, cols[r]); returns 1x1.
template <typename T>
Var<T> pick_weighted_sum(Var<T> x, std::span<const int> cols, std::span<const T> row_weights);

/// sum_r row_weights[r] * ||x_r - target_r||^2 with constant target; 1x1.
template <typename T>
Var<T> row_sq_dist(Var<T> x, const Matrix<T>& target, std::span<const T> row_weights);

// Plain (non-taped) kernels shared with inference paths.

template <typename T> Matrix<T> softmax_rows(const Matrix<T>& logits);
template <typename T> Matrix<T> log_softmax_rows(const Matrix<T>& logits);

/// Fixed GELU constants.
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

}  // namespace mtkd
