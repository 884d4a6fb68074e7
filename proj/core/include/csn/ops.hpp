// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "csn/tape.hpp"

// Differentiable primitives. Every op records its forward value on the
// operands' tape together with a backward rule; shapes are checked up front
// and reported as DimensionError.
namespace csn::ops {

constexpr double kCrossEntropyEps = 1e-12;
constexpr double kCosineEps = 1e-8;

enum class Transpose { No, Yes };

/// [m x k] * [k x n], or [m x k] * [n x k]^T when transpose_b is Yes.
Var matmul(Var a, Var b, Transpose transpose_b = Transpose::No);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// x[..., N] + b[N]
Var add_bias(Var x, Var b);
/// x[B, C, H, W] + b[C]
Var add_channel_bias(Var x, Var b);
Var scale(Var x, double factor);
/// Element-wise product with a constant tensor of the same shape.
Var mul_const(Var x, const Tensor& c);
/// s[1] * x
Var mul_scalar(Var x, Var s);

Var reshape(Var x, Shape shape);
/// Column-wise concatenation of 2-D tensors with equal row counts.
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
/// Columns [begin, end) of a 2-D tensor.
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var gather_rows(Var x, std::span<const std::size_t> index);
/// [B x F] -> [B x F*group], each value repeated over a contiguous group.
Var repeat_groups(Var x, std::size_t group);

/// Stride-1 same-padding convolution, x[B, Cin, H, W] with w[Cout, Cin, K, K],
/// K odd. Implemented through explicit patch-matrix expansion.
Var conv2d(Var x, Var w);
/// 2x2 max-pool with stride 2; odd edges are pooled over the partial window.
Var maxpool2x2(Var x);

Var sum(Var x);
Var mean(Var x);

Var tanh(Var x);
Var sigmoid(Var x);
Var relu(Var x);
Var log(Var x);
/// Softmax over the last axis, max-subtracted.
Var softmax(Var x);

/// 1 - tanh(x)^2, itself differentiable.
Var tanh_derivative(Var x);

/// -sum_rows sum_c y_c log p_c over [B x C] rows. Probabilities below
/// kCrossEntropyEps are clamped and counted in TapeCounters::ce_clamps.
Var cross_entropy(Var probs, Var targets);
/// Fused softmax + cross-entropy over logits rows; backward is softmax - y.
Var softmax_cross_entropy(Var logits, Var targets);

/// Passes the value through; no gradient flows to the operand.
Var stop_gradient(Var x);

/// Cosine similarity matrix [B x n] between rows of q[B x d] and k[n x d];
/// the denominator is |q||k| + eps.
Var cosine_similarity(Var q, Var k, double eps = kCosineEps);
/// out[i*L + l, c] = a[i, l] * e[i, c] for a[n x L], e[n x C].
Var row_outer(Var a, Var e);

/// Names of all ops covered by the self-check.
std::vector<std::string> op_names();

/// Test hook: scales the backward rule of the named op by `factor`. An empty
/// name disables injection.
void inject_backward_fault(const std::string& op, double factor = 1.01);

}  // namespace csn::ops
