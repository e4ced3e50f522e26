#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "attune/graph.hpp"

ATTUNE_NAMESPACE_BEGIN

// Differentiable graph ops. Unless stated otherwise, binary elementwise ops
// require equal shapes and throw DimensionError otherwise.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real factor);
Var add_scalar(Var a, Real offset);
Var square(Var a);
Var sqrt(Var a);
Var log(Var a);
Var exp(Var a);
Var relu(Var a);
/// ln(1 + exp(a)), evaluated without overflow.
Var softplus(Var a);

/// Sum of all entries, as a one-element tensor.
Var sum(Var a);
Var mean(Var a);

Var reshape(Var a, Shape shape);
/// [N, ...] -> [N, prod(...)].
Var flatten(Var a);

/// Stride-1 valid cross-correlation.
/// input [N,C,H,W] (or [C,H,W]), kernels [O,C,kh,kw], bias [O]
/// -> [N,O,H-kh+1,W-kw+1] (or [O,...] for a rank-3 input).
/// Each output accumulates bias first, then input*kernel in (c, a, b) order.
Var conv2d_valid(Var input, Var kernels, Var bias);

/// Disjoint 2x2 max pooling over the last two axes of a rank-3 or rank-4
/// tensor. Ties route the gradient to the first cell in row-major order.
Var max_pool2(Var input);

/// x [N,in] * w [in,out] + b [out] -> [N,out].
Var affine(Var x, Var weight, Var bias);

/// Sum over rows of -log softmax(logits)[label]. logits [N,K].
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

/// gamma + sqrt(delta) * eps; throws NumericError if any delta <= 0.
Var lrt_sample(Var gamma, Var delta, const Tensor& eps);

/// Copy of x with the given flat positions overwritten by exactly 0.
/// No gradient flows to x through the overwritten entries.
Var clamp_zero(Var x, std::span<const std::size_t> positions);

/// x.flat[positions] as a rank-1 tensor; positions must be nonempty.
Var gather(Var x, std::span<const std::size_t> positions);

/// Elementwise log N(0 | gamma, max(delta, floor)).
Var gaussian_logpdf_at_zero(Var gamma, Var delta, Real delta_floor);

/// Closed-form KL( N(mu, softplus(raw_sigma)^2) || N(0, prior_std^2) ),
/// summed over all entries.
Var kl_to_prior(Var mu, Var raw_sigma, Real prior_std);

// Plain tensor helpers.

Real softplus(Real x);
Real sigmoid(Real x);
/// Row-wise softmax of a [N,K] tensor.
Tensor softmax_rows(const Tensor& logits);

ATTUNE_NAMESPACE_END
