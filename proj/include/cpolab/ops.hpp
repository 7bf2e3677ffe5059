// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every op records a backward closure when at least
// one input requires gradients; otherwise it is a plain forward computation.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cpolab/tensor.hpp"

namespace cpolab::ops {

// [m,k] x [k,n] -> [m,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

// [m,n] + [n] broadcast over rows.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);

// Row-wise normalization of [m,n] with learned gain and bias of length n.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));

// Gathers rows of a [V,D] table. Throws InputError for ids >= V.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);

// Rows [begin, end) of a 2-D tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

// Multi-head causal self-attention on [T,D] projections. The result is the
// concatenation of per-head outputs, [T,D] with head h in columns
// [h*D/H, (h+1)*D/H).
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t n_heads);

// Max-stabilized log-softmax along `axis`; sums run in double.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);

// out[i] = x[i, index[i]] for a [m,n] input.
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::int32_t> index);

// log(max(1 - exp(x), eps)) elementwise; x is a log-probability.
template <typename T>
Tensor<T> log1m_exp(const Tensor<T>& x, T eps);

// Scalar sum_i weights[i] * x[i]; weights are constants.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> weights);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

} // namespace cpolab::ops
