// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kgfuse/rng.hpp"
#include "kgfuse/tensor.hpp"

// Differentiable tensor ops. Shape errors raise Error(kShape) naming the op
// and the offending shapes.
namespace kgfuse::ops {

// Elementwise with numpy-style broadcasting of trailing dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x * factor + offset
Tensor affine(const Tensor& x, double factor, double offset);
inline Tensor scale(const Tensor& x, double factor) { return affine(x, factor, 0.0); }

// a(..., m, k) x b(k, n) or a(..., m, k) x b(..., k, n) with equal batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t end);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor relu(const Tensor& x);
// tanh approximation
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

// Softmax over the last axis with max subtraction. `mask`, when non-empty, has
// one entry per element; zero entries get probability exactly 0 and a row with
// no allowed entries becomes all zeros.
Tensor softmax(const Tensor& x, std::span<const std::uint8_t> mask = {});

// Normalizes over the last axis, then applies gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-9);

// Rows of table(V, d) selected by ids; output (ids.size(), d).
Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids);

// Mean negative log-likelihood over rows of logits(..., V) whose target is
// not ignore_id. Fused with log-softmax. Zero when every row is ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::int32_t ignore_id);

// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

}  // namespace kgfuse::ops

namespace kgfuse {
inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }
}  // namespace kgfuse
