// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/nn.hpp"

#include <cmath>

#include "kgfuse/error.hpp"
#include "kgfuse/ops.hpp"

namespace kgfuse::nn {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ops::add(ops::matmul(x, w), b);
}

Tensor linear(const Tensor& x, const Tensor& w) { return ops::matmul(x, w); }

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || x.dim(2) % heads != 0) {
    throw Error(ErrorKind::kShape, "split_heads: shape " + shape_str(x.shape()) +
                                       " not divisible into " + std::to_string(heads) + " heads");
  }
  const std::size_t b = x.dim(0), t = x.dim(1), dh = x.dim(2) / heads;
  return ops::permute(ops::reshape(x, {b, t, heads, dh}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) throw Error(ErrorKind::kShape, "merge_heads: expected rank 4, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(1), t = x.dim(2), dh = x.dim(3);
  return ops::reshape(ops::permute(x, {0, 2, 1, 3}), {b, t, h * dh});
}

Attention attend(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::uint8_t> mask) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k)), scale);
  Tensor weights = ops::softmax(scores, mask);
  return {ops::matmul(weights, v), weights};
}

}  // namespace kgfuse::nn
