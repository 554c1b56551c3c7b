// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "kgfuse/tensor.hpp"

// Layer helpers composed from kgfuse::ops, shared by the transformer and the
// fusion modules.
namespace kgfuse::nn {

// x(..., in) * w(in, out) + b(out)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w);

// (B, T, H*dh) -> (B, H, T, dh)
Tensor split_heads(const Tensor& x, std::size_t heads);
// (B, H, T, dh) -> (B, T, H*dh)
Tensor merge_heads(const Tensor& x);

struct Attention {
  Tensor out;      // (B, H, Tq, dh)
  Tensor weights;  // (B, H, Tq, Tk)
};

// Scaled dot-product attention; `mask` has one entry per (B, H, Tq, Tk)
// score, zero meaning "may not attend".
Attention attend(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::uint8_t> mask);

}  // namespace kgfuse::nn
