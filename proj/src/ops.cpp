// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

#include "kgfuse/error.hpp"
#include "kgfuse/kernels.hpp"

namespace kgfuse::ops {

using detail::Node;

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw Error(ErrorKind::kShape,
              std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const std::string& detail) {
  throw Error(ErrorKind::kShape, std::string(op) + ": shape " + shape_str(a) + " " + detail);
}

std::span<double> grad_of(Node& n) { return n.grad_buffer(); }

// Flat input offsets for every output element of a broadcast binary op.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

std::shared_ptr<BroadcastPlan> plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  auto plan = std::make_shared<BroadcastPlan>();
  plan->out.assign(rank, 1);
  std::vector<std::size_t> a_dims(rank, 1), b_dims(rank, 1);
  std::copy(a.begin(), a.end(), a_dims.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), b_dims.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (a_dims[i] == b_dims[i] || b_dims[i] == 1) {
      plan->out[i] = a_dims[i];
    } else if (a_dims[i] == 1) {
      plan->out[i] = b_dims[i];
    } else {
      shape_error(op, a, b);
    }
  }
  auto strides = [&](const std::vector<std::size_t>& dims) {
    std::vector<std::size_t> s(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
      s[i] = dims[i] == 1 ? 0 : acc;
      acc *= dims[i];
    }
    return s;
  };
  const auto as = strides(a_dims);
  const auto bs = strides(b_dims);
  const std::size_t n = shape_numel(plan->out);
  plan->a_index.resize(n);
  plan->b_index.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t ao = 0, bo = 0;
    for (std::size_t i = 0; i < rank; ++i) {
      ao += idx[i] * as[i];
      bo += idx[i] * bs[i];
    }
    plan->a_index[flat] = ao;
    plan->b_index[flat] = bo;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < plan->out[i]) break;
      idx[i] = 0;
    }
  }
  return plan;
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinaryKind::kAdd: return x + y;
      case BinaryKind::kSub: return x - y;
      case BinaryKind::kMul: return x * y;
    }
    return 0.0;
  };
  const auto av = a.values();
  const auto bv = b.values();
  if (a.shape() == b.shape()) {
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
    return make_result(a.shape(), std::move(out), {&a, &b}, op, [kind](Node& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const auto& g = self.grad;
      if (pa.requires_grad) {
        auto ga = grad_of(pa);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += kind == BinaryKind::kMul ? g[i] * pb.value[i] : g[i];
        }
      }
      if (pb.requires_grad) {
        auto gb = grad_of(pb);
        for (std::size_t i = 0; i < g.size(); ++i) {
          gb[i] += kind == BinaryKind::kMul ? g[i] * pa.value[i]
                   : kind == BinaryKind::kSub ? -g[i]
                                              : g[i];
        }
      }
    });
  }
  auto plan = plan_broadcast(a.shape(), b.shape(), op);
  std::vector<double> out(plan->a_index.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = apply(av[plan->a_index[i]], bv[plan->b_index[i]]);
  }
  return make_result(plan->out, std::move(out), {&a, &b}, op, [kind, plan](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto ga = grad_of(pa);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[plan->a_index[i]] +=
            kind == BinaryKind::kMul ? g[i] * pb.value[plan->b_index[i]] : g[i];
      }
    }
    if (pb.requires_grad) {
      auto gb = grad_of(pb);
      for (std::size_t i = 0; i < g.size(); ++i) {
        gb[plan->b_index[i]] += kind == BinaryKind::kMul ? g[i] * pa.value[plan->a_index[i]]
                                : kind == BinaryKind::kSub ? -g[i]
                                                           : g[i];
      }
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(out), {&x}, op, [deriv](Node& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto gx = grad_of(px);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      gx[i] += self.grad[i] * deriv(px.value[i], self.value[i]);
    }
  });
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0 || x.shape().back() == 0) shape_error(op, x.shape(), "needs a non-empty last axis");
  return x.shape().back();
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor affine(const Tensor& x, double factor, double offset) {
  return unary(
      x, "affine", [=](double v) { return v * factor + offset; },
      [=](double, double) { return factor; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_error("matmul", a.shape(), b.shape());
  const std::size_t k = a.shape().back();
  const std::size_t m = a.shape()[a.rank() - 2];
  if (b.shape()[b.rank() - 2] != k) shape_error("matmul", a.shape(), b.shape());
  const std::size_t n = b.shape().back();
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  if (b.rank() == 2) {
    const std::size_t rows = a.numel() / k;
    std::vector<double> out(rows * n);
    kernels::gemm_nn(a.values(), b.values(), out, rows, k, n, false);
    return make_result(std::move(out_shape), std::move(out), {&a, &b}, "matmul",
                       [rows, k, n](Node& self) {
                         auto& pa = *self.parents[0];
                         auto& pb = *self.parents[1];
                         if (pa.requires_grad) {
                           kernels::gemm_nt(self.grad, pb.value, grad_of(pa), rows, n, k, true);
                         }
                         if (pb.requires_grad) {
                           kernels::gemm_tn(pa.value, self.grad, grad_of(pb), k, rows, n, true);
                         }
                       });
  }
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::size_t batch = a.numel() / (m * k);
  std::vector<double> out(batch * m * n);
  kernels::batched_gemm_nn(a.values(), b.values(), out, batch, m, k, n, false);
  return make_result(std::move(out_shape), std::move(out), {&a, &b}, "matmul",
                     [batch, m, k, n](Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       if (pa.requires_grad) {
                         kernels::batched_gemm_nt(self.grad, pb.value, grad_of(pa), batch, m, n, k,
                                                  true);
                       }
                       if (pb.requires_grad) {
                         kernels::batched_gemm_tn(pa.value, self.grad, grad_of(pb), batch, k, m, n,
                                                  true);
                       }
                     });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) shape_error("transpose", x.shape(), "needs rank >= 2");
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[x.rank() - 1], order[x.rank() - 2]);
  return permute(x, order);
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  if (order.size() != rank) shape_error("permute", x.shape(), "rank does not match permutation");
  std::vector<bool> seen(rank, false);
  for (auto o : order) {
    if (o >= rank || seen[o]) shape_error("permute", x.shape(), "invalid permutation");
    seen[o] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[order[i]];
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
  const std::size_t n = x.numel();
  auto index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < rank; ++i) src += idx[i] * in_strides[order[i]];
    (*index)[flat] = src;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  const auto xv = x.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*index)[i]];
  return make_result(std::move(out_shape), std::move(out), {&x}, "permute", [index](Node& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto gx = grad_of(px);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[(*index)[i]] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {&x}, "reshape", [](Node& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto gx = grad_of(px);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw Error(ErrorKind::kShape, "concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_error("concat", first, "axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) shape_error("concat", first, p.shape());
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.shape()[i] != first[i]) shape_error("concat", first, p.shape());
    }
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
  const std::size_t row = out_shape[axis] * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * widths[p]), widths[p],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    }
    offset += widths[p];
  }
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return make_result(std::move(out_shape), std::move(out), inputs, "concat",
                     [outer, row, widths](Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < widths.size(); ++p) {
                         auto& pp = *self.parents[p];
                         if (pp.requires_grad) {
                           auto gp = grad_of(pp);
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t j = 0; j < widths[p]; ++j) {
                               gp[o * widths[p] + j] += self.grad[o * row + offset + j];
                             }
                           }
                         }
                         offset += widths[p];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t end) {
  if (axis >= x.rank() || start > end || end > x.shape()[axis]) {
    shape_error("slice", x.shape(),
                "cannot take [" + std::to_string(start) + ", " + std::to_string(end) +
                    ") on axis " + std::to_string(axis));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - start;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t in_row = x.shape()[axis] * inner;
  const std::size_t out_row = (end - start) * inner;
  const std::size_t skip = start * inner;
  const auto xv = x.values();
  std::vector<double> out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * in_row + skip), out_row,
                out.begin() + static_cast<std::ptrdiff_t>(o * out_row));
  }
  return make_result(std::move(out_shape), std::move(out), {&x}, "slice",
                     [outer, in_row, out_row, skip](Node& self) {
                       auto& px = *self.parents[0];
                       if (!px.requires_grad) return;
                       auto gx = grad_of(px);
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t j = 0; j < out_row; ++j) {
                           gx[o * in_row + skip + j] += self.grad[o * out_row + j];
                         }
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({1}, {total}, {&x}, "sum", [](Node& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto gx = grad_of(px);
    for (auto& g : gx) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) shape_error("mean", x.shape(), "is empty");
  const double inv = 1.0 / static_cast<double>(x.numel());
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({1}, {total * inv}, {&x}, "mean", [inv](Node& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto gx = grad_of(px);
    for (auto& g : gx) g += self.grad[0] * inv;
  });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))); },
      [](double v, double) {
        const double u = kC * (v + kA * v * v * v);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax(const Tensor& x, std::span<const std::uint8_t> mask) {
  const std::size_t d = last_dim(x, "softmax");
  if (!mask.empty() && mask.size() != x.numel()) {
    shape_error("softmax", x.shape(), "does not match mask of " + std::to_string(mask.size()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values();
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    auto allowed = [&](std::size_t j) { return mask.empty() || mask[base + j] != 0; };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d; ++j) {
      if (allowed(j)) mx = std::max(mx, xv[base + j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (allowed(j)) {
        out[base + j] = std::exp(xv[base + j] - mx);
        total += out[base + j];
      }
    }
    for (std::size_t j = 0; j < d; ++j) out[base + j] /= total;
  }
  return make_result(x.shape(), std::move(out), {&x}, "softmax", [rows, d](Node& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto gx = grad_of(px);
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[base + j] * y[base + j];
      for (std::size_t j = 0; j < d; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = last_dim(x, "layer_norm");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    shape_error("layer_norm", x.shape(), gamma.shape());
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[base + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[base + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[base + j] - mu) * inv;
      (*xhat)[base + j] = h;
      out[base + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta}, "layer_norm",
                     [rows, d, xhat, inv_std](Node& self) {
                       auto& px = *self.parents[0];
                       auto& pg = *self.parents[1];
                       auto& pb = *self.parents[2];
                       const auto& g = self.grad;
                       if (pg.requires_grad) {
                         auto gg = grad_of(pg);
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                         }
                       }
                       if (pb.requires_grad) {
                         auto gb = grad_of(pb);
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                         }
                       }
                       if (px.requires_grad) {
                         auto gx = grad_of(px);
                         const double nd = static_cast<double>(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           const std::size_t base = r * d;
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double gh = g[base + j] * pg.value[j];
                             s1 += gh;
                             s2 += gh * (*xhat)[base + j];
                           }
                           const double inv = (*inv_std)[r];
                           for (std::size_t j = 0; j < d; ++j) {
                             const double gh = g[base + j] * pg.value[j];
                             gx[base + j] += inv / nd * (nd * gh - s1 - (*xhat)[base + j] * s2);
                           }
                         }
                       }
                     });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) shape_error("embedding_lookup", table.shape(), "must be (rows, dim)");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  auto saved = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  const auto tv = table.values();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw Error(ErrorKind::kShape, "embedding_lookup: id " + std::to_string(ids[i]) +
                                         " outside table of shape " + shape_str(table.shape()));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return make_result({ids.size(), d}, std::move(out), {&table}, "embedding_lookup",
                     [saved, d](Node& self) {
                       auto& pt = *self.parents[0];
                       if (!pt.requires_grad) return;
                       auto gt = grad_of(pt);
                       for (std::size_t i = 0; i < saved->size(); ++i) {
                         const auto row = static_cast<std::size_t>((*saved)[i]);
                         for (std::size_t j = 0; j < d; ++j) gt[row * d + j] += self.grad[i * d + j];
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::int32_t ignore_id) {
  const std::size_t v = last_dim(logits, "cross_entropy");
  const std::size_t rows = logits.numel() / v;
  if (targets.size() != rows) {
    shape_error("cross_entropy", logits.shape(),
                "does not match " + std::to_string(targets.size()) + " targets");
  }
  const auto lv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(logits.numel(), 0.0);
  auto saved = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto t = targets[r];
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw Error(ErrorKind::kShape, "cross_entropy: target " + std::to_string(t) +
                                         " outside " + std::to_string(v) + " classes");
    }
    const std::size_t base = r * v;
    double mx = lv[base];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, lv[base + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double e = std::exp(lv[base + j] - mx);
      (*probs)[base + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < v; ++j) (*probs)[base + j] /= z;
    total += (mx + std::log(z)) - lv[base + static_cast<std::size_t>(t)];
    ++count;
  }
  const double inv = count ? 1.0 / static_cast<double>(count) : 0.0;
  return make_result({1}, {total * inv}, {&logits}, "cross_entropy",
                     [probs, saved, v, inv, ignore_id](Node& self) {
                       auto& pl = *self.parents[0];
                       if (!pl.requires_grad) return;
                       auto gl = grad_of(pl);
                       const double g = self.grad[0] * inv;
                       for (std::size_t r = 0; r < saved->size(); ++r) {
                         const auto t = (*saved)[r];
                         if (t == ignore_id) continue;
                         const std::size_t base = r * v;
                         for (std::size_t j = 0; j < v; ++j) gl[base + j] += g * (*probs)[base + j];
                         gl[base + static_cast<std::size_t>(t)] -= g;
                       }
                     });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
  if (labels.size() != logits.numel()) {
    shape_error("bce_with_logits", logits.shape(),
                "does not match " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) shape_error("bce_with_logits", logits.shape(), "is empty");
  const auto lv = logits.values();
  auto saved = std::make_shared<std::vector<double>>(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double x = lv[i];
    total += std::max(x, 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double inv = 1.0 / static_cast<double>(labels.size());
  return make_result({1}, {total * inv}, {&logits}, "bce_with_logits", [saved, inv](Node& self) {
    auto& pl = *self.parents[0];
    if (!pl.requires_grad) return;
    auto gl = grad_of(pl);
    const double g = self.grad[0] * inv;
    for (std::size_t i = 0; i < saved->size(); ++i) {
      const double x = pl.value[i];
      const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      gl[i] += g * (s - (*saved)[i]);
    }
  });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw Error(ErrorKind::kInvalidArgument, "dropout rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  auto keep = std::make_shared<std::vector<double>>(x.numel());
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*keep)[i] = uniform_real(rng) >= rate ? keep_scale : 0.0;
    out[i] = xv[i] * (*keep)[i];
  }
  return make_result(x.shape(), std::move(out), {&x}, "dropout", [keep](Node& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto gx = grad_of(px);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * (*keep)[i];
  });
}

}  // namespace kgfuse::ops
