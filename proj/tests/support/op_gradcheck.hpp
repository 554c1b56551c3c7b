// Randomized finite-difference checks for every registered autodiff op.
// Shared by the unit tests and the acceptance suite.
#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "kgfuse/grad_check.hpp"
#include "kgfuse/ops.hpp"
#include "kgfuse/params.hpp"
#include "kgfuse/rng.hpp"

namespace kgfuse::testing {

struct OpCase {
  std::string name;
  // Builds the input to differentiate and the scalar function of it.
  std::function<std::pair<Tensor, std::function<Tensor(const Tensor&)>>(Rng&)> make;
};

inline Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = false, double stddev = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng, stddev);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline std::size_t rand_dim(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + uniform_index(rng, hi - lo + 1);
}

// sum(y * w) with a fixed random w so every output coordinate matters.
inline Tensor weighted_sum(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

inline std::vector<OpCase> op_cases() {
  using Fn = std::function<Tensor(const Tensor&)>;
  std::vector<OpCase> cases;
  auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> op) {
    cases.push_back({name, [op](Rng& rng) {
                       Shape s{rand_dim(rng, 1, 4), rand_dim(rng, 1, 5)};
                       Tensor x = random_tensor(rng, s, true);
                       Tensor y0 = op(x);
                       Tensor w = random_tensor(rng, y0.shape());
                       return std::pair{x, Fn([op, w](const Tensor& t) { return weighted_sum(op(t), w); })};
                     }});
  };
  auto binary = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op) {
    // x as left operand, same shape
    cases.push_back({name + "/left", [op](Rng& rng) {
                       Shape s{rand_dim(rng, 1, 4), rand_dim(rng, 1, 5)};
                       Tensor x = random_tensor(rng, s, true);
                       Tensor other = random_tensor(rng, s);
                       Tensor w = random_tensor(rng, s);
                       return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(op(t, other), w); })};
                     }});
    // x as a broadcast right operand
    cases.push_back({name + "/broadcast", [op](Rng& rng) {
                       const std::size_t rows = rand_dim(rng, 1, 4), cols = rand_dim(rng, 1, 5);
                       Tensor x = random_tensor(rng, {cols}, true);
                       Tensor other = random_tensor(rng, {rows, cols});
                       Tensor w = random_tensor(rng, {rows, cols});
                       return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(op(other, t), w); })};
                     }});
    cases.push_back({name + "/column", [op](Rng& rng) {
                       const std::size_t b = rand_dim(rng, 1, 3), rows = rand_dim(rng, 1, 4),
                                         cols = rand_dim(rng, 1, 5);
                       Tensor x = random_tensor(rng, {b, rows, 1}, true);
                       Tensor other = random_tensor(rng, {b, rows, cols});
                       Tensor w = random_tensor(rng, {b, rows, cols});
                       return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(op(t, other), w); })};
                     }});
  };
  binary("add", [](const Tensor& a, const Tensor& b) { return ops::add(a, b); });
  binary("sub", [](const Tensor& a, const Tensor& b) { return ops::sub(a, b); });
  binary("mul", [](const Tensor& a, const Tensor& b) { return ops::mul(a, b); });
  unary("affine", [](const Tensor& x) { return ops::affine(x, -1.7, 0.3); });
  unary("relu", [](const Tensor& x) { return ops::relu(x); });
  unary("gelu", [](const Tensor& x) { return ops::gelu(x); });
  unary("sigmoid", [](const Tensor& x) { return ops::sigmoid(x); });
  unary("tanh", [](const Tensor& x) { return ops::tanh(x); });
  unary("softmax", [](const Tensor& x) { return ops::softmax(x); });
  unary("transpose", [](const Tensor& x) { return ops::transpose(x); });
  unary("reshape", [](const Tensor& x) { return ops::reshape(x, {x.numel()}); });
  unary("sum", [](const Tensor& x) { return ops::sum(x); });
  unary("mean", [](const Tensor& x) { return ops::mean(x); });
  unary("self_mul", [](const Tensor& x) { return ops::mul(x, x); });
  cases.push_back({"softmax/masked", [](Rng& rng) {
                     Shape s{rand_dim(rng, 1, 4), rand_dim(rng, 2, 6)};
                     Tensor x = random_tensor(rng, s, true);
                     std::vector<std::uint8_t> mask(x.numel());
                     for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % s[1] == 0) || uniform_real(rng) < 0.6;
                     Tensor w = random_tensor(rng, s);
                     return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(ops::softmax(t, mask), w); })};
                   }});
  cases.push_back({"matmul/left", [](Rng& rng) {
                     const std::size_t m = rand_dim(rng, 1, 4), k = rand_dim(rng, 1, 4), n = rand_dim(rng, 1, 4);
                     Tensor x = random_tensor(rng, {2, m, k}, true);
                     Tensor b = random_tensor(rng, {k, n});
                     Tensor w = random_tensor(rng, {2, m, n});
                     return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(ops::matmul(t, b), w); })};
                   }});
  cases.push_back({"matmul/shared_right", [](Rng& rng) {
                     const std::size_t m = rand_dim(rng, 1, 4), k = rand_dim(rng, 1, 4), n = rand_dim(rng, 1, 4);
                     Tensor a = random_tensor(rng, {3, m, k});
                     Tensor x = random_tensor(rng, {k, n}, true);
                     Tensor w = random_tensor(rng, {3, m, n});
                     return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(ops::matmul(a, t), w); })};
                   }});
  cases.push_back({"matmul/batched", [](Rng& rng) {
                     const std::size_t m = rand_dim(rng, 1, 4), k = rand_dim(rng, 1, 4), n = rand_dim(rng, 1, 4);
                     Tensor a = random_tensor(rng, {2, 2, m, k});
                     Tensor x = random_tensor(rng, {2, 2, k, n}, true);
                     Tensor w = random_tensor(rng, {2, 2, m, n});
                     return std::pair{x, Fn([=](const Tensor& t) {
                                        return ops::add(weighted_sum(ops::matmul(a, t), w),
                                                        ops::sum(ops::matmul(ops::transpose(t), ops::transpose(a))));
                                      })};
                   }});
  cases.push_back({"permute", [](Rng& rng) {
                     Shape s{rand_dim(rng, 1, 3), rand_dim(rng, 1, 3), rand_dim(rng, 1, 3), rand_dim(rng, 1, 3)};
                     Tensor x = random_tensor(rng, s, true);
                     Tensor w = random_tensor(rng, {s[2], s[0], s[3], s[1]});
                     return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(ops::permute(t, {2, 0, 3, 1}), w); })};
                   }});
  cases.push_back({"concat", [](Rng& rng) {
                     const std::size_t r = rand_dim(rng, 1, 3), c1 = rand_dim(rng, 1, 4), c2 = rand_dim(rng, 1, 4);
                     Tensor x = random_tensor(rng, {r, c1}, true);
                     Tensor other = random_tensor(rng, {r, c2});
                     Tensor w = random_tensor(rng, {r, c1 + c2 + c1});
                     return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(ops::concat({t, other, t}, 1), w); })};
                   }});
  cases.push_back({"concat/axis0", [](Rng& rng) {
                     const std::size_t c = rand_dim(rng, 1, 4), r1 = rand_dim(rng, 1, 3), r2 = rand_dim(rng, 1, 3);
                     Tensor x = random_tensor(rng, {r1, c}, true);
                     Tensor other = random_tensor(rng, {r2, c});
                     Tensor w = random_tensor(rng, {r2 + r1, c});
                     return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(ops::concat({other, t}, 0), w); })};
                   }});
  cases.push_back({"slice", [](Rng& rng) {
                     const std::size_t r = rand_dim(rng, 1, 3), c = rand_dim(rng, 2, 6);
                     Tensor x = random_tensor(rng, {r, c}, true);
                     const std::size_t start = uniform_index(rng, c - 1);
                     const std::size_t end = start + 1 + uniform_index(rng, c - start - 1 + 1) ;
                     const std::size_t e = std::min(end, c);
                     Tensor w = random_tensor(rng, {r, e - start});
                     return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(ops::slice(t, 1, start, e), w); })};
                   }});
  cases.push_back({"layer_norm/input", [](Rng& rng) {
                     Shape s{rand_dim(rng, 1, 4), rand_dim(rng, 2, 6)};
                     Tensor x = random_tensor(rng, s, true);
                     Tensor gamma = random_tensor(rng, {s[1]});
                     Tensor beta = random_tensor(rng, {s[1]});
                     Tensor w = random_tensor(rng, s);
                     return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(ops::layer_norm(t, gamma, beta), w); })};
                   }});
  cases.push_back({"layer_norm/gamma", [](Rng& rng) {
                     Shape s{rand_dim(rng, 1, 4), rand_dim(rng, 2, 6)};
                     Tensor input = random_tensor(rng, s);
                     Tensor x = random_tensor(rng, {s[1]}, true);
                     Tensor beta = random_tensor(rng, {s[1]}, true);
                     Tensor w = random_tensor(rng, s);
                     return std::pair{x, Fn([=](const Tensor& t) {
                                        return weighted_sum(ops::layer_norm(input, t, ops::mul(t, beta)), w);
                                      })};
                   }});
  cases.push_back({"embedding_lookup", [](Rng& rng) {
                     const std::size_t v = rand_dim(rng, 2, 6), d = rand_dim(rng, 1, 4), n = rand_dim(rng, 1, 8);
                     Tensor x = random_tensor(rng, {v, d}, true);
                     std::vector<std::int32_t> ids(n);
                     for (auto& id : ids) id = static_cast<std::int32_t>(uniform_index(rng, v));
                     Tensor w = random_tensor(rng, {n, d});
                     return std::pair{x, Fn([=](const Tensor& t) { return weighted_sum(ops::embedding_lookup(t, ids), w); })};
                   }});
  cases.push_back({"cross_entropy", [](Rng& rng) {
                     const std::size_t rows = rand_dim(rng, 1, 5), v = rand_dim(rng, 2, 6);
                     Tensor x = random_tensor(rng, {rows, v}, true);
                     std::vector<std::int32_t> targets(rows);
                     for (auto& t : targets) t = static_cast<std::int32_t>(uniform_index(rng, v));
                     targets[0] = -1;  // ignored row
                     return std::pair{x, Fn([=](const Tensor& t) { return ops::cross_entropy(t, targets, -1); })};
                   }});
  cases.push_back({"bce_with_logits", [](Rng& rng) {
                     const std::size_t n = rand_dim(rng, 1, 6);
                     Tensor x = random_tensor(rng, {n}, true, 2.0);
                     std::vector<double> labels(n);
                     for (auto& l : labels) l = uniform_real(rng) < 0.5 ? 0.0 : 1.0;
                     return std::pair{x, Fn([=](const Tensor& t) { return ops::bce_with_logits(t, labels); })};
                   }});
  cases.push_back({"dropout", [](Rng& rng) {
                     Shape s{rand_dim(rng, 1, 4), rand_dim(rng, 1, 5)};
                     Tensor x = random_tensor(rng, s, true);
                     Tensor w = random_tensor(rng, s);
                     const auto seed = rng();
                     return std::pair{x, Fn([=](const Tensor& t) {
                                        Rng local(seed);
                                        return weighted_sum(ops::dropout(t, 0.3, local), w);
                                      })};
                   }});
  return cases;
}

struct ParamCheck {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// Finite-difference check of `loss` against every parameter in the set. The
// loss closure reads the parameters through shared storage.
inline ParamCheck check_params(const ParamMap& params, const std::function<Tensor()>& loss,
                               double eps = 1e-5, double tol = 1e-4) {
  ParamCheck out;
  for (const auto& [name, t] : params) {
    Tensor x = t;
    auto rep = grad_check([&](const Tensor&) { return loss(); }, x, eps, tol);
    out.checked += rep.checked;
    if (rep.max_rel_error >= out.max_rel_error) {
      out.max_rel_error = rep.max_rel_error;
      out.worst = name;
    }
  }
  return out;
}

}  // namespace kgfuse::testing
