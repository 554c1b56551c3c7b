// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "kgfuse/tensor.hpp"

namespace kgfuse {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::vector<std::size_t> failing;  // flat indices above tolerance
  std::vector<double> analytic;
  std::vector<double> numeric;

  bool ok() const { return failing.empty(); }
};

// Compares the reverse-mode gradient of scalar f at x against the central
// difference (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every coordinate.
// Relative error is |a - n| / max(|a|, |n|, abs_floor); the floor keeps
// coordinates whose true gradient is ~0 from reporting round-off as error.
// `x` must require grad. Values of x are restored on return.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double eps,
                           double tol, double abs_floor = 1e-6);

}  // namespace kgfuse
