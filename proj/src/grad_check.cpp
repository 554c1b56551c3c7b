// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "kgfuse/error.hpp"

namespace kgfuse {

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double eps,
                           double tol, double abs_floor) {
  if (!x.requires_grad()) {
    throw Error(ErrorKind::kInvalidArgument, "grad_check: x must require grad");
  }
  GradCheckReport report;
  auto& tape = Tape::current();
  tape.clear();
  x.zero_grad();
  Tensor y = f(x);
  backward(y);
  const auto g = x.grad();
  report.analytic.assign(x.numel(), 0.0);
  if (!g.empty()) std::copy(g.begin(), g.end(), report.analytic.begin());
  tape.clear();

  NoGradGuard no_grad;
  auto values = x.mutable_values();
  report.numeric.resize(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = f(x).item();
    values[i] = saved - eps;
    const double down = f(x).item();
    values[i] = saved;
    const double num = (up - down) / (2.0 * eps);
    report.numeric[i] = num;
    const double a = report.analytic[i];
    const double denom = std::max({std::abs(a), std::abs(num), abs_floor});
    const double rel = std::abs(a - num) / denom;
    report.max_rel_error = std::max(report.max_rel_error, rel);
    if (!(rel < tol)) report.failing.push_back(i);
    ++report.checked;
  }
  return report;
}

}  // namespace kgfuse
