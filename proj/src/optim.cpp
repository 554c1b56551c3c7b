// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/optim.hpp"

#include <algorithm>
#include <cmath>

#include "kgfuse/error.hpp"

namespace kgfuse {

Adam::Adam(AdamOptions options, const ParamMap& params) : options_(options) {
  if (!(options_.lr > 0.0)) throw Error(ErrorKind::kInvalidArgument, "adam: lr must be positive");
  for (const auto& [name, t] : params) {
    slots_.push_back({name, t, std::vector<double>(t.numel(), 0.0), std::vector<double>(t.numel(), 0.0)});
  }
}

double Adam::learning_rate(std::size_t step) const {
  const auto warmup = static_cast<std::size_t>(
      std::ceil(options_.warmup_fraction * static_cast<double>(options_.total_steps)));
  if (warmup == 0 || step >= warmup) return options_.lr;
  return options_.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

double Adam::step() {
  double sq = 0.0;
  for (const auto& s : slots_) {
    for (double g : s.param.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw Error(ErrorKind::kDiverged, "adam: non-finite gradient");
  double clip = 1.0;
  if (options_.clip_norm > 0.0 && norm > options_.clip_norm) clip = options_.clip_norm / norm;

  const double lr = learning_rate(step_);
  ++step_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  for (auto& s : slots_) {
    auto values = s.param.mutable_values();
    const auto grad = s.param.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i] * clip;
      s.m[i] = options_.beta1 * s.m[i] + (1.0 - options_.beta1) * g;
      s.v[i] = options_.beta2 * s.v[i] + (1.0 - options_.beta2) * g * g;
      values[i] -= lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + options_.eps);
    }
  }
  return norm;
}

void Adam::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

}  // namespace kgfuse
