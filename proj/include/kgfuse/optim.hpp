// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kgfuse/params.hpp"
#include "kgfuse/tensor.hpp"

namespace kgfuse {

struct AdamOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Linear warmup over this fraction of total_steps, then constant.
  double warmup_fraction = 0.1;
  std::size_t total_steps = 0;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

class Adam {
 public:
  Adam(AdamOptions options, const ParamMap& params);

  // Applies one update from the current gradients (missing gradients count as
  // zero) and returns the pre-clip global gradient norm.
  double step();
  void zero_grad();

  double learning_rate(std::size_t step) const;
  std::size_t steps() const noexcept { return step_; }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamOptions options_;
  std::vector<Slot> slots_;
  std::size_t step_ = 0;
};

}  // namespace kgfuse
