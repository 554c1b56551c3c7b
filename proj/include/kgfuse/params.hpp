// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>

#include "kgfuse/rng.hpp"
#include "kgfuse/tensor.hpp"

namespace kgfuse {

// Name -> parameter map; std::map keeps iteration sorted by name, which fixes
// the order used by the optimizer and the checkpoint format.
using ParamMap = std::map<std::string, Tensor, std::less<>>;

class ParamSet {
 public:
  Tensor& add_zeros(const std::string& name, Shape shape);
  Tensor& add_constant(const std::string& name, Shape shape, double value);
  Tensor& add_normal(const std::string& name, Shape shape, double stddev, Rng& rng);

  Tensor& get(std::string_view name);
  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const { return params_.find(name) != params_.end(); }

  const ParamMap& items() const noexcept { return params_; }
  std::size_t scalar_count() const;
  void zero_grad();
  // Deep copy with fresh storage.
  ParamSet clone() const;

 private:
  Tensor& insert(const std::string& name, Tensor t);

  ParamMap params_;
};

}  // namespace kgfuse
