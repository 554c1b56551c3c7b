// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/params.hpp"

#include "kgfuse/error.hpp"

namespace kgfuse {

Tensor& ParamSet::insert(const std::string& name, Tensor t) {
  auto [it, inserted] = params_.emplace(name, std::move(t));
  if (!inserted) throw Error(ErrorKind::kInvalidArgument, "duplicate parameter '" + name + "'");
  return it->second;
}

Tensor& ParamSet::add_zeros(const std::string& name, Shape shape) {
  return insert(name, Tensor::zeros(std::move(shape), true));
}

Tensor& ParamSet::add_constant(const std::string& name, Shape shape, double value) {
  return insert(name, Tensor::full(std::move(shape), value, true));
}

Tensor& ParamSet::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = normal(rng, stddev);
  return insert(name, Tensor::from(std::move(shape), std::move(values), true));
}

Tensor& ParamSet::get(std::string_view name) {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw Error(ErrorKind::kNotFound, "no parameter named '" + std::string(name) + "'");
  }
  return it->second;
}

const Tensor& ParamSet::get(std::string_view name) const {
  return const_cast<ParamSet*>(this)->get(name);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [name, t] : params_) out.params_.emplace(name, t.clone(true));
  return out;
}

}  // namespace kgfuse
