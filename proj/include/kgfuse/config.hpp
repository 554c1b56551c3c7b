// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "kgfuse/kg_fusion.hpp"
#include "kgfuse/task_synth.hpp"
#include "kgfuse/transformer.hpp"

namespace kgfuse {

// Flat key=value settings with dotted sections. '#' starts a comment line.
class Config {
 public:
  static Config parse(std::istream& in, const std::string& source = "config");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(std::string_view key) const { return values_.find(key) != values_.end(); }
  const std::map<std::string, std::string, std::less<>>& values() const noexcept { return values_; }

  std::string get(std::string_view key, const std::string& fallback) const;
  std::size_t get_size(std::string_view key, std::size_t fallback) const;
  std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const;
  double get_double(std::string_view key, double fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;

  // Values of `other` override ours.
  void merge(const Config& other);

 private:
  std::map<std::string, std::string, std::less<>> values_;
};

std::vector<std::string> preset_names();
// Throws kInvalidArgument for an unknown name.
Config preset(std::string_view name);
// The preset named by the `preset` key (if any) with the explicit keys on top.
// Unknown keys are rejected.
Config resolve_config(const Config& explicit_values);

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double lr = 3e-4;
  double warmup_fraction = 0.1;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct FuseOptions {
  TrainOptions train{10, 16, 1e-4, 0.1, 1.0, 0};
  // Train only fusion.* parameters; the base LM stays as pretrained.
  bool freeze_base = true;
  // Extra training graphs with resampled objects over the same entities.
  std::size_t counterfactual_graphs = 0;
  // Include QA over the real training facts.
  bool real_qa = true;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SynthSpec synth;
  ModelConfig lm;      // vocab_size is filled from the vocabulary at run time
  ModelConfig scorer;  // likewise
  TrainOptions lm_train;
  TrainOptions scorer_train{10, 16, 1e-3, 0.1, 1.0, 0};
  FusionConfig fusion;
  FuseOptions fuse;
  std::vector<FusionMode> modes;  // modes compared by the experiment runner
  std::size_t max_new_tokens = 8;
  std::size_t bootstrap_resamples = 10000;

  static RunConfig from(const Config& c);
  void validate() const;
};

}  // namespace kgfuse
