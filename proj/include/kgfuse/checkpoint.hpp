// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "kgfuse/kg_fusion.hpp"
#include "kgfuse/params.hpp"
#include "kgfuse/transformer.hpp"

namespace kgfuse {

// Binary layout, little-endian throughout:
//   "KGFCKPT\0", u32 version, u32 kind, u64 step, u64 seed,
//   u32 header count, (u32 len, key, u32 len, value)...,
//   u32 param count, (u32 len, name, u32 rank, u64 dims..., f32 values...)...,
//   u64 FNV-1a hash of every preceding byte.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { kLm = 1, kScorer = 2, kFused = 3 };

std::string_view to_string(CheckpointKind kind);

struct StoredTensor {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::kLm;
  // Config echo: model.* keys, plus fusion.* keys for fused models.
  std::map<std::string, std::string> header;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::map<std::string, StoredTensor> params;  // sorted by name
};

Checkpoint make_checkpoint(CheckpointKind kind, std::map<std::string, std::string> header, const ParamSet& params,
                           std::uint64_t step, std::uint64_t seed);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies stored values into `params`; names and shapes must match exactly.
void load_params(const Checkpoint& ckpt, ParamSet& params);

void save_model(const std::filesystem::path& path, const TransformerModel& m, std::uint64_t step,
                std::uint64_t seed);
void save_model(const std::filesystem::path& path, const FusedModel& m, std::uint64_t step, std::uint64_t seed);

// Rebuild a model from a checkpoint; the kind must match.
TransformerModel load_lm(const Checkpoint& ckpt);
TransformerModel load_scorer(const Checkpoint& ckpt);
FusedModel load_fused(const Checkpoint& ckpt);

}  // namespace kgfuse
