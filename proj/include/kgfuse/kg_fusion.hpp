// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgfuse/entity_linker.hpp"
#include "kgfuse/kg_store.hpp"
#include "kgfuse/kgbert.hpp"
#include "kgfuse/transformer.hpp"

namespace kgfuse {

enum class FusionMode { kGatedInjection, kKgAttentionLayer, kCrossLayerAdapter, kDedicatedHead };

std::string_view to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view name);
inline constexpr FusionMode kAllFusionModes[] = {FusionMode::kGatedInjection, FusionMode::kKgAttentionLayer,
                                                 FusionMode::kCrossLayerAdapter, FusionMode::kDedicatedHead};

struct FusionConfig {
  FusionMode mode = FusionMode::kGatedInjection;
  // Site layer; unset picks the middle layer, or the last one for the
  // dedicated head.
  std::optional<std::size_t> layer;
  std::size_t radius = 1;
  // Heads of the kg-attention-layer block; 0 uses the LM's head count.
  std::size_t heads = 0;
  // Feed-forward width of the kg-attention-layer block; 0 uses the LM's.
  std::size_t d_ff = 0;
  bool cotrain_kg = false;

  std::size_t site(const ModelConfig& lm) const;
  void validate(const ModelConfig& lm) const;
  std::map<std::string, std::string> to_map() const;
  static FusionConfig from_map(const std::map<std::string, std::string>& kv);

  bool operator==(const FusionConfig&) const = default;
};

struct MemoryRow {
  enum class Kind { kEntity, kTriple };
  Kind kind = Kind::kEntity;
  EntityId entity = 0;  // for entity rows
  Triple triple;        // for triple rows
  // First token position allowed to read this row: the last token of the
  // earliest alignment that brought it in.
  std::size_t ready = 0;

  bool operator==(const MemoryRow&) const = default;
};

// KG vectors visible to one input sequence. Entity rows (sorted by id) come
// first, then neighbor-triple rows (sorted). Row values are linear in the
// embedding table: row r = sum_c selection[r][c] * table_row(c), where table
// rows are entities followed by relations.
struct KgMemory {
  std::vector<MemoryRow> rows;
  std::vector<double> selection;  // rows x table_rows
  std::size_t table_rows = 0;

  bool empty() const noexcept { return rows.empty(); }
  std::size_t size() const noexcept { return rows.size(); }
  // Unprojected row values (rows x d_kg).
  std::vector<double> values(const KgEmbeddingTable& table) const;
};

KgMemory build_memory(std::span<const Alignment> alignments, const KnowledgeGraph& g,
                      const KgEmbeddingTable& table, const FusionConfig& cfg);
inline KgMemory build_memory(const LinkedSequence& ls, const KnowledgeGraph& g, const KgEmbeddingTable& table,
                             const FusionConfig& cfg) {
  return build_memory(ls.alignments, g, table, cfg);
}

// Token ids plus the alignments that drive fusion. Alignments may cover only
// a prefix (e.g. the question of a question + answer sequence).
struct FusionInput {
  std::vector<TokenId> ids;
  std::vector<Alignment> alignments;
};

FusionInput fusion_input(const LinkedSequence& ls);

struct FusedResult {
  ForwardResult lm;
  // Gate value per (row, position); NaN where no injection happened.
  std::vector<double> gates;
  // (B, H, T, M) attention over memory rows for the attention modes.
  Tensor attention;
};

class FusedModel {
 public:
  FusedModel(TransformerModel base, FusionConfig config, const KgEmbeddingTable& table, Rng& rng);
  // Zero-filled parameters with the full manifest; used before loading.
  FusedModel(TransformerModel base, FusionConfig config, std::size_t d_kg, std::size_t table_rows);

  const FusionConfig& fusion_config() const noexcept { return config_; }
  const ModelConfig& config() const noexcept { return base_.config(); }
  std::size_t d_kg() const noexcept { return d_kg_; }
  std::size_t table_rows() const noexcept { return table_rows_; }
  std::size_t site() const noexcept { return site_; }

  // Base LM parameters and fusion.* parameters in one set.
  ParamSet& params() noexcept { return base_.params(); }
  const ParamSet& params() const noexcept { return base_.params(); }
  const TransformerModel& base() const noexcept { return base_; }

  double alpha() const { return params().get("fusion.alpha").at(0); }
  void set_alpha(double value);

  FusedResult forward(const std::vector<FusionInput>& batch, const std::vector<KgMemory>& memories,
                      const KgEmbeddingTable& table, const ForwardOptions& options = {}) const;
  FusedResult forward(const std::vector<LinkedSequence>& batch, const KnowledgeGraph& g,
                      const KgEmbeddingTable& table, const ForwardOptions& options = {}) const;

  // Greedy decoding; the memory is built from `alignments` once.
  std::vector<TokenId> generate(std::span<const TokenId> prompt, std::span<const Alignment> alignments,
                                const KnowledgeGraph& g, const KgEmbeddingTable& table,
                                std::size_t max_new) const;

  FusedModel clone() const;

 private:
  void init_fusion(Rng* rng);

  TransformerModel base_;
  FusionConfig config_;
  std::size_t d_kg_ = 0;
  std::size_t table_rows_ = 0;
  std::size_t site_ = 0;
};

}  // namespace kgfuse
