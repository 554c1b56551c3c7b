// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kgfuse/kg_store.hpp"
#include "kgfuse/rng.hpp"
#include "kgfuse/text.hpp"
#include "kgfuse/transformer.hpp"

namespace kgfuse {

// [CLS] subject [SEP] relation [SEP] object [SEP] with one segment id per
// token: 0 subject, 1 relation, 2 object. Each [SEP] carries the segment of the
// span it closes.
struct SerializedTriple {
  std::vector<TokenId> ids;
  std::vector<std::int32_t> segments;
};

inline constexpr std::size_t kScorerSegments = 3;

SerializedTriple serialize_triple(const KnowledgeGraph& g, const Triple& t, const Vocab& vocab);
// [CLS] label [SEP], every token in `segment`.
SerializedTriple serialize_label(std::string_view label, std::int32_t segment, const Vocab& vocab);

// Bidirectional encoder with segment embeddings and a logistic head on the
// [CLS] state (params head.w, head.b).
TransformerModel make_scorer(ModelConfig config, Rng& rng);
// Zero-filled scorer with the full parameter manifest.
TransformerModel make_scorer(ModelConfig config);

// (B) logits, differentiable. A non-null rng enables training-mode dropout.
Tensor score_logits(const TransformerModel& m, std::span<const SerializedTriple> batch,
                    Rng* dropout_rng = nullptr);
double score_logit(const TransformerModel& m, const SerializedTriple& s);
double score_triple(const TransformerModel& m, const SerializedTriple& s);

struct ScorerTrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
  // Negatives per positive; each draws head or tail uniformly.
  std::size_t negatives = 1;
  std::function<void(std::size_t step, double loss)> on_step;
};

struct ScorerTrainResult {
  std::vector<double> losses;  // per optimizer step
};

// Binary cross-entropy over `positives` (defaults to every graph triple) and
// freshly corrupted negatives each epoch. Throws ErrorKind::kDiverged on a
// non-finite loss.
ScorerTrainResult train_scorer(const KnowledgeGraph& g, const Vocab& vocab, TransformerModel& m,
                               const ScorerTrainOptions& options,
                               std::span<const Triple> positives = {});

class KgEmbeddingTable {
 public:
  KgEmbeddingTable() = default;
  KgEmbeddingTable(std::size_t dim, std::vector<std::string> entity_keys,
                   std::vector<std::string> relation_keys);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t entity_count() const noexcept { return entity_keys_.size(); }
  std::size_t relation_count() const noexcept { return relation_keys_.size(); }
  const std::vector<std::string>& entity_keys() const noexcept { return entity_keys_; }
  const std::vector<std::string>& relation_keys() const noexcept { return relation_keys_; }

  std::span<const double> entity(EntityId e) const;
  std::span<const double> relation(RelationId r) const;
  std::span<double> mutable_entity(EntityId e);
  std::span<double> mutable_relation(RelationId r);

  // Entity rows followed by relation rows, (E + R, dim) row-major.
  const std::vector<double>& data() const noexcept { return data_; }

  void save(const std::filesystem::path& path) const;
  // Rows are matched to the graph by canonical id; every graph id must appear.
  static KgEmbeddingTable load(const std::filesystem::path& path, const KnowledgeGraph& g);

  bool operator==(const KgEmbeddingTable&) const = default;

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> entity_keys_;
  std::vector<std::string> relation_keys_;
  std::vector<double> data_;
};

// [CLS] final state of each entity and relation label encoded alone.
KgEmbeddingTable export_embeddings(const KnowledgeGraph& g, const Vocab& vocab, const TransformerModel& m);

}  // namespace kgfuse
