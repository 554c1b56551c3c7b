// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kgfuse/rng.hpp"

namespace kgfuse {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

struct Triple {
  EntityId subject = 0;
  RelationId relation = 0;
  EntityId object = 0;

  auto operator<=>(const Triple&) const = default;
};

struct TripleHash {
  std::size_t operator()(const Triple& t) const noexcept {
    std::uint64_t h = t.subject;
    h = h * 0x9E3779B97F4A7C15ull ^ t.relation;
    h = h * 0x9E3779B97F4A7C15ull ^ t.object;
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};

// Default human-readable label for a canonical identifier.
std::string default_label(std::string_view key);

// Dense 0-based handles over canonical string identifiers, each with a label.
class Dictionary {
 public:
  std::uint32_t intern(std::string_view key);
  std::optional<std::uint32_t> find(std::string_view key) const;
  void set_label(std::uint32_t id, std::string label);

  const std::string& key(std::uint32_t id) const { return keys_.at(id); }
  const std::string& label(std::uint32_t id) const { return labels_.at(id); }
  std::size_t size() const noexcept { return keys_.size(); }

  bool operator==(const Dictionary& other) const {
    return keys_ == other.keys_ && labels_ == other.labels_;
  }

 private:
  std::vector<std::string> keys_;
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

// Immutable set of (subject, relation, object) facts with subject, object and
// (subject, relation) indexes. Built through KnowledgeGraph::Builder.
class KnowledgeGraph {
 public:
  class Builder {
   public:
    EntityId entity(std::string_view key);
    RelationId relation(std::string_view key);
    void set_entity_label(EntityId id, std::string label);
    void set_relation_label(RelationId id, std::string label);
    // Returns false when the triple was already present.
    bool add(std::string_view subject, std::string_view relation, std::string_view object);
    bool add(const Triple& t);
    KnowledgeGraph build() &&;

   private:
    Dictionary entities_;
    Dictionary relations_;
    std::vector<Triple> insertion_order_;
    std::unordered_map<Triple, bool, TripleHash> seen_;
  };

  KnowledgeGraph() = default;

  const Dictionary& entities() const noexcept { return entities_; }
  const Dictionary& relations() const noexcept { return relations_; }
  std::size_t entity_count() const noexcept { return entities_.size(); }
  std::size_t relation_count() const noexcept { return relations_.size(); }
  std::size_t triple_count() const noexcept { return sorted_.size(); }

  // Sorted by (subject, relation, object).
  std::span<const Triple> triples() const noexcept { return sorted_; }
  // Order in which triples were first added; used for serialization.
  std::span<const Triple> insertion_order() const noexcept { return insertion_order_; }

  bool contains(const Triple& t) const;
  std::span<const Triple> by_subject(EntityId e) const;
  std::span<const Triple> by_subject_relation(EntityId e, RelationId r) const;
  std::span<const Triple> by_object(EntityId e) const;

  bool operator==(const KnowledgeGraph& other) const {
    return entities_ == other.entities_ && relations_ == other.relations_ &&
           insertion_order_ == other.insertion_order_;
  }

 private:
  Dictionary entities_;
  Dictionary relations_;
  std::vector<Triple> insertion_order_;
  std::vector<Triple> sorted_;
  std::vector<Triple> by_object_;  // sorted by (object, subject, relation)
  std::vector<std::size_t> subject_offsets_;
  std::vector<std::size_t> object_offsets_;
};

struct IngestStats {
  std::size_t lines = 0;
  std::size_t skipped = 0;
  std::size_t duplicates = 0;
};

// Parses the triple TSV format:
//   subject<TAB>relation<TAB>object[<TAB>object-label]
// '#' lines and blank lines are ignored. In strict mode a malformed line
// raises an error naming its line number, otherwise it is skipped and counted.
KnowledgeGraph ingest_tsv(std::istream& in, bool strict, IngestStats* stats = nullptr);
KnowledgeGraph ingest_tsv(const std::filesystem::path& path, bool strict,
                          IngestStats* stats = nullptr);

// Inverse of ingest_tsv: ingest_tsv(write_tsv(g)) == g.
void write_tsv(const KnowledgeGraph& g, std::ostream& out);

// Triples incident to entities reachable from `e` in fewer than `radius` hops,
// sorted by ids.
std::vector<Triple> neighbors(const KnowledgeGraph& g, EntityId e, std::size_t radius);

enum class CorruptSide { kHead, kTail };

// Replaces one side of `t` with a uniformly drawn entity so that the result is
// not a fact of `g`. Throws ErrorKind::kSaturated if no such entity exists.
Triple corrupt_triple(const KnowledgeGraph& g, const Triple& t, CorruptSide side, Rng& rng);

}  // namespace kgfuse
