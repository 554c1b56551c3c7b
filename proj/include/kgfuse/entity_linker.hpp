// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kgfuse/kg_store.hpp"
#include "kgfuse/text.hpp"

namespace kgfuse {

// Normalized surface form -> entity ids.
class EntityLexicon {
 public:
  void add(const std::string& surface, EntityId id);

  const std::set<EntityId>* lookup(const std::vector<std::string>& tokens) const;
  // Every surface form registered for `id`, normalized.
  std::vector<std::string> surfaces_of(EntityId id) const;
  std::size_t size() const noexcept { return forms_.size(); }
  std::size_t max_tokens() const noexcept { return max_tokens_; }
  const std::map<std::vector<std::string>, std::set<EntityId>>& forms() const noexcept { return forms_; }

 private:
  std::map<std::vector<std::string>, std::set<EntityId>> forms_;
  std::size_t max_tokens_ = 0;
};

// Entity labels plus optional alias rows `entity_id<TAB>surface form`.
// Unknown entities in the alias file are an error in strict mode and skipped
// otherwise.
EntityLexicon build_lexicon(const KnowledgeGraph& g, const std::filesystem::path& aliases = {},
                            bool strict = true);

struct Alignment {
  std::size_t start = 0;  // token index
  std::size_t end = 0;    // exclusive
  EntityId entity = 0;

  bool operator==(const Alignment&) const = default;
};

struct LinkedSequence {
  TokenizedSequence seq;
  std::vector<Alignment> alignments;
};

// Greedy left-to-right longest match; ambiguous forms link the lowest id.
LinkedSequence link(TokenizedSequence seq, const EntityLexicon& lex);

}  // namespace kgfuse
