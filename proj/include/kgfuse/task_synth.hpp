// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kgfuse/kg_store.hpp"

namespace kgfuse {

struct SynthSpec {
  std::size_t entity_count = 50;
  std::size_t relation_count = 5;
  std::size_t triples_per_entity = 1;
  bool functional = true;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
  // Entities are split round-robin into typed groups; relation j maps type
  // j % types to type (j + 1) % types. Labels carry the type word.
  std::size_t type_count = 1;
  // Entities are also split into regions (label prefix); facts never cross
  // regions. 1 disables.
  std::size_t region_count = 1;

  void validate() const;
};

// Random typed graph: every entity gets triples_per_entity facts over the
// relations whose domain is its type. Deterministic in spec.seed.
KnowledgeGraph generate_kg(const SynthSpec& spec);

struct Template {
  std::string relation;  // canonical relation id
  std::string sentence;  // {SUBJ} and {OBJ} slots
  std::string question;  // {SUBJ} slot only
};

std::vector<Template> default_templates(const KnowledgeGraph& g);

// Deterministic holdout of round(fraction * triples) triples, sorted.
std::vector<Triple> choose_holdout(const KnowledgeGraph& g, double fraction, std::uint64_t seed);

// One sentence per non-holdout triple, in sorted triple order.
std::vector<std::string> render_corpus(const KnowledgeGraph& g, const std::vector<Template>& templates,
                                       const std::vector<Triple>& holdout);

struct QaExample {
  std::string question;
  std::string answer;
  Triple triple;

  bool operator==(const QaExample&) const = default;
};

std::vector<QaExample> make_qa(const KnowledgeGraph& g, const std::vector<Template>& templates,
                               const std::vector<Triple>& targets);

// The language-model rendering of an example: question, answer, then [EOS].
std::string qa_line(const QaExample& ex);

// One open-ended generation item per target: the sentence cut before the
// object slot, and the remainder as the reference continuation.
struct GenExample {
  std::string prompt;
  std::string reference;
  Triple triple;

  std::string sentence() const { return prompt + " " + reference; }
  bool operator==(const GenExample&) const = default;
};

std::vector<GenExample> make_generation_set(const KnowledgeGraph& g, const std::vector<Template>& templates,
                                            const std::vector<Triple>& targets);

// A graph over the same entity and relation ids in which each of `facts`
// keeps its subject and relation and gets a uniformly drawn object among the
// objects `g` uses with that relation (never the subject itself).
KnowledgeGraph resample_objects(const KnowledgeGraph& g, std::span<const Triple> facts, Rng& rng);

void write_templates(const std::vector<Template>& templates, const std::filesystem::path& path);
std::vector<Template> read_templates(const std::filesystem::path& path);
void write_lines(const std::vector<std::string>& lines, const std::filesystem::path& path);
std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_qa(const KnowledgeGraph& g, const std::vector<QaExample>& qa, const std::filesystem::path& path);
std::vector<QaExample> read_qa(const KnowledgeGraph& g, const std::filesystem::path& path);
void write_generation_set(const KnowledgeGraph& g, const std::vector<GenExample>& set,
                          const std::filesystem::path& path);
std::vector<GenExample> read_generation_set(const KnowledgeGraph& g, const std::filesystem::path& path);

}  // namespace kgfuse
