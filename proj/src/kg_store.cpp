// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/kg_store.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <tuple>

#include "kgfuse/error.hpp"

namespace kgfuse {

std::string default_label(std::string_view key) {
  std::string label(key);
  std::replace(label.begin(), label.end(), '_', ' ');
  return label;
}

std::uint32_t Dictionary::intern(std::string_view key) {
  auto it = index_.find(std::string(key));
  if (it != index_.end()) return it->second;
  const auto id = static_cast<std::uint32_t>(keys_.size());
  keys_.emplace_back(key);
  labels_.push_back(default_label(key));
  index_.emplace(keys_.back(), id);
  return id;
}

std::optional<std::uint32_t> Dictionary::find(std::string_view key) const {
  auto it = index_.find(std::string(key));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void Dictionary::set_label(std::uint32_t id, std::string label) {
  if (label.empty()) throw Error(ErrorKind::kInvalidArgument, "empty label for '" + keys_.at(id) + "'");
  labels_.at(id) = std::move(label);
}

EntityId KnowledgeGraph::Builder::entity(std::string_view key) { return entities_.intern(key); }
RelationId KnowledgeGraph::Builder::relation(std::string_view key) { return relations_.intern(key); }

void KnowledgeGraph::Builder::set_entity_label(EntityId id, std::string label) {
  entities_.set_label(id, std::move(label));
}
void KnowledgeGraph::Builder::set_relation_label(RelationId id, std::string label) {
  relations_.set_label(id, std::move(label));
}

bool KnowledgeGraph::Builder::add(std::string_view subject, std::string_view relation,
                                  std::string_view object) {
  Triple t;
  t.subject = entity(subject);
  t.relation = this->relation(relation);
  t.object = entity(object);
  return add(t);
}

bool KnowledgeGraph::Builder::add(const Triple& t) {
  if (t.subject >= entities_.size() || t.object >= entities_.size() ||
      t.relation >= relations_.size()) {
    throw Error(ErrorKind::kInvalidArgument, "triple references an unknown id");
  }
  if (!seen_.emplace(t, true).second) return false;
  insertion_order_.push_back(t);
  return true;
}

KnowledgeGraph KnowledgeGraph::Builder::build() && {
  KnowledgeGraph g;
  g.entities_ = std::move(entities_);
  g.relations_ = std::move(relations_);
  g.insertion_order_ = std::move(insertion_order_);
  g.sorted_ = g.insertion_order_;
  std::sort(g.sorted_.begin(), g.sorted_.end());
  g.by_object_ = g.sorted_;
  std::sort(g.by_object_.begin(), g.by_object_.end(), [](const Triple& a, const Triple& b) {
    return std::tie(a.object, a.subject, a.relation) < std::tie(b.object, b.subject, b.relation);
  });
  const std::size_t n = g.entities_.size();
  g.subject_offsets_.assign(n + 1, 0);
  g.object_offsets_.assign(n + 1, 0);
  for (const auto& t : g.sorted_) {
    ++g.subject_offsets_[t.subject + 1];
    ++g.object_offsets_[t.object + 1];
  }
  for (std::size_t i = 0; i < n; ++i) {
    g.subject_offsets_[i + 1] += g.subject_offsets_[i];
    g.object_offsets_[i + 1] += g.object_offsets_[i];
  }
  return g;
}

bool KnowledgeGraph::contains(const Triple& t) const {
  if (t.subject >= entity_count()) return false;
  auto range = by_subject(t.subject);
  return std::binary_search(range.begin(), range.end(), t);
}

std::span<const Triple> KnowledgeGraph::by_subject(EntityId e) const {
  if (e >= entity_count()) return {};
  return std::span<const Triple>(sorted_).subspan(subject_offsets_[e],
                                                  subject_offsets_[e + 1] - subject_offsets_[e]);
}

std::span<const Triple> KnowledgeGraph::by_subject_relation(EntityId e, RelationId r) const {
  auto range = by_subject(e);
  auto lo = std::lower_bound(range.begin(), range.end(), Triple{e, r, 0});
  auto hi = std::lower_bound(range.begin(), range.end(), Triple{e, r + 1, 0});
  return {lo, hi};
}

std::span<const Triple> KnowledgeGraph::by_object(EntityId e) const {
  if (e >= entity_count()) return {};
  return std::span<const Triple>(by_object_).subspan(object_offsets_[e],
                                                     object_offsets_[e + 1] - object_offsets_[e]);
}

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

bool is_blank(std::string_view s) {
  return s.find_first_not_of(" \t\r") == std::string_view::npos;
}

}  // namespace

KnowledgeGraph ingest_tsv(std::istream& in, bool strict, IngestStats* stats) {
  KnowledgeGraph::Builder builder;
  IngestStats local;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank(line) || line.front() == '#') continue;
    ++local.lines;
    auto fields = split_tabs(line);
    const bool arity_ok = fields.size() == 3 || fields.size() == 4;
    const bool fields_ok =
        arity_ok && std::none_of(fields.begin(), fields.begin() + 3,
                                 [](std::string_view f) { return is_blank(f); }) &&
        (fields.size() == 3 || !is_blank(fields[3]));
    if (!fields_ok) {
      if (strict) {
        throw Error(ErrorKind::kParse, "malformed triple at line " + std::to_string(line_no) +
                                           ": expected 3 or 4 non-empty tab-separated fields");
      }
      ++local.skipped;
      continue;
    }
    if (!builder.add(fields[0], fields[1], fields[2])) ++local.duplicates;
    if (fields.size() == 4) {
      builder.set_entity_label(builder.entity(fields[2]), std::string(fields[3]));
    }
  }
  if (stats) *stats = local;
  return std::move(builder).build();
}

KnowledgeGraph ingest_tsv(const std::filesystem::path& path, bool strict, IngestStats* stats) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open triple file " + path.string());
  return ingest_tsv(in, strict, stats);
}

void write_tsv(const KnowledgeGraph& g, std::ostream& out) {
  const auto& ents = g.entities();
  const auto& rels = g.relations();
  for (const auto& t : g.insertion_order()) {
    out << ents.key(t.subject) << '\t' << rels.key(t.relation) << '\t' << ents.key(t.object);
    if (ents.label(t.object) != default_label(ents.key(t.object))) {
      out << '\t' << ents.label(t.object);
    }
    out << '\n';
  }
}

std::vector<Triple> neighbors(const KnowledgeGraph& g, EntityId e, std::size_t radius) {
  if (e >= g.entity_count()) {
    throw Error(ErrorKind::kNotFound, "unknown entity id " + std::to_string(e));
  }
  if (radius == 0) throw Error(ErrorKind::kInvalidArgument, "neighbors radius must be >= 1");
  std::set<Triple> found;
  std::vector<bool> visited(g.entity_count(), false);
  std::vector<EntityId> frontier{e};
  visited[e] = true;
  for (std::size_t hop = 0; hop < radius && !frontier.empty(); ++hop) {
    std::vector<EntityId> next;
    auto visit = [&](const Triple& t, EntityId other) {
      found.insert(t);
      if (!visited[other]) {
        visited[other] = true;
        next.push_back(other);
      }
    };
    for (EntityId x : frontier) {
      for (const auto& t : g.by_subject(x)) visit(t, t.object);
      for (const auto& t : g.by_object(x)) visit(t, t.subject);
    }
    std::sort(next.begin(), next.end());
    frontier = std::move(next);
  }
  return {found.begin(), found.end()};
}

Triple corrupt_triple(const KnowledgeGraph& g, const Triple& t, CorruptSide side, Rng& rng) {
  if (!g.contains(t)) throw Error(ErrorKind::kNotFound, "corrupt_triple: triple not in graph");
  const std::size_t n = g.entity_count();
  if (n < 2) throw Error(ErrorKind::kSaturated, "corrupt_triple: fewer than two entities");
  auto replaced = [&](EntityId e) {
    Triple c = t;
    (side == CorruptSide::kHead ? c.subject : c.object) = e;
    return c;
  };
  // Rejection sampling first; the exhaustive fallback keeps the draw uniform
  // over valid replacements when they are rare.
  constexpr int kAttempts = 32;
  for (int i = 0; i < kAttempts; ++i) {
    Triple c = replaced(static_cast<EntityId>(uniform_index(rng, n)));
    if (!g.contains(c)) return c;
  }
  std::vector<EntityId> valid;
  for (EntityId e = 0; e < n; ++e) {
    if (!g.contains(replaced(e))) valid.push_back(e);
  }
  if (valid.empty()) {
    throw Error(ErrorKind::kSaturated, "corrupt_triple: graph is saturated for this triple");
  }
  return replaced(valid[uniform_index(rng, valid.size())]);
}

}  // namespace kgfuse
