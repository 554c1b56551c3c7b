// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/task_synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "kgfuse/error.hpp"
#include "kgfuse/rng.hpp"
#include "kgfuse/text.hpp"

namespace kgfuse {

namespace {

const std::vector<std::string> kTypeWords{"city",  "river", "person", "company", "planet",
                                          "band",  "ship",  "island", "forest",  "tower"};
const std::vector<std::string> kRelations{"located_in", "flows_into", "born_in",   "owned_by",
                                          "orbits",     "signed_to",  "docked_at", "near",
                                          "grows_on",   "faces",      "allied_with", "named_after"};
const std::vector<std::string> kRegionWords{"north", "south", "east", "west", "upper",
                                            "lower", "inner", "outer"};
const std::vector<std::string> kOnsets{"k", "l", "m", "n", "r", "t"};
const std::vector<std::string> kVowels{"a", "i", "o"};

std::string type_word(std::size_t t) {
  return t < kTypeWords.size() ? kTypeWords[t] : "kind" + std::to_string(t);
}

std::string region_word(std::size_t g) {
  return g < kRegionWords.size() ? kRegionWords[g] : "zone" + std::to_string(g);
}

std::string relation_key(std::size_t j) {
  return j < kRelations.size() ? kRelations[j] : "relation_" + std::to_string(j);
}

std::size_t domain_of(std::size_t j, std::size_t types) { return j % types; }
std::size_t range_of(std::size_t j, std::size_t types) { return types == 1 ? 0 : (j + 1) % types; }

[[noreturn]] void fail_spec(const std::string& what) {
  throw Error(ErrorKind::kInvalidArgument, "synth spec: " + what);
}

std::string fill(std::string text, const std::string& slot, const std::string& value) {
  for (auto pos = text.find(slot); pos != std::string::npos; pos = text.find(slot, pos + value.size())) {
    text.replace(pos, slot.size(), value);
  }
  return text;
}

const Template& template_for(const KnowledgeGraph& g, const std::vector<Template>& templates, RelationId r) {
  const auto& key = g.relations().key(r);
  for (const auto& t : templates) {
    if (t.relation == key) return t;
  }
  throw Error(ErrorKind::kNotFound, "no template for relation '" + key + "'");
}

std::string triple_field(const KnowledgeGraph& g, const Triple& t) {
  return g.entities().key(t.subject) + ' ' + g.relations().key(t.relation) + ' ' + g.entities().key(t.object);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  return out;
}

}  // namespace

void SynthSpec::validate() const {
  if (entity_count < 2) fail_spec("need at least 2 entities");
  if (relation_count < 1) fail_spec("need at least 1 relation");
  if (type_count < 1) fail_spec("need at least 1 type");
  if (relation_count < type_count) fail_spec("every type needs a relation (relations >= types)");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) fail_spec("holdout fraction must be in [0, 1)");
  if (entity_count > kOnsets.size() * kVowels.size() * kOnsets.size() * kVowels.size()) {
    fail_spec("too many entities for the name generator");
  }
  if (region_count < 1) fail_spec("need at least 1 region");
  // Exact per-entity capacity: distinct facts available to each subject.
  for (std::size_t i = 0; i < entity_count; ++i) {
    const std::size_t t = i % type_count, g = (i / type_count) % region_count;
    std::size_t capacity = 0;
    for (std::size_t j = 0; j < relation_count; ++j) {
      if (domain_of(j, type_count) != t) continue;
      std::size_t members = 0;
      for (std::size_t o = 0; o < entity_count; ++o) {
        if (o != i && o % type_count == range_of(j, type_count) && (o / type_count) % region_count == g) ++members;
      }
      capacity += functional ? std::min<std::size_t>(members, 1) : members;
    }
    if (triples_per_entity > capacity) {
      fail_spec("triples per entity (" + std::to_string(triples_per_entity) + ") exceeds the " +
                std::to_string(capacity) + " distinct facts available to entity " + std::to_string(i));
    }
  }
}

KnowledgeGraph generate_kg(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t types = spec.type_count;

  std::set<std::string> used;
  std::vector<std::string> names;
  while (names.size() < spec.entity_count) {
    std::string name;
    for (int s = 0; s < 2; ++s) {
      if (s) name += '_';
      name += kOnsets[uniform_index(rng, kOnsets.size())];
      name += kVowels[uniform_index(rng, kVowels.size())];
    }
    if (used.insert(name).second) names.push_back(name);
  }

  KnowledgeGraph::Builder b;
  std::vector<std::vector<EntityId>> members(types);
  std::vector<std::size_t> type_of(spec.entity_count);
  for (std::size_t i = 0; i < spec.entity_count; ++i) {
    const std::size_t t = i % types;
    const std::string prefix = spec.region_count > 1 ? region_word(i / types % spec.region_count) + "_" : "";
    const EntityId e = b.entity(prefix + type_word(t) + "_" + names[i]);
    members[t].push_back(e);
    type_of[i] = t;
  }
  for (std::size_t j = 0; j < spec.relation_count; ++j) b.relation(relation_key(j));

  for (std::size_t i = 0; i < spec.entity_count; ++i) {
    const auto s = static_cast<EntityId>(i);
    std::vector<std::pair<RelationId, EntityId>> candidates;
    for (std::size_t j = 0; j < spec.relation_count; ++j) {
      if (domain_of(j, types) != type_of[i]) continue;
      for (EntityId o : members[range_of(j, types)]) {
        if (o != s && o / types % spec.region_count == i / types % spec.region_count) {
          candidates.emplace_back(static_cast<RelationId>(j), o);
        }
      }
    }
    std::shuffle(candidates.begin(), candidates.end(), rng);
    std::set<RelationId> taken;
    std::size_t added = 0;
    for (const auto& [r, o] : candidates) {
      if (added == spec.triples_per_entity) break;
      if (spec.functional && !taken.insert(r).second) continue;
      b.add(Triple{s, r, o});
      ++added;
    }
  }
  return std::move(b).build();
}

std::vector<Template> default_templates(const KnowledgeGraph& g) {
  std::vector<Template> out;
  for (RelationId r = 0; r < g.relation_count(); ++r) {
    const auto& label = g.relations().label(r);
    out.push_back({g.relations().key(r), "{SUBJ} " + label + " {OBJ} .", "{SUBJ} " + label + " what ?"});
  }
  return out;
}

std::vector<Triple> choose_holdout(const KnowledgeGraph& g, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "holdout fraction must be in [0, 1)");
  }
  std::vector<Triple> all(g.triples().begin(), g.triples().end());
  Rng rng = derive_rng(seed, 0x686f6c64);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(std::llround(fraction * static_cast<double>(all.size()))));
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<std::string> render_corpus(const KnowledgeGraph& g, const std::vector<Template>& templates,
                                       const std::vector<Triple>& holdout) {
  std::set<Triple> held(holdout.begin(), holdout.end());
  std::vector<std::string> out;
  for (const auto& t : g.triples()) {
    if (held.count(t)) continue;
    const auto& tpl = template_for(g, templates, t.relation);
    out.push_back(fill(fill(tpl.sentence, "{SUBJ}", g.entities().label(t.subject)), "{OBJ}",
                       g.entities().label(t.object)));
  }
  return out;
}

std::vector<QaExample> make_qa(const KnowledgeGraph& g, const std::vector<Template>& templates,
                               const std::vector<Triple>& targets) {
  std::vector<QaExample> out;
  for (const auto& t : targets) {
    if (!g.contains(t)) throw Error(ErrorKind::kNotFound, "make_qa: target triple is not in the graph");
    if (g.by_subject_relation(t.subject, t.relation).size() != 1) {
      throw Error(ErrorKind::kInvalidArgument, "make_qa: relation '" + g.relations().key(t.relation) +
                                                   "' is not functional for '" +
                                                   g.entities().key(t.subject) + "'");
    }
    const auto& tpl = template_for(g, templates, t.relation);
    if (tpl.question.find("{OBJ}") != std::string::npos) {
      throw Error(ErrorKind::kInvalidArgument, "question template may not use {OBJ}");
    }
    QaExample ex{fill(tpl.question, "{SUBJ}", g.entities().label(t.subject)), g.entities().label(t.object), t};
    if (normalize_text(ex.question).find(normalize_text(ex.answer)) != std::string::npos) {
      throw Error(ErrorKind::kInvalidArgument, "make_qa: question '" + ex.question + "' contains its answer");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::string qa_line(const QaExample& ex) { return ex.question + " " + ex.answer; }

void write_templates(const std::vector<Template>& templates, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const auto& t : templates) out << t.relation << '\t' << t.sentence << '\t' << t.question << '\n';
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

std::vector<Template> read_templates(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<Template> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto f = split_tabs(line);
    if (f.size() != 3 || f[1].find("{SUBJ}") == std::string::npos || f[1].find("{OBJ}") == std::string::npos ||
        f[2].find("{SUBJ}") == std::string::npos) {
      throw Error(ErrorKind::kParse, path.string() + " line " + std::to_string(lineno) + ": bad template");
    }
    out.push_back({f[0], f[1], f[2]});
  }
  return out;
}

void write_lines(const std::vector<std::string>& lines, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

void write_qa(const KnowledgeGraph& g, const std::vector<QaExample>& qa, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const auto& ex : qa) {
    out << ex.question << '\t' << ex.answer << '\t' << triple_field(g, ex.triple) << '\n';
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

namespace {

// Three-field rows whose last field names a graph triple.
template <typename Row>
std::vector<Row> read_rows(const KnowledgeGraph& g, const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<Row> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto where = [&] { return path.string() + " line " + std::to_string(lineno); };
    auto f = split_tabs(line);
    if (f.size() != 3) throw Error(ErrorKind::kParse, where() + ": expected 3 fields");
    std::istringstream ids(f[2]);
    std::string s, r, o;
    if (!(ids >> s >> r >> o)) throw Error(ErrorKind::kParse, where() + ": bad triple field");
    auto se = g.entities().find(s), oe = g.entities().find(o);
    auto rr = g.relations().find(r);
    if (!se || !oe || !rr) throw Error(ErrorKind::kNotFound, where() + ": triple not in the graph");
    Triple t{*se, *rr, *oe};
    if (!g.contains(t)) throw Error(ErrorKind::kNotFound, where() + ": triple not in the graph");
    out.push_back({f[0], f[1], t});
  }
  return out;
}

}  // namespace

std::vector<QaExample> read_qa(const KnowledgeGraph& g, const std::filesystem::path& path) {
  return read_rows<QaExample>(g, path);
}

std::vector<GenExample> make_generation_set(const KnowledgeGraph& g, const std::vector<Template>& templates,
                                            const std::vector<Triple>& targets) {
  std::vector<GenExample> out;
  for (const auto& t : targets) {
    if (!g.contains(t)) throw Error(ErrorKind::kNotFound, "generation set: target triple is not in the graph");
    const auto& tpl = template_for(g, templates, t.relation);
    const auto cut = tpl.sentence.find("{OBJ}");
    const auto subj = tpl.sentence.find("{SUBJ}");
    if (cut == std::string::npos || subj == std::string::npos || subj > cut) {
      throw Error(ErrorKind::kInvalidArgument, "generation set: template for '" + tpl.relation +
                                                   "' must place {SUBJ} before {OBJ}");
    }
    GenExample ex;
    ex.prompt = normalize_text(fill(tpl.sentence.substr(0, cut), "{SUBJ}", g.entities().label(t.subject)));
    ex.reference = normalize_text(fill(tpl.sentence.substr(cut), "{OBJ}", g.entities().label(t.object)));
    ex.triple = t;
    out.push_back(std::move(ex));
  }
  return out;
}

void write_generation_set(const KnowledgeGraph& g, const std::vector<GenExample>& set,
                          const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const auto& ex : set) out << ex.prompt << '\t' << ex.reference << '\t' << triple_field(g, ex.triple) << '\n';
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

std::vector<GenExample> read_generation_set(const KnowledgeGraph& g, const std::filesystem::path& path) {
  return read_rows<GenExample>(g, path);
}

KnowledgeGraph resample_objects(const KnowledgeGraph& g, std::span<const Triple> facts, Rng& rng) {
  std::vector<std::vector<EntityId>> range(g.relation_count());
  for (const auto& t : g.triples()) range[t.relation].push_back(t.object);
  for (auto& r : range) {
    std::sort(r.begin(), r.end());
    r.erase(std::unique(r.begin(), r.end()), r.end());
  }
  KnowledgeGraph::Builder b;
  for (EntityId e = 0; e < g.entity_count(); ++e) {
    b.entity(g.entities().key(e));
    b.set_entity_label(e, g.entities().label(e));
  }
  for (RelationId r = 0; r < g.relation_count(); ++r) {
    b.relation(g.relations().key(r));
    b.set_relation_label(r, g.relations().label(r));
  }
  for (const auto& t : facts) {
    if (t.relation >= range.size()) throw Error(ErrorKind::kNotFound, "resample: unknown relation");
    const auto& candidates = range[t.relation];
    const std::size_t usable = candidates.size() - std::count(candidates.begin(), candidates.end(), t.subject);
    if (usable == 0) {
      throw Error(ErrorKind::kSaturated, "resample: no object available for '" + g.entities().key(t.subject) + "'");
    }
    std::size_t k = uniform_index(rng, usable);
    EntityId o = 0;
    for (EntityId c : candidates) {
      if (c == t.subject) continue;
      if (k-- == 0) {
        o = c;
        break;
      }
    }
    b.add(Triple{t.subject, t.relation, o});
  }
  return std::move(b).build();
}

}  // namespace kgfuse
