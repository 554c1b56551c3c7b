// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/entity_linker.hpp"

#include <algorithm>
#include <fstream>

#include "kgfuse/error.hpp"

namespace kgfuse {

void EntityLexicon::add(const std::string& surface, EntityId id) {
  auto tokens = normalize_tokens(surface);
  if (tokens.empty()) throw Error(ErrorKind::kInvalidArgument, "empty surface form");
  max_tokens_ = std::max(max_tokens_, tokens.size());
  forms_[std::move(tokens)].insert(id);
}

const std::set<EntityId>* EntityLexicon::lookup(const std::vector<std::string>& tokens) const {
  auto it = forms_.find(tokens);
  return it == forms_.end() ? nullptr : &it->second;
}

std::vector<std::string> EntityLexicon::surfaces_of(EntityId id) const {
  std::vector<std::string> out;
  for (const auto& [tokens, ids] : forms_) {
    if (!ids.count(id)) continue;
    std::string s;
    for (const auto& t : tokens) {
      if (!s.empty()) s += ' ';
      s += t;
    }
    out.push_back(std::move(s));
  }
  return out;
}

EntityLexicon build_lexicon(const KnowledgeGraph& g, const std::filesystem::path& aliases, bool strict) {
  EntityLexicon lex;
  for (EntityId e = 0; e < g.entity_count(); ++e) lex.add(g.entities().label(e), e);
  if (aliases.empty()) return lex;
  std::ifstream in(aliases);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + aliases.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto where = aliases.string() + " line " + std::to_string(lineno);
    const auto tab = line.find('\t');
    if (tab == std::string::npos || normalize_tokens(line.substr(tab + 1)).empty()) {
      if (strict) throw Error(ErrorKind::kParse, where + ": expected entity_id<TAB>surface form");
      continue;
    }
    auto id = g.entities().find(line.substr(0, tab));
    if (!id) {
      if (strict) throw Error(ErrorKind::kNotFound, where + ": unknown entity '" + line.substr(0, tab) + "'");
      continue;
    }
    lex.add(line.substr(tab + 1), *id);
  }
  return lex;
}

LinkedSequence link(TokenizedSequence seq, const EntityLexicon& lex) {
  LinkedSequence out;
  const auto& toks = seq.tokens;
  std::size_t i = 0;
  std::vector<std::string> window;
  while (i < toks.size()) {
    const std::size_t longest = std::min(lex.max_tokens(), toks.size() - i);
    bool matched = false;
    for (std::size_t len = longest; len > 0; --len) {
      window.assign(toks.begin() + static_cast<std::ptrdiff_t>(i),
                    toks.begin() + static_cast<std::ptrdiff_t>(i + len));
      if (const auto* ids = lex.lookup(window)) {
        out.alignments.push_back({i, i + len, *ids->begin()});
        i += len;
        matched = true;
        break;
      }
    }
    if (!matched) ++i;
  }
  out.seq = std::move(seq);
  return out;
}

}  // namespace kgfuse
