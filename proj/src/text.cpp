// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "kgfuse/error.hpp"

namespace kgfuse {

namespace {

constexpr std::string_view kReservedNames[kReservedTokens] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                              "[EOS]"};

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

template <typename Fn>
void for_each_token(std::string_view text, Fn&& fn) {
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i == text.size()) break;
    std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    fn(start, i);
  }
}

}  // namespace

std::vector<std::string> normalize_tokens(std::string_view text) {
  std::vector<std::string> out;
  for_each_token(text, [&](std::size_t s, std::size_t e) { out.push_back(lower(text.substr(s, e - s))); });
  return out;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& tok : normalize_tokens(text)) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

Vocab::Vocab() {
  for (auto name : kReservedNames) add(std::string(name));
}

void Vocab::add(std::string token) {
  const auto id = static_cast<TokenId>(tokens_.size());
  if (!index_.emplace(token, id).second) {
    throw Error(ErrorKind::kInvalidArgument, "duplicate vocabulary token '" + token + "'");
  }
  tokens_.push_back(std::move(token));
}

Vocab Vocab::build(std::span<const std::string> corpus, std::size_t min_count) {
  if (min_count == 0) throw Error(ErrorKind::kInvalidArgument, "min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus) {
    for (auto& tok : normalize_tokens(line)) ++counts[std::move(tok)];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_count) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (auto& [tok, n] : kept) {
    if (!v.find(tok)) v.add(tok);
  }
  return v;
}

Vocab Vocab::from_tokens(std::span<const std::string> tokens) {
  Vocab v;
  for (const auto& t : tokens) v.add(t);
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open vocabulary file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.size() < kReservedTokens) {
    throw Error(ErrorKind::kFormat, "vocabulary file is missing reserved tokens");
  }
  for (std::size_t i = 0; i < kReservedTokens; ++i) {
    if (lines[i] != kReservedNames[i]) {
      throw Error(ErrorKind::kFormat, "vocabulary line " + std::to_string(i + 1) + " must be " +
                                          std::string(kReservedNames[i]));
    }
  }
  return from_tokens(std::span<const std::string>(lines).subspan(kReservedTokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw Error(ErrorKind::kIo, "failed writing vocabulary file " + path.string());
}

TokenId Vocab::id(std::string_view token) const { return find(token).value_or(kUnk); }

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(ErrorKind::kNotFound, "unknown token id " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenizedSequence encode(const Vocab& vocab, std::string_view text) {
  TokenizedSequence seq;
  for_each_token(text, [&](std::size_t s, std::size_t e) {
    auto tok = lower(text.substr(s, e - s));
    seq.ids.push_back(vocab.id(tok));
    seq.spans.emplace_back(s, e);
    seq.tokens.push_back(std::move(tok));
  });
  return seq;
}

std::string decode(const Vocab& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

}  // namespace kgfuse
