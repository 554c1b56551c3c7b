// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace kgfuse {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kEos = 4;
inline constexpr std::size_t kReservedTokens = 5;

// Lowercased whitespace tokens of `text`.
std::vector<std::string> normalize_tokens(std::string_view text);
// Normalized tokens joined by single spaces.
std::string normalize_text(std::string_view text);

class Vocab {
 public:
  Vocab();

  // Whitespace tokens with count >= min_count, ordered by (count desc, token asc).
  static Vocab build(std::span<const std::string> corpus, std::size_t min_count);
  // Non-reserved tokens in id order.
  static Vocab from_tokens(std::span<const std::string> tokens);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  TokenId id(std::string_view token) const;  // kUnk when absent
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;  // throws on unknown id
  std::size_t size() const noexcept { return tokens_.size(); }
  std::span<const std::string> tokens() const noexcept { return tokens_; }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct TokenizedSequence {
  std::vector<TokenId> ids;
  // Character offsets [start, end) into the source text.
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  // Normalized surface forms, parallel to ids.
  std::vector<std::string> tokens;
};

TokenizedSequence encode(const Vocab& vocab, std::string_view text);
std::string decode(const Vocab& vocab, std::span<const TokenId> ids);

}  // namespace kgfuse
