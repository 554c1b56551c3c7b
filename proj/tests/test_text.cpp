#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "kgfuse/error.hpp"
#include "kgfuse/rng.hpp"
#include "kgfuse/text.hpp"

using namespace kgfuse;

TEST_CASE("build_vocab") {
  std::vector<std::string> c1{"a a b"};
  auto v1 = Vocab::build(c1, 2);
  CHECK(v1.size() == kReservedTokens + 1);
  CHECK(v1.token(5) == "a");

  auto v0 = Vocab::build({}, 1);
  CHECK(v0.size() == kReservedTokens);
  CHECK(v0.token(kPad) == "[PAD]");
  CHECK(v0.token(kEos) == "[EOS]");

  std::vector<std::string> c2{"x y", "y z"};
  auto v2 = Vocab::build(c2, 1);
  CHECK(v2.token(5) == "y");
  CHECK(v2.token(6) == "x");
  CHECK(v2.token(7) == "z");
  CHECK(Vocab::build(c2, 1) == v2);
  CHECK_THROWS_AS(Vocab::build(c2, 0), Error);
}

TEST_CASE("encode and decode") {
  std::vector<std::string> corpus{"the cat sat"};
  auto v = Vocab::build(corpus, 1);
  CHECK(decode(v, encode(v, "the cat").ids) == "the cat");
  CHECK(encode(v, "zzz").ids == std::vector<TokenId>{kUnk});
  CHECK(decode(v, encode(v, "zzz the").ids) == "[UNK] the");
  CHECK(encode(v, "The  CAT").ids == encode(v, "the cat").ids);
  std::vector<TokenId> bad{99};
  CHECK_THROWS_AS(decode(v, bad), Error);
}

TEST_CASE("spans cover the source tokens") {
  Vocab v;
  const std::string text = "  Hello\tWorld  foo ";
  auto s = encode(v, text);
  REQUIRE(s.ids.size() == 3);
  REQUIRE(s.spans.size() == 3);
  std::string rebuilt;
  for (std::size_t i = 0; i < s.spans.size(); ++i) {
    if (i) {
      CHECK(s.spans[i].first >= s.spans[i - 1].second);
      rebuilt += ' ';
    }
    std::string piece = text.substr(s.spans[i].first, s.spans[i].second - s.spans[i].first);
    for (auto& ch : piece) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    rebuilt += piece;
  }
  CHECK(rebuilt == normalize_text(text));
}

TEST_CASE("random in-vocab sentences round trip") {
  std::vector<std::string> corpus{"alpha beta gamma delta epsilon zeta eta theta"};
  auto v = Vocab::build(corpus, 1);
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::string s;
    const std::size_t n = 1 + uniform_index(rng, 8);
    for (std::size_t i = 0; i < n; ++i) {
      if (i) s += ' ';
      s += v.token(static_cast<TokenId>(kReservedTokens + uniform_index(rng, v.size() - kReservedTokens)));
    }
    CHECK(decode(v, encode(v, s).ids) == s);
  }
}

TEST_CASE("vocab file round trip") {
  std::vector<std::string> corpus{"b a a c"};
  auto v = Vocab::build(corpus, 1);
  auto path = std::filesystem::temp_directory_path() / "kgfuse_vocab_test.txt";
  v.save(path);
  CHECK(Vocab::load(path) == v);
  {
    std::ofstream out(path);
    out << "[PAD]\n[CLS]\n";
  }
  CHECK_THROWS_AS(Vocab::load(path), Error);
  std::filesystem::remove(path);
}
