#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "metacond/corpus.hpp"
#include "metacond/tokenizer.hpp"

using namespace metacond;

TEST_CASE("special ids occupy the lowest range") {
  CHECK(tok::BOS == 0);
  CHECK(tok::BOC == 1);
  CHECK(tok::EOC == 2);
  CHECK(tok::META1 == 3);
  CHECK(tok::PAD == 8);
  CHECK(tok::SPECIAL_COUNT == 9);
  CHECK(tok::FIRST_MERGE == 265);
}

TEST_CASE("training on a repeated-letter corpus yields the single expected merge") {
  // Hand-computed pair frequencies: "aaaa" repeated makes ("a","a") the only
  // pair, so the first and only merge must be (byte a, byte a).
  std::vector<std::string> corpus = {"aaaa", "aaaa", "aaaa"};
  Tokenizer tokenizer = Tokenizer::train(corpus, tok::FIRST_MERGE + 1);
  REQUIRE(tokenizer.merges().size() == 1);
  TokenId a = tok::BYTE_BASE + static_cast<TokenId>('a');
  CHECK(tokenizer.merges()[0] == std::make_pair(a, a));
  // "aaaa" now encodes as two merged tokens
  auto ids = tokenizer.encode("aaaa");
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] == tok::FIRST_MERGE);
  CHECK(ids[1] == tok::FIRST_MERGE);
}

TEST_CASE("vocab_size below the base alphabet is rejected") {
  CHECK_THROWS_AS(Tokenizer::train({"abc"}, 100), UsageError);
}

TEST_CASE("round-trip of unicode text") {
  Tokenizer tokenizer = Tokenizer::train({"h\xC3\xA9llo world"}, tok::FIRST_MERGE + 4);
  std::string s = "h\xC3\xA9llo\xE2\x8A\x95";
  CHECK(tokenizer.decode(tokenizer.encode(s)) == s);
}

TEST_CASE("round-trip property over random byte strings") {
  SynthConfig cfg;
  cfg.n_docs = 50;
  cfg.seed = 5;
  auto docs = synth_corpus(cfg);
  std::vector<std::string> corpus;
  for (const auto& d : docs) corpus.push_back(d.text);
  Tokenizer tokenizer = Tokenizer::train(corpus, 400);

  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::string s;
    size_t len = rng.next_below(60);
    for (size_t i = 0; i < len; ++i)
      s += static_cast<char>(rng.next_below(256));
    CHECK(tokenizer.decode(tokenizer.encode(s)) == s);
  }
  // plain text round-trips too
  for (const auto& d : docs) CHECK(tokenizer.decode(tokenizer.encode(d.text)) == d.text);
}

TEST_CASE("training is deterministic") {
  SynthConfig cfg;
  cfg.n_docs = 80;
  cfg.seed = 21;
  auto docs = synth_corpus(cfg);
  std::vector<std::string> corpus;
  for (const auto& d : docs) corpus.push_back(d.text);
  Tokenizer a = Tokenizer::train(corpus, 420);
  Tokenizer b = Tokenizer::train(corpus, 420);
  CHECK(a.merges() == b.merges());
}

TEST_CASE("encode never emits special ids") {
  Tokenizer tokenizer = Tokenizer::train({"<s> <boc> text <eoc>"}, tok::FIRST_MERGE + 8);
  auto ids = tokenizer.encode("<s> <boc> plain <pad> <s3>");
  for (TokenId id : ids) CHECK(id >= tok::SPECIAL_COUNT);
  CHECK(tokenizer.decode(ids) == "<s> <boc> plain <pad> <s3>");
}

TEST_CASE("save and load preserve the merge table") {
  SynthConfig cfg;
  cfg.n_docs = 40;
  cfg.seed = 9;
  auto docs = synth_corpus(cfg);
  std::vector<std::string> corpus;
  for (const auto& d : docs) corpus.push_back(d.text);
  Tokenizer tokenizer = Tokenizer::train(corpus, 380);

  auto path = std::filesystem::temp_directory_path() / "metacond_tok_test.json";
  tokenizer.save(path);
  Tokenizer loaded = Tokenizer::load(path);
  CHECK(loaded.merges() == tokenizer.merges());
  CHECK(loaded.encode(docs[0].text) == tokenizer.encode(docs[0].text));
}

TEST_CASE("word boundaries keep url parts token-aligned") {
  std::vector<std::string> corpus = {"https://en.wikipedia.org/wiki/Meta https https en wikipedia org wiki"};
  Tokenizer tokenizer = Tokenizer::train(corpus, 420);
  UrlParts parts = split_url("https://en.wikipedia.org/wiki/Meta");
  auto whole = tokenizer.encode("https://en.wikipedia.org/wiki/Meta");
  auto pieces = tokenizer.encode(parts.prefix);
  auto domain = tokenizer.encode(parts.domain);
  auto suffix = tokenizer.encode(parts.suffix);
  pieces.insert(pieces.end(), domain.begin(), domain.end());
  pieces.insert(pieces.end(), suffix.begin(), suffix.end());
  CHECK(whole == pieces);
}
