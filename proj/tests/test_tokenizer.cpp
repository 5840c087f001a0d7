#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "tess/tokenizer.hpp"

using namespace tess;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("special tokens occupy ids 0-4") {
  Vocabulary v = train_vocab({"hello world"}, 30);
  CHECK(v.token(kPadId) == "[PAD]");
  CHECK(v.token(kUnkId) == "[UNK]");
  CHECK(v.token(kClsId) == "[CLS]");
  CHECK(v.token(kSepId) == "[SEP]");
  CHECK(v.token(kMaskId) == "[MASK]");
}

TEST_CASE("merge training produces the merged token") {
  // seeds: specials + "a" + "##a" (7 tokens); one merge adds "aa"
  Vocabulary v = train_vocab({"aa aa aa"}, 8);
  CHECK(v.contains("a"));
  CHECK(v.contains("##a"));
  CHECK(v.contains("aa"));
  CHECK(v.size() == 8);
}

TEST_CASE("training is deterministic (byte-identical files)") {
  std::vector<std::string> corpus = {"the cat sat", "the mat sat flat",
                                     "cats and mats"};
  Vocabulary a = train_vocab(corpus, 40);
  Vocabulary b = train_vocab(corpus, 40);
  std::string pa = tmp_path("tess_vocab_a.txt"), pb = tmp_path("tess_vocab_b.txt");
  a.save(pa);
  b.save(pb);
  CHECK(read_file(pa) == read_file(pb));
  std::remove(pa.c_str());
  std::remove(pb.c_str());
}

TEST_CASE("empty corpus is rejected") {
  CHECK_THROWS_AS(train_vocab({}, 100), InputError);
  CHECK_THROWS_AS(train_vocab({"   "}, 100), InputError);
}

TEST_CASE("vocabulary ids form a bijection") {
  Vocabulary v = train_vocab({"abc abd bcd"}, 25);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(v.id(v.token(static_cast<int>(i))) == static_cast<int>(i));
}

TEST_CASE("greedy longest match prefers whole words") {
  Vocabulary v;
  v.add("un");
  v.add("##able");
  v.add("able");
  auto ids = tokenize(v, "unable");
  REQUIRE(ids.size() == 2);
  CHECK(v.token(ids[0]) == "un");
  CHECK(v.token(ids[1]) == "##able");
}

TEST_CASE("tokenize edge cases") {
  Vocabulary v = train_vocab({"hello world"}, 30);
  CHECK(tokenize(v, "").empty());
  auto unk = tokenize(v, "zzz qqq");
  REQUIRE(unk.size() == 2);
  CHECK(unk[0] == kUnkId);
  CHECK(unk[1] == kUnkId);
}

TEST_CASE("tokenize lowercases and splits punctuation") {
  Vocabulary v = train_vocab({"hello , world ."}, 40);
  auto a = tokenize(v, "Hello, World.");
  auto b = tokenize(v, "hello , world .");
  CHECK(a == b);
}

TEST_CASE("decode round-trips covered text") {
  std::vector<std::string> corpus = {"the cat sat on the mat",
                                     "a cat and a mat"};
  Vocabulary v = train_vocab(corpus, 60);
  std::string text = "The cat sat  on the MAT";
  CHECK(decode(v, tokenize(v, text)) == "the cat sat on the mat");
}

TEST_CASE("encode_pair single text layout") {
  Vocabulary v = train_vocab({"hi there"}, 20);
  EncodedSequence seq = encode_pair(v, "hi", std::nullopt, 16);
  CHECK(seq.length() == 16);
  int real = 0;
  for (int m : seq.attention_mask) real += m;
  CHECK(real == 3);  // [CLS] hi [SEP]
  CHECK(seq.token_ids[0] == kClsId);
  CHECK(seq.token_ids[2] == kSepId);
  for (std::size_t i = 3; i < 16; ++i) CHECK(seq.token_ids[i] == kPadId);
}

TEST_CASE("longest-first truncation balances a long pair") {
  // two 500-"word" texts map to 500 tokens each with a char-level vocab
  Vocabulary v = train_vocab({"x y"}, 10);
  std::string a, b;
  for (int i = 0; i < 500; ++i) {
    a += "x ";
    b += "y ";
  }
  EncodedSequence seq = encode_pair(v, a, b, 768);
  int real = 0;
  for (int m : seq.attention_mask) real += m;
  CHECK(real == 768);
  long la = 0, lb = 0;
  for (std::size_t i = 0; i < seq.length(); ++i) {
    if (!seq.attention_mask[i] || seq.special_mask[i]) continue;
    (seq.segment_ids[i] == 0 ? la : lb)++;
  }
  CHECK(std::abs(la - lb) <= 1);
}

TEST_CASE("single over-length text truncates to t_max minus specials") {
  Vocabulary v = train_vocab({"x"}, 8);
  std::string text;
  for (int i = 0; i < 800; ++i) text += "x ";
  EncodedSequence seq = encode_pair(v, text, std::nullopt, 768);
  int real = 0;
  for (int m : seq.attention_mask) real += m;
  CHECK(real == 768);
  long body = 0;
  for (std::size_t i = 0; i < seq.length(); ++i)
    if (!seq.special_mask[i]) ++body;
  CHECK(body == 766);
}

TEST_CASE("encode_pair invariants hold over random inputs") {
  Vocabulary v = train_vocab({"alpha beta gamma delta epsilon zeta"}, 60);
  Rng rng(5);
  std::uniform_int_distribution<int> words(0, 40);
  std::uniform_int_distribution<std::size_t> tmax(8, 64);
  std::vector<std::string> pool = {"alpha", "beta", "gamma",
                                   "delta", "epsilon", "zeta", "qqq"};
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (int trial = 0; trial < 200; ++trial) {
    auto make_text = [&] {
      std::string s;
      int n = words(rng);
      for (int i = 0; i < n; ++i) s += pool[pick(rng)] + " ";
      return s.empty() ? std::string("alpha") : s;
    };
    std::optional<std::string> b;
    if (trial % 2) b = make_text();
    EncodedSequence seq = encode_pair(v, make_text(), b, tmax(rng));
    REQUIRE(seq.token_ids.size() == seq.attention_mask.size());
    REQUIRE(seq.token_ids.size() == seq.segment_ids.size());
    REQUIRE(seq.token_ids.size() == seq.special_mask.size());
    CHECK(seq.token_ids[0] == kClsId);
    int seps = 0;
    for (std::size_t i = 0; i < seq.length(); ++i) {
      bool is_pad = seq.token_ids[i] == kPadId;
      CHECK((seq.attention_mask[i] == 0) == is_pad);
      if (seq.token_ids[i] == kSepId) ++seps;
      if (is_pad || seq.token_ids[i] == kSepId || seq.token_ids[i] == kClsId)
        CHECK(seq.special_mask[i] == 1);
    }
    CHECK(seps == (b ? 2 : 1));
  }
}

TEST_CASE("vocabulary save/load round-trip") {
  Vocabulary v = train_vocab({"round trip tokens"}, 30);
  std::string p = tmp_path("tess_vocab_rt.txt");
  v.save(p);
  Vocabulary loaded = Vocabulary::load(p);
  CHECK(loaded.tokens() == v.tokens());
  std::remove(p.c_str());
}
