#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cmlformer/tensor.hpp"
#include "cmlformer/tokenizer.hpp"
#include "doctest.h"

using cml::Encoding;
using cml::Vocabulary;

namespace {

// Scratch files land in the system temp directory, never the source tree.
std::string tp(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Vocabulary tiny_vocab(std::vector<std::string> extra) {
  std::vector<std::string> tokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                     "[MASK]"};
  tokens.insert(tokens.end(), extra.begin(), extra.end());
  return Vocabulary::from_tokens(tokens);
}

}  // namespace

TEST_CASE("split_whitespace and utf8_chars") {
  CHECK(cml::split_whitespace("  a\tbb \n c  ") ==
        std::vector<std::string>{"a", "bb", "c"});
  CHECK(cml::split_whitespace("") == std::vector<std::string>{});
  CHECK(cml::utf8_chars("ab") == std::vector<std::string>{"a", "b"});
  // two-byte codepoint stays one character
  const std::string heart = "h\xc3\xa9!";
  CHECK(cml::utf8_chars(heart) ==
        std::vector<std::string>{"h", "\xc3\xa9", "!"});
  // stray continuation byte degrades to a raw single byte
  CHECK(cml::utf8_chars("\x80x") == std::vector<std::string>{"\x80", "x"});
}

TEST_CASE("specials occupy fixed ids and training never displaces them") {
  Vocabulary v = Vocabulary::train({"aa aa aa"}, 8);
  CHECK(v.id_of("[PAD]") == cml::kPadId);
  CHECK(v.id_of("[UNK]") == cml::kUnkId);
  CHECK(v.id_of("[CLS]") == cml::kClsId);
  CHECK(v.id_of("[SEP]") == cml::kSepId);
  CHECK(v.id_of("[MASK]") == cml::kMaskId);
  CHECK(v.contains("aa"));  // one merge of (a, ##a)
  CHECK(v.size() == 8);
}

TEST_CASE("vocab_size equal to alphabet+specials yields characters only") {
  Vocabulary v = Vocabulary::train({"ab"}, 9);
  CHECK(v.size() == 9);
  CHECK(v.contains("a"));
  CHECK(v.contains("##b"));
  CHECK(!v.contains("ab"));
  // alphabet is sorted, so ## forms come first
  CHECK(v.token_of(5) == "##a");
  CHECK(v.token_of(6) == "##b");
  CHECK(v.token_of(7) == "a");
  CHECK(v.token_of(8) == "b");
}

TEST_CASE("merge order: frequency first, lexicographic tie-break") {
  // (a,##b) and (c,##d) both occur twice; the lexicographically smaller
  // pair merges first.
  Vocabulary v = Vocabulary::train({"ab ab cd cd"}, 14);
  CHECK(v.size() == 14);
  CHECK(v.token_of(13) == "ab");
  CHECK(!v.contains("cd"));
  Vocabulary v2 = Vocabulary::train({"ab ab cd cd"}, 15);
  CHECK(v2.token_of(13) == "ab");
  CHECK(v2.token_of(14) == "cd");
}

TEST_CASE("min_freq gates merges") {
  Vocabulary v = Vocabulary::train({"ab cd cd"}, 20, 2);
  CHECK(v.contains("cd"));
  CHECK(!v.contains("ab"));
  // budget left unused when no pair is frequent enough
  CHECK(v.size() == 14);  // 5 specials + 8 char forms + "cd"
}

TEST_CASE("training errors") {
  CHECK_THROWS_AS(Vocabulary::train({"", "   "}, 100), std::runtime_error);
  // alphabet of "ab" needs 4 char forms + 5 specials
  CHECK_THROWS_AS(Vocabulary::train({"ab"}, 8), std::runtime_error);
}

TEST_CASE("training is deterministic") {
  const std::vector<std::string> corpus = {
      "college mein aaj exam hai", "exam mein college",
      "aaj aaj mein hai hai hai"};
  Vocabulary a = Vocabulary::train(corpus, 40);
  Vocabulary b = Vocabulary::train(corpus, 40);
  a.save(tp("tok_det_a.txt"));
  b.save(tp("tok_det_b.txt"));
  CHECK(slurp(tp("tok_det_a.txt")) == slurp(tp("tok_det_b.txt")));
}

TEST_CASE("vocab file format and load round trip") {
  Vocabulary v = Vocabulary::train({"aa bb aa"}, 12);
  v.save(tp("tok_roundtrip.txt"));
  const std::string body = slurp(tp("tok_roundtrip.txt"));
  CHECK(body.substr(0, 6) == "[PAD]\n");  // first line is id 0
  Vocabulary w = Vocabulary::load(tp("tok_roundtrip.txt"));
  CHECK(w.size() == v.size());
  for (int i = 0; i < v.size(); ++i) CHECK(w.token_of(i) == v.token_of(i));

  CHECK_THROWS_AS(Vocabulary::load("does_not_exist.vocab"),
                  std::runtime_error);
  {
    std::ofstream bad(tp("tok_bad_specials.txt"));
    bad << "[PAD]\n[UNK]\n[CLS]\n[MASK]\n[SEP]\na\n";  // swapped order
  }
  CHECK_THROWS_AS(Vocabulary::load(tp("tok_bad_specials.txt")),
                  std::runtime_error);
  {
    std::ofstream dup(tp("tok_dup.txt"));
    dup << "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\na\n";
  }
  CHECK_THROWS_AS(Vocabulary::load(tp("tok_dup.txt")), std::runtime_error);
}

TEST_CASE("encode: greedy longest match and word_ids") {
  Vocabulary v = tiny_vocab({"col", "##lege", "mein", "college"});
  // longest match wins: "college" is a single token when present
  Encoding e = cml::encode("college mein", v, false, 64);
  CHECK(e.ids == std::vector<int>{8, 7});
  CHECK(e.word_ids == std::vector<int>{0, 1});

  Vocabulary v2 = tiny_vocab({"col", "##lege", "mein"});
  Encoding e2 = cml::encode("college mein", v2, false, 64);
  CHECK(e2.ids == std::vector<int>{5, 6, 7});
  CHECK(e2.word_ids == std::vector<int>{0, 0, 1});
  CHECK(e2.mask == std::vector<int>{1, 1, 1});
}

TEST_CASE("encode: specials wrap the body") {
  Vocabulary v = tiny_vocab({"hai"});
  Encoding e = cml::encode("hai", v, true, 64);
  CHECK(e.ids == std::vector<int>{cml::kClsId, 5, cml::kSepId});
  CHECK(e.word_ids == std::vector<int>{cml::kNoWord, 0, cml::kNoWord});
  CHECK(e.mask.size() == 3);
  CHECK_THROWS_AS(cml::encode("hai", v, true, 1), std::runtime_error);
}

TEST_CASE("encode: unsegmentable word becomes one UNK") {
  Vocabulary v = tiny_vocab({"col", "##lege", "mein"});
  Encoding e = cml::encode("college zzz mein", v, false, 64);
  CHECK(e.ids == std::vector<int>{5, 6, cml::kUnkId, 7});
  CHECK(e.word_ids == std::vector<int>{0, 0, 1, 2});
  // a word that starts fine but hits an unknown character is all-UNK
  Encoding e2 = cml::encode("colz", v, false, 64);
  CHECK(e2.ids == std::vector<int>{cml::kUnkId});
}

TEST_CASE("encode: truncation preserves CLS and SEP") {
  Vocabulary v = tiny_vocab({"a", "b", "c", "d"});
  Encoding e = cml::encode("a b c d", v, true, 5);
  CHECK(e.ids.size() == 5);
  CHECK(e.ids.front() == cml::kClsId);
  CHECK(e.ids.back() == cml::kSepId);
  CHECK(e.ids == std::vector<int>{cml::kClsId, 5, 6, 7, cml::kSepId});
  CHECK(e.word_ids == std::vector<int>{cml::kNoWord, 0, 1, 2, cml::kNoWord});
  // without specials the budget applies to the body alone
  Encoding e2 = cml::encode("a b c d", v, false, 2);
  CHECK(e2.ids == std::vector<int>{5, 6});
}

TEST_CASE("decode: strips specials, renders UNK, joins continuations") {
  Vocabulary v = tiny_vocab({"col", "##lege", "mein"});
  const std::vector<int> ids = {cml::kClsId, 5,           6,
                                cml::kUnkId, 7,           cml::kSepId,
                                cml::kPadId, cml::kPadId};
  CHECK(cml::decode(ids, v) == "college [UNK] mein");
  CHECK(cml::decode({}, v) == "");
  CHECK_THROWS_AS(cml::decode({99}, v), std::runtime_error);
}

TEST_CASE("round trip on a trained vocabulary") {
  const std::vector<std::string> corpus = {
      "college mein aaj exam hai",
      "exam aaj nahi hai",
      "college ka exam mushkil hai"};
  Vocabulary v = Vocabulary::train(corpus, 60);
  for (const std::string& line : corpus) {
    Encoding e = cml::encode(line, v, true, 128);
    CHECK(cml::decode(e.ids, v) == line);
  }
}

TEST_CASE("property: encodings are well-formed over random corpora") {
  cml::Rng rng(2024);
  const std::string alpha = "abc";
  for (int round = 0; round < 20; ++round) {
    // random corpus over a 3-letter alphabet
    std::vector<std::string> corpus;
    for (int s = 0; s < 8; ++s) {
      std::string line;
      const int64_t n_words = rng.uniform_int(1, 6);
      for (int64_t w = 0; w < n_words; ++w) {
        if (w) line += ' ';
        const int64_t len = rng.uniform_int(1, 5);
        for (int64_t c = 0; c < len; ++c) {
          line += alpha[static_cast<size_t>(rng.uniform_int(0, 2))];
        }
      }
      corpus.push_back(line);
    }
    Vocabulary v = Vocabulary::train(corpus, 30);
    for (const std::string& line : corpus) {
      Encoding e = cml::encode(line, v, true, 128);
      REQUIRE(e.ids.size() == e.word_ids.size());
      REQUIRE(e.ids.size() == e.mask.size());
      int prev_word = cml::kNoWord;
      int first_piece_count = 0;
      for (size_t i = 0; i < e.ids.size(); ++i) {
        REQUIRE(e.ids[i] >= 0);
        REQUIRE(e.ids[i] < v.size());
        if (e.word_ids[i] == cml::kNoWord) continue;
        // word ids never decrease over non-special positions
        REQUIRE(e.word_ids[i] >= prev_word);
        if (e.word_ids[i] != prev_word) {
          ++first_piece_count;
          // first piece of a word is not a continuation token
          const std::string& tok = v.token_of(e.ids[i]);
          REQUIRE(tok.compare(0, 2, "##") != 0);
        }
        prev_word = e.word_ids[i];
      }
      // every word contributed exactly one first piece
      CHECK(first_piece_count ==
            static_cast<int>(cml::split_whitespace(line).size()));
      // alphabet coverage means no UNK ever appears here
      for (int id : e.ids) CHECK(id != cml::kUnkId);
      CHECK(cml::decode(e.ids, v) == line);
    }
  }
}
