#pragma once
// Shared-vocabulary WordPiece-style subword tokenizer. One vocabulary is
// trained over the concatenation of all three text streams (code-mixed,
// base-language, mixing-language) and reused by every model component.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace cml {

// Special-token ids are fixed project-wide; training never reassigns them.
constexpr int kPadId = 0;
constexpr int kUnkId = 1;
constexpr int kClsId = 2;
constexpr int kSepId = 3;
constexpr int kMaskId = 4;
constexpr int kNumSpecials = 5;

// word_ids entry for tokens that do not belong to any source word.
constexpr int kNoWord = -1;

// Continuation marker for non-initial subword pieces.
inline const std::string kContinuationPrefix = "##";

class Vocabulary {
 public:
  Vocabulary() = default;

  // Greedy frequency pair-merging. Starts from the alphabet (every character
  // seen in the corpus, in both word-initial and continuation form, so any
  // word over known characters always segments), then repeatedly merges the
  // most frequent adjacent unit pair until vocab_size is reached or no pair
  // occurs at least min_freq times. Ties break on the lexicographically
  // smallest (left, right) pair, which makes the result deterministic.
  static Vocabulary train(const std::vector<std::string>& texts,
                          int vocab_size, int min_freq = 1);

  // Builds a vocabulary from an explicit id->token list. The first five
  // entries must be the special tokens in their fixed order.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  // One token per line, line number = id; the first line is the PAD token.
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return static_cast<int>(id_to_token_.size()); }
  bool contains(const std::string& token) const;
  // -1 when the token is absent.
  int id_of(const std::string& token) const;
  const std::string& token_of(int id) const;

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

struct Encoding {
  std::vector<int> ids;
  std::vector<int> word_ids;  // source word index, kNoWord for specials
  std::vector<int> mask;      // 1 per token; padding added later sets 0
};

// Whitespace pre-tokenization + greedy longest-match subword split. A word
// with no full segmentation becomes a single [UNK]. With add_specials the
// result is [CLS] body [SEP] and truncation keeps both specials; max_len
// must then be at least 2.
Encoding encode(const std::string& text, const Vocabulary& vocab,
                bool add_specials, int max_len);

// Inverse of encode up to whitespace normalization for fully in-vocab text.
// Non-UNK specials are stripped; [UNK] is rendered literally.
std::string decode(const std::vector<int>& ids, const Vocabulary& vocab);

// Helpers shared with the corpus module (and exposed for tests).
std::vector<std::string> split_whitespace(const std::string& text);
std::vector<std::string> utf8_chars(const std::string& word);

// Greedy longest-match split of one word; empty result means "not
// segmentable" (caller substitutes [UNK]).
std::vector<std::string> wordpiece_split(const std::string& word,
                                         const Vocabulary& vocab);

}  // namespace cml
