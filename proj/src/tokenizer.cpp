#include "cmlformer/tokenizer.hpp"

#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace cml {

namespace {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> kSpecials = {
      "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return kSpecials;
}

bool is_continuation(const std::string& unit) {
  return unit.size() > 2 && unit.compare(0, 2, kContinuationPrefix) == 0;
}

}  // namespace

std::vector<std::string> split_whitespace(const std::string& text) {
  std::vector<std::string> words;
  size_t i = 0;
  const size_t n = text.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    size_t start = i;
    while (i < n && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) words.push_back(text.substr(start, i - start));
  }
  return words;
}

std::vector<std::string> utf8_chars(const std::string& word) {
  std::vector<std::string> chars;
  size_t i = 0;
  while (i < word.size()) {
    const unsigned char lead = static_cast<unsigned char>(word[i]);
    size_t len = 1;
    if ((lead & 0x80u) == 0x00u) {
      len = 1;
    } else if ((lead & 0xE0u) == 0xC0u) {
      len = 2;
    } else if ((lead & 0xF0u) == 0xE0u) {
      len = 3;
    } else if ((lead & 0xF8u) == 0xF0u) {
      len = 4;
    }
    // Malformed or truncated sequences degrade to single raw bytes.
    if (i + len > word.size()) len = 1;
    for (size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(word[i + k]) & 0xC0u) != 0x80u) {
        len = 1;
        break;
      }
    }
    chars.push_back(word.substr(i, len));
    i += len;
  }
  return chars;
}

// ---- Vocabulary ----

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < static_cast<size_t>(kNumSpecials)) {
    throw std::runtime_error("vocabulary: fewer than " +
                             std::to_string(kNumSpecials) + " tokens");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (tokens[static_cast<size_t>(i)] != special_tokens()[static_cast<size_t>(i)]) {
      throw std::runtime_error("vocabulary: token " + std::to_string(i) +
                               " must be " + special_tokens()[static_cast<size_t>(i)] +
                               ", got '" + tokens[static_cast<size_t>(i)] + "'");
    }
  }
  Vocabulary v;
  v.id_to_token_ = std::move(tokens);
  for (size_t i = 0; i < v.id_to_token_.size(); ++i) {
    const std::string& t = v.id_to_token_[i];
    if (t.empty()) {
      throw std::runtime_error("vocabulary: empty token at id " +
                               std::to_string(i));
    }
    for (char c : t) {
      if (std::isspace(static_cast<unsigned char>(c))) {
        throw std::runtime_error("vocabulary: token at id " +
                                 std::to_string(i) + " contains whitespace");
      }
    }
    if (!v.token_to_id_.emplace(t, static_cast<int>(i)).second) {
      throw std::runtime_error("vocabulary: duplicate token '" + t + "'");
    }
  }
  return v;
}

Vocabulary Vocabulary::train(const std::vector<std::string>& texts,
                             int vocab_size, int min_freq) {
  if (min_freq < 1) min_freq = 1;

  // std::map keeps word and pair iteration deterministic.
  std::map<std::string, int64_t> word_freq;
  for (const std::string& text : texts) {
    for (const std::string& w : split_whitespace(text)) ++word_freq[w];
  }
  if (word_freq.empty()) {
    throw std::runtime_error("train_vocab: corpus contains no words");
  }

  struct WordEntry {
    std::vector<std::string> units;
    int64_t freq;
  };
  std::vector<WordEntry> words;
  std::set<std::string> alphabet;
  for (const auto& [w, f] : word_freq) {
    WordEntry e;
    e.freq = f;
    const auto chars = utf8_chars(w);
    for (size_t i = 0; i < chars.size(); ++i) {
      e.units.push_back(i == 0 ? chars[i] : kContinuationPrefix + chars[i]);
      // Both forms of every character go in, so any word over seen
      // characters stays segmentable and [UNK] only covers novel characters.
      alphabet.insert(chars[i]);
      alphabet.insert(kContinuationPrefix + chars[i]);
    }
    words.push_back(std::move(e));
  }

  const int64_t floor_size =
      kNumSpecials + static_cast<int64_t>(alphabet.size());
  if (vocab_size < floor_size) {
    throw std::runtime_error(
        "train_vocab: vocab_size " + std::to_string(vocab_size) +
        " is smaller than specials + alphabet = " + std::to_string(floor_size));
  }

  std::vector<std::string> tokens = special_tokens();
  tokens.insert(tokens.end(), alphabet.begin(), alphabet.end());

  while (static_cast<int>(tokens.size()) < vocab_size) {
    std::map<std::pair<std::string, std::string>, int64_t> pair_freq;
    for (const WordEntry& e : words) {
      for (size_t i = 0; i + 1 < e.units.size(); ++i) {
        pair_freq[{e.units[i], e.units[i + 1]}] += e.freq;
      }
    }
    // Strictly-greater keeps the first maximum in map order, i.e. the
    // lexicographically smallest pair among ties.
    const std::pair<std::string, std::string>* best = nullptr;
    int64_t best_count = 0;
    for (const auto& [p, c] : pair_freq) {
      if (c > best_count) {
        best = &p;
        best_count = c;
      }
    }
    if (!best || best_count < min_freq) break;

    if (!is_continuation(best->second)) {
      throw std::runtime_error("train_vocab: malformed unit pair");
    }
    const std::string merged = best->first + best->second.substr(2);
    tokens.push_back(merged);

    for (WordEntry& e : words) {
      std::vector<std::string> next;
      next.reserve(e.units.size());
      size_t i = 0;
      while (i < e.units.size()) {
        if (i + 1 < e.units.size() && e.units[i] == best->first &&
            e.units[i + 1] == best->second) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(e.units[i]);
          ++i;
        }
      }
      e.units = std::move(next);
    }
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocab file: " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocab file: " + path);
  for (const std::string& t : id_to_token_) out << t << '\n';
  if (!out) throw std::runtime_error("failed writing vocab file: " + path);
}

bool Vocabulary::contains(const std::string& token) const {
  return token_to_id_.count(token) != 0;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? -1 : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size()) {
    throw std::runtime_error("vocabulary: id " + std::to_string(id) +
                             " out of range [0," + std::to_string(size()) +
                             ")");
  }
  return id_to_token_[static_cast<size_t>(id)];
}

// ---- encode / decode ----

std::vector<std::string> wordpiece_split(const std::string& word,
                                         const Vocabulary& vocab) {
  const auto chars = utf8_chars(word);
  std::vector<std::string> pieces;
  size_t start = 0;
  while (start < chars.size()) {
    size_t end = chars.size();
    std::string found;
    while (end > start) {
      std::string cand;
      if (start > 0) cand = kContinuationPrefix;
      for (size_t i = start; i < end; ++i) cand += chars[i];
      if (vocab.contains(cand)) {
        found = std::move(cand);
        break;
      }
      --end;
    }
    if (found.empty()) return {};  // no full segmentation for this word
    pieces.push_back(std::move(found));
    start = end;
  }
  return pieces;
}

Encoding encode(const std::string& text, const Vocabulary& vocab,
                bool add_specials, int max_len) {
  if (add_specials && max_len < 2) {
    throw std::runtime_error("encode: max_len must be >= 2 with specials");
  }
  if (max_len < 0) throw std::runtime_error("encode: negative max_len");

  Encoding enc;
  if (add_specials) {
    enc.ids.push_back(kClsId);
    enc.word_ids.push_back(kNoWord);
  }
  const int body_budget = add_specials ? max_len - 2 : max_len;
  int body = 0;
  const auto words = split_whitespace(text);
  for (size_t w = 0; w < words.size() && body < body_budget; ++w) {
    auto pieces = wordpiece_split(words[w], vocab);
    if (pieces.empty()) pieces = {"[UNK]"};
    for (const std::string& p : pieces) {
      if (body >= body_budget) break;
      enc.ids.push_back(vocab.id_of(p));
      enc.word_ids.push_back(static_cast<int>(w));
      ++body;
    }
  }
  if (add_specials) {
    enc.ids.push_back(kSepId);
    enc.word_ids.push_back(kNoWord);
  }
  enc.mask.assign(enc.ids.size(), 1);
  return enc;
}

std::string decode(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    const std::string& tok = vocab.token_of(id);
    if (id == kPadId || id == kClsId || id == kSepId || id == kMaskId) {
      continue;  // [UNK] stays visible
    }
    if (is_continuation(tok) || tok == kContinuationPrefix) {
      out += tok.substr(2);
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

}  // namespace cml
