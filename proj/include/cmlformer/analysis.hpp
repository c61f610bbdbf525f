#pragma once
// Attention diagnostics: column means of one encoder self-attention head per
// attended token, min-max scaled, with an optional switching-point overlay.
// Exported as JSON so plots can be produced outside the library.

#include <string>
#include <vector>

#include "cmlformer/model.hpp"
#include "cmlformer/tokenizer.hpp"

namespace cml {

// One entry per kept subword token (CLS/SEP/PAD are dropped). scores are
// min-max scaled into [0,1]; when every column mean is equal the scale is
// undefined and all scores become 0.5. switch_flags carry the word-level
// switching-point bit on each word's first subword and 0 everywhere else
// (all zero when no labels were supplied).
struct AttentionProfile {
  std::vector<std::string> tokens;
  std::vector<double> scores;
  std::vector<int> switch_flags;
  int layer = 0;
  int head = 0;
};

// Encodes one text, runs the encoder, and averages the selected attention
// head's weight matrix over all non-PAD query rows, one mean per kept key
// column. labels, when given, are the word-level language ids of exactly the
// whitespace words of text. Throws std::invalid_argument when layer/head are
// out of range or the text does not fit max_seq_len.
AttentionProfile attention_profile(const CMLFormer& model,
                                   const Vocabulary& vocab,
                                   const std::string& text,
                                   const std::vector<int>* labels = nullptr,
                                   int layer = 0, int head = 0);

// Writes {"tokens": ..., "scores": ..., "switch_flags": ..., "layer": ...,
// "head": ...} in exactly that key order. Scores are printed in full double
// precision so a reloaded profile compares equal; token strings stay UTF-8.
void export_profile(const AttentionProfile& profile, const std::string& path);

// Strict inverse of export_profile; errors carry the path in the message.
AttentionProfile load_profile(const std::string& path);

}  // namespace cml
