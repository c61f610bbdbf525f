#pragma once
// Corpus data model and annotation: parallel code-mixed records, word-level
// language labels, switching-point derivation, code-mixing index, subword
// label alignment, JSONL I/O, and the translation-augmentation client.

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cmlformer/tokenizer.hpp"

namespace cml {

// One parallel sentence. labels / switching_points are per whitespace word
// of cm_text: label 0 = base language (Hindi-Roman), 1 = mixing language
// (English); switching_points[i] = 1 iff a language transition happens
// before word i (always 0 at position 0).
struct CorpusRecord {
  std::string cm_text;    // JSONL field "hinglish"
  std::string mix_text;   // JSONL field "english"
  std::string base_text;  // JSONL field "hindi_roman"
  std::vector<int> labels;
  std::vector<int> switching_points;
};

// Weights for the code-mixing index: (w_n*(N - N_d) + w_p*P) / N where N is
// the word count, N_d the number of base-language words, and P the number of
// switching points.
struct CmiConfig {
  double w_n = 0.5;
  double w_p = 0.5;
};

// Label used at positions excluded from token-level losses.
constexpr int kIgnoreLabel = -100;

// T[0] = 0; T[i] = 1 iff labels[i] != labels[i-1].
std::vector<int> derive_switching_points(const std::vector<int>& labels);

double compute_cmi(const std::vector<int>& labels,
                   const std::vector<int>& switching_points,
                   const CmiConfig& cfg);

// Word-level labels -> token-level labels: the first subword of word w
// carries word_labels[w]; every other subword and every special token gets
// ignore_value. The encoding must cover exactly word_labels.size() words.
std::vector<int> align_word_labels(const std::vector<int>& word_labels,
                                   const Encoding& encoding,
                                   int ignore_value = kIgnoreLabel);

// Throws with a description when an invariant fails. With
// require_switching_points=false a record whose switching_points are still
// empty passes (used while the annotation pipeline is incomplete).
void validate_record(const CorpusRecord& rec,
                     bool require_switching_points = true);

// One JSON object per line with fields hinglish, english, hindi_roman,
// labels, switching_points. Load errors carry "path:line:" prefixes.
std::vector<CorpusRecord> load_jsonl(const std::string& path,
                                     bool require_switching_points = true);
void save_jsonl(const std::vector<CorpusRecord>& records,
                const std::string& path);

// Instruction prompt sent to the translation model, byte-stable for a given
// input so runs are reproducible.
std::string build_translation_prompt(const std::string& hinglish_text);

struct AugmentationResponse {
  std::string english;
  std::string hindi_roman;
};

// Strict parse of the expected {"english": ..., "hindi_roman": ...} reply.
// Returns nullopt (record to be skipped) for non-JSON bodies, prose-wrapped
// JSON, missing/non-string/empty fields, or the literal "NULL" refusal.
// Unknown extra keys are ignored.
std::optional<AugmentationResponse> parse_translation_response(
    const std::string& body);

// Transport for one translation request. Implementations may throw to
// signal a failed attempt; tests use canned responses, the CLI wires a real
// HTTP client.
class TranslationTransport {
 public:
  virtual ~TranslationTransport() = default;
  virtual std::string request(const std::string& prompt,
                              double temperature) = 0;
};

struct AugmentOptions {
  int retries = 3;             // total attempts per record
  double delay_seconds = 2.0;  // wait between attempts
  double temperature = 0.7;
};

struct AugmentStats {
  int succeeded = 0;
  int skipped = 0;
  int requests = 0;
};

// Fills mix_text/base_text of each record from the transport's translations.
// A record whose attempts all fail is dropped from the result; the run
// continues. Failures are reported on `log` when given.
std::vector<CorpusRecord> augment(const std::vector<CorpusRecord>& records,
                                  TranslationTransport& transport,
                                  const AugmentOptions& opts = {},
                                  std::ostream* log = nullptr,
                                  AugmentStats* stats = nullptr);

}  // namespace cml
