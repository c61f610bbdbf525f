#include "cmlformer/corpus.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace cml {

namespace {

void check_bits(const std::vector<int>& v, const char* what) {
  for (int x : v) {
    if (x != 0 && x != 1) {
      throw std::runtime_error(std::string(what) + " contains value " +
                               std::to_string(x) + ", expected 0/1 bits");
    }
  }
}

}  // namespace

std::vector<int> derive_switching_points(const std::vector<int>& labels) {
  if (labels.empty()) {
    throw std::runtime_error("derive_switching_points: empty label vector");
  }
  check_bits(labels, "labels");
  std::vector<int> t(labels.size(), 0);
  for (size_t i = 1; i < labels.size(); ++i) {
    t[i] = labels[i] != labels[i - 1] ? 1 : 0;
  }
  return t;
}

double compute_cmi(const std::vector<int>& labels,
                   const std::vector<int>& switching_points,
                   const CmiConfig& cfg) {
  if (labels.empty()) throw std::runtime_error("compute_cmi: empty labels");
  if (labels.size() != switching_points.size()) {
    throw std::runtime_error(
        "compute_cmi: " + std::to_string(labels.size()) + " labels vs " +
        std::to_string(switching_points.size()) + " switching points");
  }
  if (cfg.w_n < 0.0 || cfg.w_p < 0.0 || cfg.w_n + cfg.w_p <= 0.0) {
    throw std::runtime_error("compute_cmi: weights must be >= 0 with a "
                             "positive sum");
  }
  check_bits(labels, "labels");
  check_bits(switching_points, "switching_points");
  const double n = static_cast<double>(labels.size());
  double n_base = 0.0, p = 0.0;
  for (int l : labels) n_base += l == 0 ? 1.0 : 0.0;
  for (int t : switching_points) p += t;
  return (cfg.w_n * (n - n_base) + cfg.w_p * p) / n;
}

std::vector<int> align_word_labels(const std::vector<int>& word_labels,
                                   const Encoding& encoding,
                                   int ignore_value) {
  int max_word = kNoWord;
  for (int w : encoding.word_ids) max_word = std::max(max_word, w);
  if (max_word + 1 != static_cast<int>(word_labels.size())) {
    throw std::runtime_error(
        "align_word_labels: encoding covers " + std::to_string(max_word + 1) +
        " words but " + std::to_string(word_labels.size()) +
        " labels were given");
  }
  std::vector<int> out(encoding.word_ids.size(), ignore_value);
  int prev = kNoWord;
  for (size_t i = 0; i < encoding.word_ids.size(); ++i) {
    const int w = encoding.word_ids[i];
    if (w == kNoWord) continue;
    if (w != prev) out[i] = word_labels[static_cast<size_t>(w)];
    prev = w;
  }
  return out;
}

void validate_record(const CorpusRecord& rec, bool require_switching_points) {
  const size_t words = split_whitespace(rec.cm_text).size();
  if (words == 0) {
    throw std::runtime_error("record has an empty code-mixed sentence");
  }
  if (rec.labels.size() != words) {
    throw std::runtime_error("record has " + std::to_string(words) +
                             " words but " + std::to_string(rec.labels.size()) +
                             " labels");
  }
  check_bits(rec.labels, "labels");
  if (rec.switching_points.empty() && !require_switching_points) return;
  if (rec.switching_points.size() != words) {
    throw std::runtime_error(
        "record has " + std::to_string(words) + " words but " +
        std::to_string(rec.switching_points.size()) + " switching points");
  }
  check_bits(rec.switching_points, "switching_points");
  if (rec.switching_points[0] != 0) {
    throw std::runtime_error(
        "switching_points must start with 0 (no transition on the first "
        "word)");
  }
  for (size_t i = 1; i < words; ++i) {
    const int expect = rec.labels[i] != rec.labels[i - 1] ? 1 : 0;
    if (rec.switching_points[i] != expect) {
      throw std::runtime_error(
          "switching_points[" + std::to_string(i) +
          "] inconsistent with labels (expected " + std::to_string(expect) +
          ")");
    }
  }
}

std::vector<CorpusRecord> load_jsonl(const std::string& path,
                                     bool require_switching_points) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::vector<CorpusRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    try {
      if (line.empty()) throw std::runtime_error("blank line");
      const nlohmann::json j = nlohmann::json::parse(line);
      if (!j.is_object()) throw std::runtime_error("not a JSON object");
      CorpusRecord rec;
      rec.cm_text = j.at("hinglish").get<std::string>();
      if (j.contains("english")) rec.mix_text = j.at("english").get<std::string>();
      if (j.contains("hindi_roman")) {
        rec.base_text = j.at("hindi_roman").get<std::string>();
      }
      rec.labels = j.at("labels").get<std::vector<int>>();
      if (j.contains("switching_points")) {
        rec.switching_points =
            j.at("switching_points").get<std::vector<int>>();
      }
      validate_record(rec, require_switching_points);
      out.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  return out;
}

void save_jsonl(const std::vector<CorpusRecord>& records,
                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path);
  for (const CorpusRecord& rec : records) {
    nlohmann::ordered_json j;
    j["hinglish"] = rec.cm_text;
    j["english"] = rec.mix_text;
    j["hindi_roman"] = rec.base_text;
    j["labels"] = rec.labels;
    j["switching_points"] = rec.switching_points;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing corpus file: " + path);
}

std::string build_translation_prompt(const std::string& hinglish_text) {
  static const char* const kTemplate =
      R"PROMPT(Task: Translate the given Hinglish text into both formal English and standardized Hindi (written in Roman script).

Input Hinglish: "{hinglish_text}"

Requirements:

1. English translation should be grammatically correct and natural.
2. Hindi translation must use ONLY Roman script (Latin alphabet), not Devanagari.
3. Maintain the original meaning and tone in both translations.
4. Use standard transliteration conventions for Hindi.
5. Preserve context from the original text.

Important:

- DO NOT include any explanations, notes, or additional text.
- Respond ONLY with the exact JSON format shown below.
- Both translations should be complete sentences with proper punctuation.
- If the input text is not in Hinglish, English, or Hindi, return "NULL"
- If the input is Hindi, return the Hindi as is in the "hindi_roman" field.
- If the input is English, return the English as is in the "english" field.

Return this exact JSON structure:

{
  "english": "Your English translation here",
  "hindi_roman": "Your Hindi translation in Roman script here"
}

Examples:

Input: "Main kal movie dekhne jaa raha hoon"
Output: {"english": "I am going to watch a movie tomorrow", "hindi_roman": "Main kal film dekhne ja raha hoon"}

Input: "Office ke baad hum coffee shop par milenge"
Output: {"english": "We will meet at the coffee shop after office", "hindi_roman": "Karyalay ke baad hum coffee shop par milenge"})PROMPT";

  std::string prompt = kTemplate;
  const std::string placeholder = "{hinglish_text}";
  prompt.replace(prompt.find(placeholder), placeholder.size(), hinglish_text);
  return prompt;
}

std::optional<AugmentationResponse> parse_translation_response(
    const std::string& body) {
  nlohmann::json j = nlohmann::json::parse(body, nullptr,
                                           /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  if (!j.contains("english") || !j.contains("hindi_roman")) {
    return std::nullopt;
  }
  if (!j["english"].is_string() || !j["hindi_roman"].is_string()) {
    return std::nullopt;
  }
  AugmentationResponse resp;
  resp.english = j["english"].get<std::string>();
  resp.hindi_roman = j["hindi_roman"].get<std::string>();
  if (resp.english.empty() || resp.hindi_roman.empty()) return std::nullopt;
  if (resp.english == "NULL" || resp.hindi_roman == "NULL") {
    return std::nullopt;
  }
  return resp;
}

std::vector<CorpusRecord> augment(const std::vector<CorpusRecord>& records,
                                  TranslationTransport& transport,
                                  const AugmentOptions& opts,
                                  std::ostream* log, AugmentStats* stats) {
  if (opts.retries < 1) throw std::runtime_error("augment: retries must be >= 1");
  std::vector<CorpusRecord> out;
  for (size_t r = 0; r < records.size(); ++r) {
    const std::string prompt = build_translation_prompt(records[r].cm_text);
    std::optional<AugmentationResponse> resp;
    for (int attempt = 1; attempt <= opts.retries && !resp; ++attempt) {
      if (attempt > 1 && opts.delay_seconds > 0.0) {
        std::this_thread::sleep_for(
            std::chrono::duration<double>(opts.delay_seconds));
      }
      if (stats) ++stats->requests;
      try {
        resp = parse_translation_response(
            transport.request(prompt, opts.temperature));
      } catch (const std::exception& e) {
        if (log) {
          *log << "record " << r << " attempt " << attempt
               << " failed: " << e.what() << '\n';
        }
      }
    }
    if (!resp) {
      if (log) {
        *log << "record " << r << " skipped after " << opts.retries
             << " attempts\n";
      }
      if (stats) ++stats->skipped;
      continue;
    }
    CorpusRecord rec = records[r];
    rec.mix_text = resp->english;
    rec.base_text = resp->hindi_roman;
    out.push_back(std::move(rec));
    if (stats) ++stats->succeeded;
  }
  return out;
}

}  // namespace cml
