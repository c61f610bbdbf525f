#include "cmlformer/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "cmlformer/corpus.hpp"
#include "json.hpp"

namespace cml {

namespace {

// Full double precision in a fixed exponent format: 17 significant digits,
// enough for the parsed value to equal the original bit for bit.
std::string format_score(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.16e", v);
  return buf;
}

}  // namespace

AttentionProfile attention_profile(const CMLFormer& model,
                                   const Vocabulary& vocab,
                                   const std::string& text,
                                   const std::vector<int>* labels, int layer,
                                   int head) {
  const ModelConfig& cfg = model.config();
  if (layer < 0 || layer >= cfg.num_layers) {
    throw std::invalid_argument("attention layer " + std::to_string(layer) +
                                " out of range, model has " +
                                std::to_string(cfg.num_layers) + " layers");
  }
  if (head < 0 || head >= cfg.num_heads) {
    throw std::invalid_argument("attention head " + std::to_string(head) +
                                " out of range, model has " +
                                std::to_string(cfg.num_heads) + " heads");
  }

  // encode() truncates silently, so measure the untruncated length first.
  Encoding enc =
      encode(text, vocab, /*add_specials=*/true, std::numeric_limits<int>::max());
  const int len = static_cast<int>(enc.ids.size());
  if (len > cfg.max_seq_len) {
    throw std::invalid_argument("text spans " + std::to_string(len) +
                                " tokens, the model accepts at most " +
                                std::to_string(cfg.max_seq_len));
  }

  const EncoderOutput out = model.encode({enc.ids}, {enc.mask});
  const Tensor& attn = out.attentions[static_cast<size_t>(layer)];
  const std::vector<double>& w = attn.values();
  const size_t t = enc.ids.size();
  const size_t head_off = static_cast<size_t>(head) * t * t;

  // Raw profile: mean over non-PAD query rows, one value per key column.
  int queries = 0;
  for (size_t i = 0; i < t; ++i) queries += enc.mask[i] != 0 ? 1 : 0;

  AttentionProfile profile;
  profile.layer = layer;
  profile.head = head;

  std::vector<int> flags_by_token;
  if (labels != nullptr) {
    flags_by_token =
        align_word_labels(derive_switching_points(*labels), enc, /*ignore=*/0);
  }

  for (size_t j = 0; j < t; ++j) {
    const int id = enc.ids[j];
    if (enc.mask[j] == 0 || id == kClsId || id == kSepId) continue;
    double sum = 0.0;
    for (size_t i = 0; i < t; ++i) {
      if (enc.mask[i] == 0) continue;
      sum += w[head_off + i * t + j];
    }
    profile.tokens.push_back(vocab.token_of(id));
    profile.scores.push_back(sum / queries);
    profile.switch_flags.push_back(labels != nullptr ? flags_by_token[j] : 0);
  }

  // Min-max scale; a flat profile has no spread to scale by.
  double mn = std::numeric_limits<double>::infinity();
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : profile.scores) {
    mn = std::min(mn, s);
    mx = std::max(mx, s);
  }
  for (double& s : profile.scores) {
    s = mx > mn ? (s - mn) / (mx - mn) : 0.5;
  }
  return profile;
}

void export_profile(const AttentionProfile& profile, const std::string& path) {
  if (profile.tokens.size() != profile.scores.size() ||
      profile.tokens.size() != profile.switch_flags.size()) {
    throw std::runtime_error("attention profile field lengths disagree");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");

  out << "{\n  \"tokens\": [";
  for (size_t i = 0; i < profile.tokens.size(); ++i) {
    if (i > 0) out << ", ";
    out << nlohmann::json(profile.tokens[i]).dump();
  }
  out << "],\n  \"scores\": [";
  for (size_t i = 0; i < profile.scores.size(); ++i) {
    if (i > 0) out << ", ";
    out << format_score(profile.scores[i]);
  }
  out << "],\n  \"switch_flags\": [";
  for (size_t i = 0; i < profile.switch_flags.size(); ++i) {
    if (i > 0) out << ", ";
    out << profile.switch_flags[i];
  }
  out << "],\n  \"layer\": " << profile.layer
      << ",\n  \"head\": " << profile.head << "\n}\n";
  if (!out) throw std::runtime_error(path + ": write failed");
}

AttentionProfile load_profile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  AttentionProfile profile;
  try {
    profile.tokens = doc.at("tokens").get<std::vector<std::string>>();
    profile.scores = doc.at("scores").get<std::vector<double>>();
    profile.switch_flags = doc.at("switch_flags").get<std::vector<int>>();
    profile.layer = doc.at("layer").get<int>();
    profile.head = doc.at("head").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (profile.tokens.size() != profile.scores.size() ||
      profile.tokens.size() != profile.switch_flags.size()) {
    throw std::runtime_error(path + ": field lengths disagree");
  }
  return profile;
}

}  // namespace cml
