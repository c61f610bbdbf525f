// cmlformer — operator CLI over the library: shared-vocabulary training,
// corpus annotation and augmentation, pre-training, fine-tuning, evaluation,
// attention-profile export, and the coupling ablation harness.
//
// Every command draws all randomness from the single --seed flag and writes
// a manifest (command, effective config, seed, version, method notes) next
// to its primary artifact, so a rerun with the same inputs reproduces the
// outputs byte for byte. Exit codes: 0 success, 1 validation error, 2
// runtime failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"

#include "cmlformer/analysis.hpp"
#include "cmlformer/corpus.hpp"
#include "cmlformer/model.hpp"
#include "cmlformer/tokenizer.hpp"
#include "cmlformer/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "cmlformer-0.1.0";

// Input/flag problems the operator can fix; reported with exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) {
    throw UsageError(std::string(what) + " not found: " + path);
  }
}

// ---- flat key=value config files ----------------------------------------

// Lines are `key = value`; blank lines and '#' comments are skipped. Every
// key must be consumed by the command, so a typo fails loudly instead of
// silently training with defaults.
class ConfigFile {
 public:
  ConfigFile() = default;

  explicit ConfigFile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file: " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string where = path + ":" + std::to_string(line_no);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const std::string body = line.substr(0, line.find('#'));
      const std::string stripped = trim(body);
      if (stripped.empty()) continue;
      const size_t eq = stripped.find('=');
      if (eq == std::string::npos) {
        throw UsageError(where + ": expected key=value, got '" + stripped +
                         "'");
      }
      const std::string key = trim(stripped.substr(0, eq));
      const std::string value = trim(stripped.substr(eq + 1));
      if (key.empty()) throw UsageError(where + ": empty key");
      if (!values_.emplace(key, value).second) {
        throw UsageError(where + ": duplicate key '" + key + "'");
      }
    }
  }

  int get_int(const std::string& key, int fallback) {
    const auto it = lookup(key);
    if (it == values_.end()) return fallback;
    size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(it->second, &used);
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    if (used != it->second.size()) {
      throw UsageError("config key '" + key + "': '" + it->second +
                       "' is not an integer");
    }
    return v;
  }

  double get_double(const std::string& key, double fallback) {
    const auto it = lookup(key);
    if (it == values_.end()) return fallback;
    size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(it->second, &used);
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    if (used != it->second.size()) {
      throw UsageError("config key '" + key + "': '" + it->second +
                       "' is not a number");
    }
    return v;
  }

  std::string get_string(const std::string& key, std::string fallback) {
    const auto it = lookup(key);
    return it == values_.end() ? fallback : it->second;
  }

  // Called once every known key has been read.
  void reject_unknown_keys() const {
    for (const auto& [key, value] : values_) {
      if (!consumed_.count(key)) {
        throw UsageError("unknown config key '" + key + "'");
      }
    }
  }

 private:
  static std::string trim(const std::string& s) {
    const size_t b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const size_t e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string>::const_iterator lookup(
      const std::string& key) {
    consumed_.insert(key);
    return values_.find(key);
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

// ---- shared command plumbing ---------------------------------------------

cml::CouplingMode coupling_from_flag(const std::string& name) {
  if (name == "none") return cml::CouplingMode::kNone;
  if (name == "sync" || name == "synchronous") {
    return cml::CouplingMode::kSynchronous;
  }
  if (name == "async" || name == "asynchronous") {
    return cml::CouplingMode::kAsynchronous;
  }
  throw UsageError("unknown coupling mode '" + name +
                   "' (expected none, sync, or async)");
}

const char* coupling_name(cml::CouplingMode mode) {
  switch (mode) {
    case cml::CouplingMode::kNone: return "none";
    case cml::CouplingMode::kSynchronous: return "synchronous";
    case cml::CouplingMode::kAsynchronous: return "asynchronous";
  }
  return "?";
}

// Comma-separated objective subset -> weights, keeping the configured value
// for named objectives and zeroing the rest.
cml::LossWeights select_objectives(const std::string& csv,
                                   const cml::LossWeights& configured) {
  static const std::map<std::string, double cml::LossWeights::*> kByName = {
      {"mlm", &cml::LossWeights::alpha},  {"spp", &cml::LossWeights::beta},
      {"btsp", &cml::LossWeights::gamma}, {"biltm", &cml::LossWeights::eta},
      {"tlc", &cml::LossWeights::zeta},   {"cmi", &cml::LossWeights::delta},
  };
  cml::LossWeights selected;
  selected.alpha = selected.beta = selected.gamma = 0.0;
  selected.eta = selected.zeta = selected.delta = 0.0;

  std::stringstream ss(csv);
  std::string name;
  bool any = false;
  while (std::getline(ss, name, ',')) {
    if (name.empty()) continue;
    const auto it = kByName.find(name);
    if (it == kByName.end()) {
      throw UsageError("unknown objective '" + name +
                       "' (expected mlm, spp, btsp, biltm, tlc, cmi)");
    }
    selected.*(it->second) = configured.*(it->second);
    any = true;
  }
  if (!any) throw UsageError("--objectives selects no objective");
  return selected;
}

cml::ModelConfig model_config_from(ConfigFile& file, int vocab_size,
                                   const std::string& coupling_flag) {
  cml::ModelConfig mc;
  mc.num_layers = file.get_int("num_layers", mc.num_layers);
  mc.hidden_dim = file.get_int("hidden_dim", mc.hidden_dim);
  mc.num_heads = file.get_int("num_heads", mc.num_heads);
  mc.ffn_dim = file.get_int("ffn_dim", mc.ffn_dim);
  mc.dropout_rate = file.get_double("dropout_rate", mc.dropout_rate);
  mc.max_seq_len = file.get_int("max_seq_len", mc.max_seq_len);
  std::string coupling =
      file.get_string("coupling", coupling_name(mc.coupling));
  if (!coupling_flag.empty()) coupling = coupling_flag;
  mc.coupling = coupling_from_flag(coupling);
  mc.src_vocab = vocab_size;
  mc.base_vocab = vocab_size;
  mc.mix_vocab = vocab_size;
  try {
    mc.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  return mc;
}

struct TrainOverrides {
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<double> decay;
};

cml::TrainConfig train_config_from(ConfigFile& file, cml::TrainConfig base,
                                   const TrainOverrides& over,
                                   uint64_t seed) {
  base.epochs = over.epochs.value_or(file.get_int("epochs", base.epochs));
  base.batch_size =
      over.batch_size.value_or(file.get_int("batch_size", base.batch_size));
  base.initial_lr =
      over.lr.value_or(file.get_double("initial_lr", base.initial_lr));
  base.decay_factor =
      over.decay.value_or(file.get_double("decay_factor", base.decay_factor));
  base.weights.alpha = file.get_double("alpha", base.weights.alpha);
  base.weights.beta = file.get_double("beta", base.weights.beta);
  base.weights.gamma = file.get_double("gamma", base.weights.gamma);
  base.weights.eta = file.get_double("eta", base.weights.eta);
  base.weights.zeta = file.get_double("zeta", base.weights.zeta);
  base.weights.delta = file.get_double("delta", base.weights.delta);
  base.seed = seed;
  try {
    base.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  return base;
}

ordered_json model_config_json(const cml::ModelConfig& mc) {
  return ordered_json{{"num_layers", mc.num_layers},
                      {"hidden_dim", mc.hidden_dim},
                      {"num_heads", mc.num_heads},
                      {"ffn_dim", mc.ffn_dim},
                      {"dropout_rate", mc.dropout_rate},
                      {"max_seq_len", mc.max_seq_len},
                      {"coupling", coupling_name(mc.coupling)},
                      {"src_vocab", mc.src_vocab},
                      {"base_vocab", mc.base_vocab},
                      {"mix_vocab", mc.mix_vocab}};
}

ordered_json train_config_json(const cml::TrainConfig& cfg) {
  return ordered_json{{"epochs", cfg.epochs},
                      {"batch_size", cfg.batch_size},
                      {"initial_lr", cfg.initial_lr},
                      {"decay_factor", cfg.decay_factor},
                      {"clip_norm", cfg.clip_norm},
                      {"weights",
                       {{"mlm", cfg.weights.alpha},
                        {"spp", cfg.weights.beta},
                        {"btsp", cfg.weights.gamma},
                        {"biltm", cfg.weights.eta},
                        {"tlc", cfg.weights.zeta},
                        {"cmi", cfg.weights.delta}}}};
}

const std::vector<std::string> kTrainingNotes = {
    "optimizer: plain SGD with the gradient scaled down whenever its global "
    "L2 norm exceeds clip_norm",
    "learning rate: initial_lr * decay_factor^epoch, stepped once per epoch",
    "batching: fixed-size batches in shuffled record order, trailing partial "
    "batch dropped; one record contributes all enabled objective views to "
    "its step",
};

void write_manifest(const std::string& path, const std::string& command,
                    ordered_json config, uint64_t seed,
                    const std::vector<std::string>& notes) {
  ordered_json doc{{"command", command},
                   {"config", std::move(config)},
                   {"seed", seed},
                   {"version", kVersion},
                   {"notes", notes}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << doc.dump(2) << "\n";
  if (!out) throw std::runtime_error(path + ": write failed");
}

std::string manifest_beside(const std::string& artifact) {
  return artifact + ".manifest.json";
}

std::vector<std::string> all_texts(const std::vector<cml::CorpusRecord>& recs) {
  std::vector<std::string> texts;
  texts.reserve(recs.size() * 3);
  for (const cml::CorpusRecord& r : recs) {
    texts.push_back(r.cm_text);
    if (!r.base_text.empty()) texts.push_back(r.base_text);
    if (!r.mix_text.empty()) texts.push_back(r.mix_text);
  }
  return texts;
}

std::vector<cml::LabeledExample> load_labeled_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open labeled data file: " + path);
  std::vector<cml::LabeledExample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    try {
      const auto j = nlohmann::json::parse(line);
      cml::LabeledExample ex;
      ex.text = j.at("text").get<std::string>();
      ex.label = j.at("label").get<int>();
      if (ex.label != 0 && ex.label != 1) {
        throw std::runtime_error("label must be 0 or 1");
      }
      if (ex.text.empty()) throw std::runtime_error("empty text");
      out.push_back(std::move(ex));
    } catch (const std::exception& e) {
      throw UsageError(where + ": " + e.what());
    }
  }
  if (out.empty()) throw UsageError(path + ": no labeled examples");
  return out;
}

// ---- augmentation transports ---------------------------------------------

// Offline stand-in: answers every prompt with a fixed-shape translation that
// echoes the prompt's input sentence, so pipelines can be exercised without
// a network. Deterministic by construction.
class MockTransport : public cml::TranslationTransport {
 public:
  std::string request(const std::string& prompt, double) override {
    const std::string marker = "Input Hinglish: \"";
    const size_t at = prompt.find(marker);
    std::string text;
    if (at != std::string::npos) {
      const size_t begin = at + marker.size();
      const size_t end = prompt.find('"', begin);
      if (end != std::string::npos) text = prompt.substr(begin, end - begin);
    }
    if (text.empty()) text = "kaam ho gaya";
    return nlohmann::json{{"english", text}, {"hindi_roman", text}}.dump();
  }
};

// POSTs {"prompt", "temperature"} as JSON and expects the raw model reply in
// the response body.
class HttpTransport : public cml::TranslationTransport {
 public:
  explicit HttpTransport(const std::string& endpoint) {
    const size_t scheme = endpoint.find("://");
    if (scheme == std::string::npos) {
      throw UsageError("endpoint must look like http://host:port/path, got " +
                       endpoint);
    }
    const size_t path_at = endpoint.find('/', scheme + 3);
    base_ = path_at == std::string::npos ? endpoint : endpoint.substr(0, path_at);
    path_ = path_at == std::string::npos ? "/" : endpoint.substr(path_at);
  }

  std::string request(const std::string& prompt, double temperature) override {
    httplib::Client client(base_);
    client.set_connection_timeout(10);
    client.set_read_timeout(60);
    const std::string body =
        nlohmann::json{{"prompt", prompt}, {"temperature", temperature}}
            .dump();
    httplib::Result res = client.Post(path_, body, "application/json");
    if (!res) {
      throw std::runtime_error("request to " + base_ + path_ + " failed: " +
                               httplib::to_string(res.error()));
    }
    if (res->status != 200) {
      throw std::runtime_error("request to " + base_ + path_ +
                               " returned status " +
                               std::to_string(res->status));
    }
    return res->body;
  }

 private:
  std::string base_;
  std::string path_;
};

// ---- commands -------------------------------------------------------------

struct TokenizerTrainArgs {
  std::string corpus;
  std::string out;
  int vocab_size = 30000;
  int min_freq = 1;
};

int run_tokenizer_train(const TokenizerTrainArgs& a, uint64_t seed) {
  require_file(a.corpus, "corpus file");
  if (a.vocab_size < 1) throw UsageError("--vocab-size must be positive");
  if (a.min_freq < 1) throw UsageError("--min-freq must be positive");

  const auto records =
      cml::load_jsonl(a.corpus, /*require_switching_points=*/false);
  const cml::Vocabulary vocab =
      cml::Vocabulary::train(all_texts(records), a.vocab_size, a.min_freq);
  vocab.save(a.out);
  write_manifest(
      manifest_beside(a.out), "tokenizer-train",
      ordered_json{{"corpus", a.corpus},
                   {"vocab_size", a.vocab_size},
                   {"min_freq", a.min_freq},
                   {"out", a.out}},
      seed,
      {"vocabulary is shared by the code-mixed, base, and mixing streams",
       "training is frequency-deterministic; the seed does not influence it"});
  std::cout << "trained vocabulary of " << vocab.size() << " tokens from "
            << records.size() << " records -> " << a.out << "\n";
  return 0;
}

struct AnnotateArgs {
  std::string in;
  std::string out;
  double wn = 0.5;
  double wp = 0.5;
};

int run_annotate(const AnnotateArgs& a, uint64_t seed) {
  require_file(a.in, "input file");
  auto records = cml::load_jsonl(a.in, /*require_switching_points=*/false);

  std::ofstream out(a.out, std::ios::binary);
  if (!out) throw std::runtime_error(a.out + ": cannot open for writing");
  const cml::CmiConfig cmi_cfg{a.wn, a.wp};
  for (cml::CorpusRecord& rec : records) {
    if (rec.switching_points.empty()) {
      rec.switching_points = cml::derive_switching_points(rec.labels);
    }
    cml::validate_record(rec);
    ordered_json j{{"hinglish", rec.cm_text},
                   {"english", rec.mix_text},
                   {"hindi_roman", rec.base_text},
                   {"labels", rec.labels},
                   {"switching_points", rec.switching_points},
                   {"cmi",
                    cml::compute_cmi(rec.labels, rec.switching_points,
                                     cmi_cfg)}};
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error(a.out + ": write failed");

  write_manifest(
      manifest_beside(a.out), "annotate",
      ordered_json{{"in", a.in}, {"out", a.out}, {"wn", a.wn}, {"wp", a.wp}},
      seed,
      {"switching points derived from word labels where absent",
       "cmi = (wn * (N - Nd) + wp * P) / N over words, attached per record"});
  std::cout << "annotated " << records.size() << " records -> " << a.out
            << "\n";
  return 0;
}

struct AugmentArgs {
  std::string in;
  std::string out;
  std::string endpoint;
  bool mock = false;
  double temperature = 0.7;
  int retries = 3;
  double delay = 2.0;
};

int run_augment(const AugmentArgs& a, uint64_t seed) {
  require_file(a.in, "input file");
  if (a.mock == !a.endpoint.empty()) {
    throw UsageError("pass exactly one of --endpoint or --mock");
  }
  if (a.retries < 1) throw UsageError("--retries must be positive");

  const auto records =
      cml::load_jsonl(a.in, /*require_switching_points=*/false);
  MockTransport mock;
  std::unique_ptr<HttpTransport> http;
  cml::TranslationTransport* transport = &mock;
  if (!a.mock) {
    http = std::make_unique<HttpTransport>(a.endpoint);
    transport = http.get();
  }

  cml::AugmentOptions opts;
  opts.retries = a.retries;
  opts.delay_seconds = a.delay;
  opts.temperature = a.temperature;
  cml::AugmentStats stats;
  const auto augmented =
      cml::augment(records, *transport, opts, &std::cerr, &stats);
  cml::save_jsonl(augmented, a.out);

  write_manifest(
      manifest_beside(a.out), "augment",
      ordered_json{{"in", a.in},
                   {"out", a.out},
                   {"transport", a.mock ? "mock" : a.endpoint},
                   {"temperature", a.temperature},
                   {"retries", a.retries},
                   {"delay_seconds", a.delay}},
      seed,
      {"records whose attempts all fail are dropped, the run continues",
       "mock transport echoes the input sentence as both translations"});
  std::cout << "augmented " << stats.succeeded << "/" << records.size()
            << " records (" << stats.requests << " requests, "
            << stats.skipped << " dropped) -> " << a.out << "\n";
  return 0;
}

struct PretrainArgs {
  std::string config;
  std::string data;
  std::string vocab;
  std::string out_dir;
  std::string objectives;
  std::string coupling;
  TrainOverrides over;
};

int run_pretrain(const PretrainArgs& a, uint64_t seed) {
  require_file(a.data, "data file");
  require_file(a.vocab, "vocabulary file");
  ConfigFile file =
      a.config.empty() ? ConfigFile() : (require_file(a.config, "config file"),
                                         ConfigFile(a.config));

  const cml::Vocabulary vocab = cml::Vocabulary::load(a.vocab);
  const auto dataset = cml::load_jsonl(a.data);
  const cml::ModelConfig mc =
      model_config_from(file, vocab.size(), a.coupling);
  cml::TrainConfig cfg =
      train_config_from(file, cml::TrainConfig{}, a.over, seed);
  if (!a.objectives.empty()) {
    cfg.weights = select_objectives(a.objectives, cfg.weights);
  }
  file.reject_unknown_keys();

  fs::create_directories(a.out_dir);
  cfg.checkpoint_path = (fs::path(a.out_dir) / "checkpoint.bin").string();
  cfg.log_path = (fs::path(a.out_dir) / "loss.csv").string();

  cml::CMLFormer model(mc, seed);
  const cml::PretrainResult res =
      cml::pretrain(model, vocab, dataset, cfg, &std::cerr);

  ordered_json config{{"model", model_config_json(mc)},
                      {"train", train_config_json(cfg)},
                      {"data", a.data},
                      {"vocab", a.vocab}};
  write_manifest((fs::path(a.out_dir) / "manifest.json").string(), "pretrain",
                 std::move(config), seed, kTrainingNotes);

  const cml::LossBreakdown& last = res.epoch_means.back();
  std::cout << "pre-trained " << res.steps << " steps; final total "
            << last.total << " -> " << cfg.checkpoint_path << "\n";
  return 0;
}

struct FinetuneArgs {
  std::string config;
  std::string encoder;
  std::string data;
  std::string vocab;
  std::string out_dir;
  TrainOverrides over;
};

int run_finetune(const FinetuneArgs& a, uint64_t seed) {
  require_file(a.encoder, "encoder checkpoint");
  require_file(a.data, "data file");
  require_file(a.vocab, "vocabulary file");
  ConfigFile file =
      a.config.empty() ? ConfigFile() : (require_file(a.config, "config file"),
                                         ConfigFile(a.config));

  const cml::Vocabulary vocab = cml::Vocabulary::load(a.vocab);
  const auto dataset = load_labeled_jsonl(a.data);
  cml::TrainConfig cfg = train_config_from(
      file, cml::TrainConfig::finetune_defaults(), a.over, seed);
  file.reject_unknown_keys();

  fs::create_directories(a.out_dir);
  cfg.checkpoint_path = (fs::path(a.out_dir) / "classifier.bin").string();
  cfg.log_path = (fs::path(a.out_dir) / "loss.csv").string();

  const cml::CMLFormer pretrained = cml::CMLFormer::load(a.encoder);
  cml::ClassifierModel model =
      cml::ClassifierModel::from_pretrained(pretrained, seed);
  const cml::FinetuneResult res =
      cml::finetune(model, vocab, dataset, cfg, &std::cerr);

  ordered_json config{{"model", model_config_json(model.config())},
                      {"train", train_config_json(cfg)},
                      {"encoder", a.encoder},
                      {"data", a.data},
                      {"vocab", a.vocab}};
  write_manifest((fs::path(a.out_dir) / "manifest.json").string(), "finetune",
                 std::move(config), seed, kTrainingNotes);

  std::cout << "fine-tuned " << res.steps << " steps; final loss "
            << res.epoch_losses.back() << " -> " << cfg.checkpoint_path
            << "\n";
  return 0;
}

struct EvaluateArgs {
  std::string model;
  std::string data;
  std::string vocab;
  std::string out;
};

int run_evaluate(const EvaluateArgs& a, uint64_t seed) {
  require_file(a.model, "classifier checkpoint");
  require_file(a.data, "data file");
  require_file(a.vocab, "vocabulary file");

  const cml::Vocabulary vocab = cml::Vocabulary::load(a.vocab);
  const auto dataset = load_labeled_jsonl(a.data);
  const cml::ClassifierModel model = cml::ClassifierModel::load(a.model);
  const cml::MetricReport report = cml::evaluate(model, vocab, dataset);
  const std::string json = cml::metrics_to_json(report);

  std::cout << json;
  if (!a.out.empty()) {
    std::ofstream out(a.out, std::ios::binary);
    if (!out) throw std::runtime_error(a.out + ": cannot open for writing");
    out << json;
    if (!out) throw std::runtime_error(a.out + ": write failed");
    write_manifest(
        manifest_beside(a.out), "evaluate",
        ordered_json{{"model", a.model}, {"data", a.data}, {"vocab", a.vocab},
                     {"out", a.out}},
        seed,
        {"prediction: class 1 iff logit[1] > logit[0], ties fall to class 0",
         "positive class for precision/recall/f1 is label 1"});
  }
  return 0;
}

struct AttentionArgs {
  std::string model;
  std::string vocab;
  std::string text;
  std::string labels;
  std::string out;
  int layer = 0;
  int head = 0;
};

int run_attention(const AttentionArgs& a, uint64_t seed) {
  require_file(a.model, "model checkpoint");
  require_file(a.vocab, "vocabulary file");
  if (a.text.empty()) throw UsageError("--text must not be empty");

  std::optional<std::vector<int>> labels;
  if (!a.labels.empty()) {
    labels.emplace();
    std::stringstream ss(a.labels);
    std::string piece;
    while (std::getline(ss, piece, ',')) {
      if (piece != "0" && piece != "1") {
        throw UsageError("--labels must be comma-separated 0/1 bits, got '" +
                         piece + "'");
      }
      labels->push_back(piece == "1" ? 1 : 0);
    }
    const size_t words = cml::split_whitespace(a.text).size();
    if (labels->size() != words) {
      throw UsageError("--labels has " + std::to_string(labels->size()) +
                       " bits but the text has " + std::to_string(words) +
                       " words");
    }
  }

  const cml::Vocabulary vocab = cml::Vocabulary::load(a.vocab);
  const cml::CMLFormer model = cml::CMLFormer::load(a.model);
  if (a.layer < 0 || a.layer >= model.config().num_layers ||
      a.head < 0 || a.head >= model.config().num_heads) {
    throw UsageError("--layer/--head out of range for this checkpoint");
  }

  const cml::AttentionProfile profile = cml::attention_profile(
      model, vocab, a.text, labels ? &*labels : nullptr, a.layer, a.head);
  cml::export_profile(profile, a.out);

  write_manifest(
      manifest_beside(a.out), "attention",
      ordered_json{{"model", a.model},
                   {"vocab", a.vocab},
                   {"text", a.text},
                   {"labels", a.labels},
                   {"layer", a.layer},
                   {"head", a.head},
                   {"out", a.out}},
      seed,
      {"scores are per-column means over non-PAD queries, min-max scaled",
       "CLS/SEP are dropped from the exported token list"});
  std::cout << "exported " << profile.tokens.size() << " token scores -> "
            << a.out << "\n";
  return 0;
}

struct AblateArgs {
  std::string config;
  std::string data;
  std::string vocab;
  std::string out_dir;
  TrainOverrides over;
};

int run_ablate(const AblateArgs& a, uint64_t seed) {
  require_file(a.data, "data file");
  require_file(a.vocab, "vocabulary file");
  ConfigFile file =
      a.config.empty() ? ConfigFile() : (require_file(a.config, "config file"),
                                         ConfigFile(a.config));

  const cml::Vocabulary vocab = cml::Vocabulary::load(a.vocab);
  const auto dataset = cml::load_jsonl(a.data);
  const cml::ModelConfig mc = model_config_from(file, vocab.size(), "");
  const cml::TrainConfig cfg =
      train_config_from(file, cml::TrainConfig{}, a.over, seed);
  file.reject_unknown_keys();

  const cml::AblationResult res =
      cml::ablate_coupling(mc, vocab, dataset, cfg, a.out_dir, &std::cerr);

  ordered_json config{{"model", model_config_json(mc)},
                      {"train", train_config_json(cfg)},
                      {"data", a.data},
                      {"vocab", a.vocab}};
  write_manifest((fs::path(a.out_dir) / "manifest.json").string(), "ablate",
                 std::move(config), seed, kTrainingNotes);

  for (const cml::AblationRun& run : res.runs) {
    std::cout << run.mode << ": " << run.parameters << " parameters, final "
              << run.final_epoch.total << "\n";
  }
  std::cout << "report -> " << res.report_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-decoder code-mixed language model toolkit"};
  app.require_subcommand(1);
  // Lets --seed appear after the subcommand name as well as before it.
  app.fallthrough();
  uint64_t seed = 0;
  app.add_option("--seed", seed,
                 "Seed for every random choice the command makes")
      ->capture_default_str();

  std::function<int()> action;

  TokenizerTrainArgs tok;
  auto* tok_cmd =
      app.add_subcommand("tokenizer-train", "Train the shared vocabulary");
  tok_cmd->add_option("--corpus", tok.corpus, "Corpus JSONL")->required();
  tok_cmd->add_option("--vocab-size", tok.vocab_size, "Vocabulary budget")
      ->capture_default_str();
  tok_cmd->add_option("--min-freq", tok.min_freq, "Minimum merge frequency")
      ->capture_default_str();
  tok_cmd->add_option("--out", tok.out, "Vocabulary output path")->required();
  tok_cmd->callback([&] { action = [&] { return run_tokenizer_train(tok, seed); }; });

  AnnotateArgs ann;
  auto* ann_cmd = app.add_subcommand(
      "annotate", "Validate records, derive switching points, attach CMI");
  ann_cmd->add_option("--in", ann.in, "Input JSONL")->required();
  ann_cmd->add_option("--out", ann.out, "Output JSONL")->required();
  ann_cmd->add_option("--wn", ann.wn, "CMI weight on non-base fraction")
      ->capture_default_str();
  ann_cmd->add_option("--wp", ann.wp, "CMI weight on switching points")
      ->capture_default_str();
  ann_cmd->callback([&] { action = [&] { return run_annotate(ann, seed); }; });

  AugmentArgs aug;
  auto* aug_cmd = app.add_subcommand(
      "augment", "Fill translations through a translation service");
  aug_cmd->add_option("--in", aug.in, "Input JSONL")->required();
  aug_cmd->add_option("--out", aug.out, "Output JSONL")->required();
  aug_cmd->add_option("--endpoint", aug.endpoint,
                      "Translation service URL (http://host:port/path)");
  aug_cmd->add_flag("--mock", aug.mock, "Use the offline echo transport");
  aug_cmd->add_option("--temperature", aug.temperature, "Sampling temperature")
      ->capture_default_str();
  aug_cmd->add_option("--retries", aug.retries, "Attempts per record")
      ->capture_default_str();
  aug_cmd->add_option("--delay", aug.delay, "Seconds between attempts")
      ->capture_default_str();
  aug_cmd->callback([&] { action = [&] { return run_augment(aug, seed); }; });

  PretrainArgs pre;
  auto* pre_cmd =
      app.add_subcommand("pretrain", "Joint multi-objective pre-training");
  pre_cmd->add_option("--config", pre.config, "key=value config file");
  pre_cmd->add_option("--data", pre.data, "Corpus JSONL")->required();
  pre_cmd->add_option("--vocab", pre.vocab, "Vocabulary file")->required();
  pre_cmd->add_option("--out-dir", pre.out_dir, "Artifact directory")
      ->required();
  pre_cmd->add_option("--objectives", pre.objectives,
                      "Comma-separated subset of mlm,spp,btsp,biltm,tlc,cmi");
  pre_cmd->add_option("--coupling", pre.coupling,
                      "Decoder coupling: none, sync, or async");
  pre_cmd->add_option("--epochs", pre.over.epochs, "Override epochs");
  pre_cmd->add_option("--batch-size", pre.over.batch_size,
                      "Override batch size");
  pre_cmd->add_option("--lr", pre.over.lr, "Override initial learning rate");
  pre_cmd->add_option("--decay", pre.over.decay, "Override decay factor");
  pre_cmd->callback([&] { action = [&] { return run_pretrain(pre, seed); }; });

  FinetuneArgs fin;
  auto* fin_cmd = app.add_subcommand(
      "finetune", "Train a 2-class head on a pre-trained encoder");
  fin_cmd->add_option("--config", fin.config, "key=value config file");
  fin_cmd->add_option("--encoder", fin.encoder, "Pre-trained checkpoint")
      ->required();
  fin_cmd->add_option("--data", fin.data, "Labeled JSONL ({text, label})")
      ->required();
  fin_cmd->add_option("--vocab", fin.vocab, "Vocabulary file")->required();
  fin_cmd->add_option("--out-dir", fin.out_dir, "Artifact directory")
      ->required();
  fin_cmd->add_option("--epochs", fin.over.epochs, "Override epochs");
  fin_cmd->add_option("--batch-size", fin.over.batch_size,
                      "Override batch size");
  fin_cmd->add_option("--lr", fin.over.lr, "Override initial learning rate");
  fin_cmd->add_option("--decay", fin.over.decay, "Override decay factor");
  fin_cmd->callback([&] { action = [&] { return run_finetune(fin, seed); }; });

  EvaluateArgs ev;
  auto* ev_cmd = app.add_subcommand(
      "evaluate", "Confusion-matrix metrics for a fine-tuned classifier");
  ev_cmd->add_option("--model", ev.model, "Classifier checkpoint")->required();
  ev_cmd->add_option("--data", ev.data, "Labeled JSONL ({text, label})")
      ->required();
  ev_cmd->add_option("--vocab", ev.vocab, "Vocabulary file")->required();
  ev_cmd->add_option("--out", ev.out, "Also write the metrics JSON here");
  ev_cmd->callback([&] { action = [&] { return run_evaluate(ev, seed); }; });

  AttentionArgs att;
  auto* att_cmd = app.add_subcommand(
      "attention", "Export a per-token attention profile as JSON");
  att_cmd->add_option("--model", att.model, "Pre-trained checkpoint")
      ->required();
  att_cmd->add_option("--vocab", att.vocab, "Vocabulary file")->required();
  att_cmd->add_option("--text", att.text, "Sentence to profile")->required();
  att_cmd->add_option("--labels", att.labels,
                      "Comma-separated word language bits for the overlay");
  att_cmd->add_option("--layer", att.layer, "Encoder layer")
      ->capture_default_str();
  att_cmd->add_option("--head", att.head, "Attention head")
      ->capture_default_str();
  att_cmd->add_option("--out", att.out, "Profile output path")->required();
  att_cmd->callback([&] { action = [&] { return run_attention(att, seed); }; });

  AblateArgs abl;
  auto* abl_cmd = app.add_subcommand(
      "ablate", "Train all three coupling modes and compare");
  abl_cmd->add_option("--config", abl.config, "key=value config file");
  abl_cmd->add_option("--data", abl.data, "Corpus JSONL")->required();
  abl_cmd->add_option("--vocab", abl.vocab, "Vocabulary file")->required();
  abl_cmd->add_option("--out-dir", abl.out_dir, "Artifact directory")
      ->required();
  abl_cmd->add_option("--epochs", abl.over.epochs, "Override epochs");
  abl_cmd->add_option("--batch-size", abl.over.batch_size,
                      "Override batch size");
  abl_cmd->add_option("--lr", abl.over.lr, "Override initial learning rate");
  abl_cmd->add_option("--decay", abl.over.decay, "Override decay factor");
  abl_cmd->callback([&] { action = [&] { return run_ablate(abl, seed); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    return action();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
