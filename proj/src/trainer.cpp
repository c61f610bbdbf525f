#include "cmlformer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "json.hpp"

namespace cml {
namespace {

std::vector<std::vector<int>> one_row(const std::vector<int>& ids) {
  return {ids};
}

std::vector<std::vector<int>> full_mask(size_t len) {
  return {std::vector<int>(len, 1)};
}

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::string breakdown_row(int epoch, const LossBreakdown& b) {
  std::string row = std::to_string(epoch);
  for (double v : {b.mlm, b.spp, b.btsp, b.biltm, b.tlc, b.cmi, b.total}) {
    row += ',';
    row += format_value(v);
  }
  row += '\n';
  return row;
}

std::ofstream open_log(const std::string& path, const char* header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open loss log: " + path);
  out << header << '\n';
  return out;
}

// Dies if any component that was actually computed stopped being finite.
// The engine usually catches this earlier (inside the op that produced the
// bad value), so this is the last line of defense.
void check_finite(const LossBreakdown& b, const LossWeights& w, int epoch) {
  const std::pair<const char*, double> parts[] = {
      {"mlm", w.alpha == 0.0 ? 0.0 : b.mlm},
      {"spp", w.beta == 0.0 ? 0.0 : b.spp},
      {"btsp", w.gamma == 0.0 ? 0.0 : b.btsp},
      {"biltm", w.eta == 0.0 ? 0.0 : b.biltm},
      {"tlc", w.zeta == 0.0 ? 0.0 : b.tlc},
      {"cmi", w.delta == 0.0 ? 0.0 : b.cmi},
  };
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) {
      throw EngineError("training aborted at epoch " + std::to_string(epoch) +
                        ": the " + name + " loss is non-finite");
    }
  }
}

void accumulate(LossBreakdown& sum, const LossBreakdown& b) {
  sum.mlm += b.mlm;
  sum.spp += b.spp;
  sum.btsp += b.btsp;
  sum.biltm += b.biltm;
  sum.tlc += b.tlc;
  sum.cmi += b.cmi;
  sum.total += b.total;
}

void divide(LossBreakdown& b, double n) {
  b.mlm /= n;
  b.spp /= n;
  b.btsp /= n;
  b.biltm /= n;
  b.tlc /= n;
  b.cmi /= n;
  b.total /= n;
}

// One SGD update over every parameter with a gradient, after scaling the
// gradients down so their global norm does not exceed clip_norm.
void clipped_sgd_step(ParamRegistry& params, double lr, double clip_norm) {
  const double norm = params.grad_l2_norm();
  if (!std::isfinite(norm)) {
    throw EngineError("training aborted: gradient norm is non-finite");
  }
  const double factor = norm > clip_norm ? clip_norm / norm : 1.0;
  for (const auto& [name, t] : params.items()) {
    if (!t.has_grad()) continue;
    auto& vals = params.get(name).values();
    const auto& g = t.grad();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] -= lr * factor * g[i];
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (batch_size < 1) {
    throw std::invalid_argument("batch_size must be at least 1");
  }
  if (!(initial_lr > 0.0) || !std::isfinite(initial_lr)) {
    throw std::invalid_argument("initial_lr must be positive and finite");
  }
  if (!(decay_factor > 0.0) || !std::isfinite(decay_factor)) {
    throw std::invalid_argument("decay_factor must be positive and finite");
  }
  if (!(clip_norm > 0.0)) {
    throw std::invalid_argument("clip_norm must be positive");
  }
  weights.validate();
}

TrainConfig TrainConfig::finetune_defaults() {
  TrainConfig cfg;
  cfg.epochs = 30;
  return cfg;
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  return cfg.initial_lr * std::pow(cfg.decay_factor, epoch);
}

PretrainResult pretrain(CMLFormer& model, const Vocabulary& vocab,
                        const std::vector<CorpusRecord>& dataset,
                        const TrainConfig& cfg, std::ostream* progress) {
  cfg.validate();
  if (dataset.empty()) {
    throw std::invalid_argument("pretrain: dataset is empty");
  }
  const size_t batch = static_cast<size_t>(cfg.batch_size);
  const size_t usable = (dataset.size() / batch) * batch;
  if (usable == 0) {
    throw std::invalid_argument(
        "pretrain: batch_size exceeds the dataset, every batch would be "
        "dropped");
  }

  std::ofstream csv;
  if (!cfg.log_path.empty()) {
    csv = open_log(cfg.log_path, "epoch,mlm,spp,btsp,biltm,tlc,cmi,total");
  }

  Rng rng(cfg.seed);
  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), size_t{0});

  PretrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    const double lr = lr_at_epoch(cfg, epoch);
    LossBreakdown epoch_sum;

    for (size_t start = 0; start + batch <= usable; start += batch) {
      model.params().zero_grad();
      Tape tape;
      Tensor batch_total;
      for (size_t b = 0; b < batch; ++b) {
        LossTerms terms =
            record_losses(model, vocab, dataset, order[start + b], cfg.weights,
                          rng, &result.counters, progress);
        const LossBreakdown breakdown = to_breakdown(terms);
        check_finite(breakdown, cfg.weights, epoch);
        accumulate(epoch_sum, breakdown);
        batch_total = batch_total.defined() ? add(batch_total, terms.total)
                                            : terms.total;
      }
      tape.backward(scale(batch_total, 1.0 / static_cast<double>(batch)));
      clipped_sgd_step(model.params(), lr, cfg.clip_norm);
      ++result.steps;
    }

    divide(epoch_sum, static_cast<double>(usable));
    result.epoch_means.push_back(epoch_sum);
    if (csv.is_open()) csv << breakdown_row(epoch, epoch_sum);
    if (!cfg.checkpoint_path.empty()) model.save(cfg.checkpoint_path);
    if (progress) {
      *progress << "epoch " << epoch + 1 << "/" << cfg.epochs << " lr "
                << format_value(lr) << " total "
                << format_value(epoch_sum.total) << "\n";
    }
  }
  return result;
}

FinetuneResult finetune(ClassifierModel& model, const Vocabulary& vocab,
                        const std::vector<LabeledExample>& dataset,
                        const TrainConfig& cfg, std::ostream* progress) {
  cfg.validate();
  if (dataset.empty()) {
    throw std::invalid_argument("finetune: dataset is empty");
  }
  for (const LabeledExample& ex : dataset) {
    if (ex.label != 0 && ex.label != 1) {
      throw std::invalid_argument("finetune: labels must be 0 or 1");
    }
  }
  const size_t batch = static_cast<size_t>(cfg.batch_size);
  const size_t usable = (dataset.size() / batch) * batch;
  if (usable == 0) {
    throw std::invalid_argument(
        "finetune: batch_size exceeds the dataset, every batch would be "
        "dropped");
  }

  std::ofstream csv;
  if (!cfg.log_path.empty()) csv = open_log(cfg.log_path, "epoch,loss");

  const int max_len = model.config().max_seq_len;
  Rng rng(cfg.seed);
  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), size_t{0});

  FinetuneResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    const double lr = lr_at_epoch(cfg, epoch);
    double epoch_sum = 0.0;

    for (size_t start = 0; start + batch <= usable; start += batch) {
      model.params().zero_grad();
      Tape tape;
      Tensor batch_total;
      for (size_t b = 0; b < batch; ++b) {
        const LabeledExample& ex = dataset[order[start + b]];
        Encoding enc = encode(ex.text, vocab, true, max_len);
        EncoderOutput out = model.encode(one_row(enc.ids), one_row(enc.mask));
        Tensor loss =
            cross_entropy(model.classify(out), {ex.label}, kIgnoreLabel);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          throw EngineError("training aborted at epoch " +
                            std::to_string(epoch) +
                            ": the classification loss is non-finite");
        }
        epoch_sum += value;
        batch_total =
            batch_total.defined() ? add(batch_total, loss) : loss;
      }
      tape.backward(scale(batch_total, 1.0 / static_cast<double>(batch)));
      clipped_sgd_step(model.params(), lr, cfg.clip_norm);
      ++result.steps;
    }

    epoch_sum /= static_cast<double>(usable);
    result.epoch_losses.push_back(epoch_sum);
    if (csv.is_open()) {
      csv << epoch << ',' << format_value(epoch_sum) << '\n';
    }
    if (!cfg.checkpoint_path.empty()) model.save(cfg.checkpoint_path);
    if (progress) {
      *progress << "epoch " << epoch + 1 << "/" << cfg.epochs << " lr "
                << format_value(lr) << " loss " << format_value(epoch_sum)
                << "\n";
    }
  }
  return result;
}

MetricReport metrics_from_counts(int64_t tp, int64_t fp, int64_t fn,
                                 int64_t tn) {
  if (tp < 0 || fp < 0 || fn < 0 || tn < 0) {
    throw std::invalid_argument("confusion counts must be non-negative");
  }
  MetricReport r;
  r.tp = tp;
  r.fp = fp;
  r.fn = fn;
  r.tn = tn;
  const double total = static_cast<double>(tp + fp + fn + tn);
  r.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  r.accuracy = total > 0 ? static_cast<double>(tp + tn) / total : 0.0;
  r.f1 = r.precision + r.recall > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

MetricReport evaluate(const ClassifierModel& model, const Vocabulary& vocab,
                      const std::vector<LabeledExample>& dataset) {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  const int max_len = model.config().max_seq_len;
  for (const LabeledExample& ex : dataset) {
    if (ex.label != 0 && ex.label != 1) {
      throw std::invalid_argument("evaluate: labels must be 0 or 1");
    }
    Encoding enc = encode(ex.text, vocab, true, max_len);
    EncoderOutput out = model.encode(one_row(enc.ids), one_row(enc.mask));
    const auto& logits = model.classify(out).values();  // [1, 2]
    const int pred = logits[1] > logits[0] ? 1 : 0;
    if (pred == 1) {
      (ex.label == 1 ? tp : fp) += 1;
    } else {
      (ex.label == 1 ? fn : tn) += 1;
    }
  }
  return metrics_from_counts(tp, fp, fn, tn);
}

std::string metrics_to_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  j["precision"] = report.precision;
  j["recall"] = report.recall;
  j["accuracy"] = report.accuracy;
  j["f1"] = report.f1;
  j["tp"] = report.tp;
  j["fp"] = report.fp;
  j["fn"] = report.fn;
  j["tn"] = report.tn;
  return j.dump(2) + "\n";
}

double masked_prediction_accuracy(const CMLFormer& model,
                                  const Vocabulary& vocab,
                                  const std::vector<CorpusRecord>& dataset,
                                  uint64_t seed, int rounds) {
  if (rounds < 1) {
    throw std::invalid_argument("rounds must be at least 1");
  }
  LossWeights w;
  w.beta = w.gamma = w.eta = w.zeta = w.delta = 0.0;  // masking views only
  const int vocab_size = model.config().src_vocab;
  Rng rng(seed);
  int64_t correct = 0, hidden = 0;
  for (int round = 0; round < rounds; ++round) {
    for (size_t idx = 0; idx < dataset.size(); ++idx) {
      const RecordViews views = build_record_views(
          dataset, idx, vocab, model.config().max_seq_len, w, rng);
      for (const MaskedView* mv :
           {&views.mlm_c, &views.mlm_b, &views.mlm_m}) {
        EncoderOutput enc =
            model.encode(one_row(mv->ids), full_mask(mv->ids.size()));
        const auto& logits = model.mlm_logits(enc).values();  // [1, T, V]
        for (size_t t = 0; t < mv->labels.size(); ++t) {
          if (mv->labels[t] == kIgnoreLabel) continue;
          if (mv->ids[t] != kMaskId) continue;  // swapped or kept, not hidden
          const double* row = logits.data() + t * vocab_size;
          int best = 0;
          for (int v = 1; v < vocab_size; ++v) {
            if (row[v] > row[best]) best = v;
          }
          ++hidden;
          if (best == mv->labels[t]) ++correct;
        }
      }
    }
  }
  return hidden > 0 ? static_cast<double>(correct) / hidden : 0.0;
}

AblationResult ablate_coupling(const ModelConfig& base_config,
                               const Vocabulary& vocab,
                               const std::vector<CorpusRecord>& dataset,
                               const TrainConfig& cfg,
                               const std::string& out_dir,
                               std::ostream* progress) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);

  AblationResult result;
  nlohmann::ordered_json report;
  report["runs"] = nlohmann::ordered_json::array();

  for (CouplingMode mode : {CouplingMode::kNone, CouplingMode::kSynchronous,
                            CouplingMode::kAsynchronous}) {
    const std::string name = coupling_to_string(mode);
    if (progress) *progress << "coupling " << name << "\n";

    ModelConfig mc = base_config;
    mc.coupling = mode;
    CMLFormer model(mc, cfg.seed);

    TrainConfig run = cfg;
    run.log_path =
        (std::filesystem::path(out_dir) / ("loss_" + name + ".csv")).string();
    run.checkpoint_path.clear();  // the ablation keeps curves, not weights

    PretrainResult pr = pretrain(model, vocab, dataset, run, progress);

    AblationRun arun;
    arun.mode = name;
    arun.parameters = model.total_parameters();
    arun.final_epoch = pr.epoch_means.back();
    arun.csv_path = run.log_path;
    result.runs.push_back(arun);

    nlohmann::ordered_json entry;
    entry["mode"] = name;
    entry["parameters"] = arun.parameters;
    nlohmann::ordered_json final_losses;
    final_losses["mlm"] = arun.final_epoch.mlm;
    final_losses["spp"] = arun.final_epoch.spp;
    final_losses["btsp"] = arun.final_epoch.btsp;
    final_losses["biltm"] = arun.final_epoch.biltm;
    final_losses["tlc"] = arun.final_epoch.tlc;
    final_losses["cmi"] = arun.final_epoch.cmi;
    final_losses["total"] = arun.final_epoch.total;
    entry["final_epoch"] = final_losses;
    entry["csv"] = "loss_" + name + ".csv";
    report["runs"].push_back(entry);
  }

  result.report_path =
      (std::filesystem::path(out_dir) / "ablation.json").string();
  std::ofstream out(result.report_path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write ablation report: " +
                             result.report_path);
  }
  out << report.dump(2) << "\n";
  return result;
}

}  // namespace cml
