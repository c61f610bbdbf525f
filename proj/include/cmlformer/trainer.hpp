#pragma once

// Training loops: pre-training over the six-objective mix, classifier
// fine-tuning, evaluation, and the coupling-mode ablation driver.
//
// Optimization is plain SGD with global gradient-norm clipping and an
// exponentially decayed learning rate: lr(epoch) = initial_lr * decay^epoch.
// One record contributes all of its enabled objective views in a single
// step; partial trailing batches are dropped.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cmlformer/corpus.hpp"
#include "cmlformer/model.hpp"
#include "cmlformer/objectives.hpp"
#include "cmlformer/tokenizer.hpp"

namespace cml {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 1;
  double initial_lr = 1e-5;
  double decay_factor = 0.9;
  double clip_norm = 1.0;  // global gradient-norm ceiling
  uint64_t seed = 0;
  LossWeights weights;
  // Written after every epoch when non-empty; the file ends up holding the
  // final state of the run.
  std::string checkpoint_path;
  // Per-epoch mean losses as CSV when non-empty.
  std::string log_path;

  void validate() const;

  // The fine-tuning recipe runs longer by default; everything else matches.
  static TrainConfig finetune_defaults();
};

// Learning rate used for a 0-based epoch index.
double lr_at_epoch(const TrainConfig& cfg, int epoch);

struct PretrainResult {
  // One entry per epoch: mean of each objective's loss over the records
  // actually stepped on (post drop-last), plus the weighted total.
  std::vector<LossBreakdown> epoch_means;
  ObjectiveCounters counters;  // loss evaluations across the whole run
  int64_t steps = 0;           // optimizer steps taken
};

// Runs the pre-training loop in place on `model`. Record order is
// reshuffled every epoch from the config seed, so identical configs give
// identical runs. Aborts with EngineError naming the objective whose loss
// stopped being finite. `progress`, when given, receives one line per epoch.
PretrainResult pretrain(CMLFormer& model, const Vocabulary& vocab,
                        const std::vector<CorpusRecord>& dataset,
                        const TrainConfig& cfg,
                        std::ostream* progress = nullptr);

// A binary classification example for fine-tuning and evaluation.
struct LabeledExample {
  std::string text;
  int label = 0;  // 0 or 1
};

struct FinetuneResult {
  std::vector<double> epoch_losses;  // mean CE per epoch
  int64_t steps = 0;
};

// Jointly updates the encoder and the classification head of `model` with
// cross-entropy on the labeled examples. Build `model` with
// ClassifierModel::from_pretrained to start from pre-trained encoder
// weights; the decoders and auxiliary heads are left behind there.
FinetuneResult finetune(ClassifierModel& model, const Vocabulary& vocab,
                        const std::vector<LabeledExample>& dataset,
                        const TrainConfig& cfg,
                        std::ostream* progress = nullptr);

struct MetricReport {
  double precision = 0.0;
  double recall = 0.0;
  double accuracy = 0.0;
  double f1 = 0.0;
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  int64_t tn = 0;
};

// Metrics from raw confusion counts; label 1 is the positive class.
// Undefined ratios (empty denominators) come back as 0.
MetricReport metrics_from_counts(int64_t tp, int64_t fp, int64_t fn,
                                 int64_t tn);

// Argmax predictions over the dataset, reduced to a MetricReport.
MetricReport evaluate(const ClassifierModel& model, const Vocabulary& vocab,
                      const std::vector<LabeledExample>& dataset);

// Stable-keyed JSON rendering of a report.
std::string metrics_to_json(const MetricReport& report);

// Fraction of [MASK]-hidden positions whose highest-scoring vocabulary
// entry is the original token, measured over `rounds` fresh maskings of
// every record view drawn from `seed`. Positions whose selected token was
// left in place or swapped for a random one are not hidden, so they do not
// count here. Used to check that a model has actually absorbed its corpus.
double masked_prediction_accuracy(const CMLFormer& model,
                                  const Vocabulary& vocab,
                                  const std::vector<CorpusRecord>& dataset,
                                  uint64_t seed, int rounds = 1);

// One coupling mode's slice of an ablation run.
struct AblationRun {
  std::string mode;
  int64_t parameters = 0;
  LossBreakdown final_epoch;
  std::string csv_path;
};

struct AblationResult {
  std::vector<AblationRun> runs;  // none, synchronous, asynchronous
  std::string report_path;
};

// Trains one model per coupling mode from the same seed and config, writing
// loss_<mode>.csv per mode plus a merged ablation.json under out_dir.
AblationResult ablate_coupling(const ModelConfig& base_config,
                               const Vocabulary& vocab,
                               const std::vector<CorpusRecord>& dataset,
                               const TrainConfig& cfg,
                               const std::string& out_dir,
                               std::ostream* progress = nullptr);

}  // namespace cml
