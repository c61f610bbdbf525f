#pragma once
// Training views and the six pre-training losses.
//
// Each record contributes up to six objectives: masked-token recovery over
// the three language views (mlm), switching-point prediction (spp), parallel
// -pair classification (btsp), dual teacher-forced translation (biltm),
// per-token language classification over shuffled segments (tlc), and
// mixing-index regression (cmi). A weight of zero disables an objective
// completely: its views are not built and no forward pass runs for it.
//
// Stochastic view construction (masking, pair sampling, segment order) is
// separated from loss evaluation so that a frozen RecordViews gives a
// deterministic loss function of the parameters.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cmlformer/corpus.hpp"
#include "cmlformer/model.hpp"
#include "cmlformer/tokenizer.hpp"

namespace cml {

struct LossWeights {
  double alpha = 1.0;   // mlm
  double beta = 1.0;    // spp
  double gamma = 10.0;  // btsp
  double eta = 1.0;     // biltm
  double zeta = 10.0;   // tlc
  double delta = 1.0;   // cmi

  void validate() const;  // all weights must be >= 0
};

// Scalar snapshot of one loss evaluation (unweighted components, weighted
// total) for logging.
struct LossBreakdown {
  double mlm = 0.0;
  double spp = 0.0;
  double btsp = 0.0;
  double biltm = 0.0;
  double tlc = 0.0;
  double cmi = 0.0;
  double total = 0.0;
};

// How many times each objective's loss was evaluated; a disabled objective
// must stay at zero.
struct ObjectiveCounters {
  int64_t mlm = 0;
  int64_t spp = 0;
  int64_t btsp = 0;
  int64_t biltm = 0;
  int64_t tlc = 0;
  int64_t cmi = 0;
};

// ---- view construction ----

struct MaskedView {
  std::vector<int> ids;     // input with masking applied
  std::vector<int> labels;  // original id where selected, else kIgnoreLabel
};

// Select each non-special token with p = 0.15; a selected token becomes
// [MASK] with p = 0.8, a random non-special vocab id with p = 0.1, and stays
// itself with p = 0.1. Unselected positions get kIgnoreLabel.
MaskedView apply_mlm_masking(const std::vector<int>& ids,
                             const std::vector<int>& special_mask,
                             int vocab_size, Rng& rng);

struct PairSample {
  std::string second_text;
  int label = 0;  // 1 iff second_text came from the same record
};

// Draw the second sequence for pair classification: the record's own base
// or mix text (positive) or another record's (negative), each with
// probability 1/4. A singleton dataset cannot produce negatives; those draws
// fall back to positives with a warning.
PairSample btsp_sample(const std::vector<CorpusRecord>& dataset, size_t idx,
                       Rng& rng, std::ostream* warn = nullptr);

struct TokenView {
  std::vector<int> ids;
  std::vector<int> labels;  // kIgnoreLabel on specials/continuations
};

// [CLS] first [SEP] second [SEP], truncated to max_len.
std::vector<int> btsp_build_input(const std::string& first,
                                  const std::string& second,
                                  const Vocabulary& vocab, int max_len);

// The three language views concatenated in a shuffled order with [SEP]
// between segments. Per-word labels: code-mixed segment -> its language
// labels, base segment -> all 0, mix segment -> all 1; first sub-token of
// each word carries the label.
TokenView tlc_build_input(const CorpusRecord& rec, const Vocabulary& vocab,
                          int max_len, Rng& rng);

// Every deterministic input needed to evaluate the enabled losses for one
// record.
struct RecordViews {
  bool has_mlm = false, has_spp = false, has_btsp = false;
  bool has_biltm = false, has_tlc = false, has_cmi = false;

  MaskedView mlm_c, mlm_b, mlm_m;

  Encoding clean_c;             // code-mixed text with specials; shared by
                                // spp, cmi, and the translation objective
  std::vector<int> spp_labels;  // aligned switching points

  std::vector<int> btsp_ids;
  int btsp_label = 0;

  std::vector<int> base_dec_in, base_targets;  // [CLS]+pieces / pieces+[SEP]
  std::vector<int> mix_dec_in, mix_targets;

  TokenView tlc;

  double cmi_target = 0.0;
};

RecordViews build_record_views(const std::vector<CorpusRecord>& dataset,
                               size_t idx, const Vocabulary& vocab,
                               int max_seq_len, const LossWeights& weights,
                               Rng& rng, std::ostream* warn = nullptr);

// ---- loss evaluation ----

// Differentiable loss terms; a disabled objective's tensor is left
// undefined. total is always defined (exact scalar 0 when all are off).
struct LossTerms {
  Tensor mlm, spp, btsp, biltm, tlc, cmi;
  Tensor total;
};

// Weighted sum over the defined terms; exact scalar 0 when everything is
// disabled or undefined. compute_losses uses this to fill LossTerms::total.
Tensor weighted_total(const LossTerms& terms, const LossWeights& weights);

LossTerms compute_losses(const CMLFormer& model, const RecordViews& views,
                         const LossWeights& weights,
                         ObjectiveCounters* counters = nullptr);

// build_record_views + compute_losses in one call.
LossTerms record_losses(const CMLFormer& model, const Vocabulary& vocab,
                        const std::vector<CorpusRecord>& dataset, size_t idx,
                        const LossWeights& weights, Rng& rng,
                        ObjectiveCounters* counters = nullptr,
                        std::ostream* warn = nullptr);

LossBreakdown to_breakdown(const LossTerms& terms);

}  // namespace cml
