#include "cmlformer/objectives.hpp"

#include <iostream>
#include <stdexcept>

namespace cml {

namespace {

constexpr double kMaskProb = 0.15;
constexpr double kMaskAsMask = 0.8;   // of selected: replace with [MASK]
constexpr double kMaskAsRandom = 0.1; // of selected: replace with random id

std::vector<int> special_positions(const Encoding& enc) {
  std::vector<int> special(enc.ids.size(), 0);
  for (size_t i = 0; i < enc.word_ids.size(); ++i) {
    if (enc.word_ids[i] == kNoWord) special[i] = 1;
  }
  return special;
}

std::vector<std::vector<int>> one_row(const std::vector<int>& ids) {
  return {ids};
}

std::vector<std::vector<int>> full_mask(size_t len) {
  return {std::vector<int>(len, 1)};
}

// Teacher-forced translation stream: input starts with [CLS], the target is
// the piece sequence closed by [SEP].
void build_translation_pair(const std::string& text, const Vocabulary& vocab,
                            int max_seq_len, std::vector<int>* dec_in,
                            std::vector<int>* targets) {
  Encoding pieces = encode(text, vocab, /*add_specials=*/false,
                           /*max_len=*/max_seq_len - 1);
  dec_in->clear();
  dec_in->push_back(kClsId);
  dec_in->insert(dec_in->end(), pieces.ids.begin(), pieces.ids.end());
  targets->assign(pieces.ids.begin(), pieces.ids.end());
  targets->push_back(kSepId);
}

Tensor average2(const Tensor& a, const Tensor& b) {
  return scale(add(a, b), 0.5);
}

// Tags numeric failures with the objective being evaluated so training
// aborts can say which loss blew up.
template <typename F>
Tensor guarded(const char* objective, F&& f) {
  try {
    return f();
  } catch (const EngineError& e) {
    throw EngineError(std::string(e.what()) + " (while computing the " +
                      objective + " loss)");
  }
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {alpha, beta, gamma, eta, zeta, delta}) {
    if (w < 0.0) {
      throw std::runtime_error("loss weights must be non-negative");
    }
  }
}

MaskedView apply_mlm_masking(const std::vector<int>& ids,
                             const std::vector<int>& special_mask,
                             int vocab_size, Rng& rng) {
  if (ids.size() != special_mask.size()) {
    throw std::runtime_error("apply_mlm_masking: ids/special_mask mismatch");
  }
  if (vocab_size <= kNumSpecials) {
    throw std::runtime_error("apply_mlm_masking: vocab has no maskable ids");
  }
  MaskedView view;
  view.ids = ids;
  view.labels.assign(ids.size(), kIgnoreLabel);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (special_mask[i] != 0) continue;
    if (rng.uniform() >= kMaskProb) continue;
    view.labels[i] = ids[i];
    const double action = rng.uniform();
    if (action < kMaskAsMask) {
      view.ids[i] = kMaskId;
    } else if (action < kMaskAsMask + kMaskAsRandom) {
      view.ids[i] = static_cast<int>(
          rng.uniform_int(kNumSpecials, vocab_size - 1));
    }  // else: keep the original token, label it anyway
  }
  return view;
}

PairSample btsp_sample(const std::vector<CorpusRecord>& dataset, size_t idx,
                       Rng& rng, std::ostream* warn) {
  if (idx >= dataset.size()) {
    throw std::runtime_error("btsp_sample: record index out of range");
  }
  int quadrant = static_cast<int>(rng.uniform_int(0, 3));
  if (quadrant >= 2 && dataset.size() < 2) {
    std::ostream& log = warn != nullptr ? *warn : std::cerr;
    log << "btsp_sample: dataset has a single record, sampling a positive "
           "pair instead of a negative\n";
    quadrant -= 2;
  }
  const CorpusRecord& rec = dataset[idx];
  PairSample out;
  switch (quadrant) {
    case 0:
      out = {rec.base_text, 1};
      break;
    case 1:
      out = {rec.mix_text, 1};
      break;
    default: {
      size_t other = static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(dataset.size()) - 2));
      if (other >= idx) ++other;
      out = {quadrant == 2 ? dataset[other].base_text
                           : dataset[other].mix_text,
             0};
      break;
    }
  }
  return out;
}

std::vector<int> btsp_build_input(const std::string& first,
                                  const std::string& second,
                                  const Vocabulary& vocab, int max_len) {
  if (max_len < 3) {
    throw std::runtime_error("btsp_build_input: max_len must be >= 3");
  }
  const size_t budget = static_cast<size_t>(max_len - 3);
  Encoding a = encode(first, vocab, /*add_specials=*/false, max_len);
  Encoding b = encode(second, vocab, /*add_specials=*/false, max_len);
  if (a.ids.size() > budget) a.ids.resize(budget);
  const size_t left = budget - a.ids.size();
  if (b.ids.size() > left) b.ids.resize(left);

  std::vector<int> ids;
  ids.reserve(a.ids.size() + b.ids.size() + 3);
  ids.push_back(kClsId);
  ids.insert(ids.end(), a.ids.begin(), a.ids.end());
  ids.push_back(kSepId);
  ids.insert(ids.end(), b.ids.begin(), b.ids.end());
  ids.push_back(kSepId);
  return ids;
}

TokenView tlc_build_input(const CorpusRecord& rec, const Vocabulary& vocab,
                          int max_len, Rng& rng) {
  struct Segment {
    const std::string* text;
    const std::vector<int>* labels;  // nullptr -> constant label
    int constant;
  };
  const std::vector<int>& lang = rec.labels;
  std::vector<Segment> segments = {
      {&rec.cm_text, &lang, 0},
      {&rec.base_text, nullptr, 0},
      {&rec.mix_text, nullptr, 1},
  };
  rng.shuffle(segments);

  TokenView view;
  for (size_t s = 0; s < segments.size(); ++s) {
    if (s > 0) {
      view.ids.push_back(kSepId);
      view.labels.push_back(kIgnoreLabel);
    }
    const Segment& seg = segments[s];
    Encoding enc = encode(*seg.text, vocab, /*add_specials=*/false, max_len);
    std::vector<int> word_labels;
    if (seg.labels != nullptr) {
      word_labels = *seg.labels;
    } else {
      const size_t words = split_whitespace(*seg.text).size();
      word_labels.assign(words, seg.constant);
    }
    const std::vector<int> aligned = align_word_labels(word_labels, enc);
    view.ids.insert(view.ids.end(), enc.ids.begin(), enc.ids.end());
    view.labels.insert(view.labels.end(), aligned.begin(), aligned.end());
  }
  if (view.ids.size() > static_cast<size_t>(max_len)) {
    view.ids.resize(static_cast<size_t>(max_len));
    view.labels.resize(static_cast<size_t>(max_len));
  }
  return view;
}

RecordViews build_record_views(const std::vector<CorpusRecord>& dataset,
                               size_t idx, const Vocabulary& vocab,
                               int max_seq_len, const LossWeights& weights,
                               Rng& rng, std::ostream* warn) {
  weights.validate();
  if (idx >= dataset.size()) {
    throw std::runtime_error("build_record_views: record index out of range");
  }
  const CorpusRecord& rec = dataset[idx];
  const int vocab_size = static_cast<int>(vocab.size());

  RecordViews v;
  v.has_mlm = weights.alpha > 0.0;
  v.has_spp = weights.beta > 0.0;
  v.has_btsp = weights.gamma > 0.0;
  v.has_biltm = weights.eta > 0.0;
  v.has_tlc = weights.zeta > 0.0;
  v.has_cmi = weights.delta > 0.0;

  if (v.has_spp || v.has_biltm || v.has_cmi) {
    v.clean_c = encode(rec.cm_text, vocab, /*add_specials=*/true, max_seq_len);
  }
  if (v.has_mlm) {
    const Encoding c = encode(rec.cm_text, vocab, true, max_seq_len);
    const Encoding b = encode(rec.base_text, vocab, true, max_seq_len);
    const Encoding m = encode(rec.mix_text, vocab, true, max_seq_len);
    v.mlm_c = apply_mlm_masking(c.ids, special_positions(c), vocab_size, rng);
    v.mlm_b = apply_mlm_masking(b.ids, special_positions(b), vocab_size, rng);
    v.mlm_m = apply_mlm_masking(m.ids, special_positions(m), vocab_size, rng);
  }
  if (v.has_spp) {
    const std::vector<int> points = derive_switching_points(rec.labels);
    v.spp_labels = align_word_labels(points, v.clean_c);
  }
  if (v.has_btsp) {
    const PairSample pair = btsp_sample(dataset, idx, rng, warn);
    v.btsp_ids = btsp_build_input(rec.cm_text, pair.second_text, vocab,
                                  max_seq_len);
    v.btsp_label = pair.label;
  }
  if (v.has_biltm) {
    build_translation_pair(rec.base_text, vocab, max_seq_len, &v.base_dec_in,
                           &v.base_targets);
    build_translation_pair(rec.mix_text, vocab, max_seq_len, &v.mix_dec_in,
                           &v.mix_targets);
  }
  if (v.has_tlc) {
    v.tlc = tlc_build_input(rec, vocab, max_seq_len, rng);
  }
  if (v.has_cmi) {
    v.cmi_target = compute_cmi(rec.labels,
                               derive_switching_points(rec.labels),
                               CmiConfig{});
  }
  return v;
}

LossTerms compute_losses(const CMLFormer& model, const RecordViews& v,
                         const LossWeights& weights,
                         ObjectiveCounters* counters) {
  weights.validate();
  LossTerms terms;
  const int vocab = model.config().src_vocab;

  // One clean pass over the code-mixed view serves spp, cmi, and the
  // translation objective.
  EncoderOutput clean;
  if (v.has_spp || v.has_biltm || v.has_cmi) {
    try {
      clean = model.encode(one_row(v.clean_c.ids), one_row(v.clean_c.mask));
    } catch (const EngineError& e) {
      throw EngineError(std::string(e.what()) +
                        " (while encoding the shared code-mixed view)");
    }
  }

  if (v.has_mlm) {
    terms.mlm = guarded("mlm", [&] {
      Tensor sum;
      for (const MaskedView* mv : {&v.mlm_c, &v.mlm_b, &v.mlm_m}) {
        EncoderOutput enc =
            model.encode(one_row(mv->ids), full_mask(mv->ids.size()));
        Tensor logits = reshape(model.mlm_logits(enc),
                                {static_cast<int64_t>(mv->ids.size()), vocab});
        Tensor loss = cross_entropy(logits, mv->labels, kIgnoreLabel);
        sum = sum.defined() ? add(sum, loss) : loss;
      }
      return scale(sum, 1.0 / 3.0);
    });
    if (counters) ++counters->mlm;
  }
  if (v.has_spp) {
    terms.spp = guarded("spp", [&] {
      return bce_with_logits(model.spp_logits(clean), v.spp_labels,
                             kIgnoreLabel);
    });
    if (counters) ++counters->spp;
  }
  if (v.has_btsp) {
    terms.btsp = guarded("btsp", [&] {
      EncoderOutput enc =
          model.encode(one_row(v.btsp_ids), full_mask(v.btsp_ids.size()));
      return bce_with_logits(model.btsp_logit(enc), {v.btsp_label},
                             kIgnoreLabel);
    });
    if (counters) ++counters->btsp;
  }
  if (v.has_biltm) {
    terms.biltm = guarded("biltm", [&] {
      DualDecoderOutput dd = model.decode_dual(clean, one_row(v.base_dec_in),
                                               one_row(v.mix_dec_in));
      Tensor lb = cross_entropy(
          reshape(dd.base_logits,
                  {static_cast<int64_t>(v.base_dec_in.size()),
                   model.config().base_vocab}),
          v.base_targets, kPadId);
      Tensor lm = cross_entropy(
          reshape(dd.mix_logits,
                  {static_cast<int64_t>(v.mix_dec_in.size()),
                   model.config().mix_vocab}),
          v.mix_targets, kPadId);
      return average2(lb, lm);
    });
    if (counters) ++counters->biltm;
  }
  if (v.has_tlc) {
    terms.tlc = guarded("tlc", [&] {
      EncoderOutput enc =
          model.encode(one_row(v.tlc.ids), full_mask(v.tlc.ids.size()));
      return bce_with_logits(model.tlc_logits(enc), v.tlc.labels,
                             kIgnoreLabel);
    });
    if (counters) ++counters->tlc;
  }
  if (v.has_cmi) {
    terms.cmi = guarded("cmi", [&] {
      return mse(model.cmi_pred(clean),
                 Tensor::from_values({1}, {v.cmi_target}));
    });
    if (counters) ++counters->cmi;
  }

  terms.total = weighted_total(terms, weights);
  return terms;
}

Tensor weighted_total(const LossTerms& terms, const LossWeights& weights) {
  weights.validate();
  Tensor total;
  auto accumulate = [&total](const Tensor& term, double w) {
    if (!term.defined() || w == 0.0) return;
    Tensor scaled = scale(term, w);
    total = total.defined() ? add(total, scaled) : scaled;
  };
  accumulate(terms.mlm, weights.alpha);
  accumulate(terms.spp, weights.beta);
  accumulate(terms.btsp, weights.gamma);
  accumulate(terms.biltm, weights.eta);
  accumulate(terms.tlc, weights.zeta);
  accumulate(terms.cmi, weights.delta);
  return total.defined() ? total : Tensor::scalar(0.0);
}

LossTerms record_losses(const CMLFormer& model, const Vocabulary& vocab,
                        const std::vector<CorpusRecord>& dataset, size_t idx,
                        const LossWeights& weights, Rng& rng,
                        ObjectiveCounters* counters, std::ostream* warn) {
  const RecordViews views = build_record_views(
      dataset, idx, vocab, model.config().max_seq_len, weights, rng, warn);
  return compute_losses(model, views, weights, counters);
}

LossBreakdown to_breakdown(const LossTerms& terms) {
  LossBreakdown b;
  if (terms.mlm.defined()) b.mlm = terms.mlm.item();
  if (terms.spp.defined()) b.spp = terms.spp.item();
  if (terms.btsp.defined()) b.btsp = terms.btsp.item();
  if (terms.biltm.defined()) b.biltm = terms.biltm.item();
  if (terms.tlc.defined()) b.tlc = terms.tlc.item();
  if (terms.cmi.defined()) b.cmi = terms.cmi.item();
  b.total = terms.total.item();
  return b;
}

}  // namespace cml
