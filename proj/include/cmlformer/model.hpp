#pragma once
// Shared encoder + dual decoders with configurable coupling, auxiliary
// prediction heads, parameter registry, and checkpoint I/O.
//
// Layer layout is the classic post-LN Transformer: every sub-layer is
// x = LayerNorm(x + Sublayer(x)). Positional information comes from a
// learned absolute embedding table. Each decoder is fully self-contained
// (own embeddings, layers, and output projection); the two decoders
// interact only through the coupling sub-layer.

#include <cstdint>
#include <string>
#include <vector>

#include "cmlformer/tensor.hpp"

namespace cml {

// How the two decoders exchange information per layer:
//   kNone          - no third sub-layer; two independent vanilla decoders.
//   kSynchronous   - keys/values are the other decoder's post
//                    encoder-attention state of the SAME layer, linearly
//                    projected; layers run in lockstep.
//   kAsynchronous  - keys/values are the other decoder's FINAL hidden state
//                    of the PREVIOUS layer (its embedding output for layer
//                    0), run through the same projection.
enum class CouplingMode { kNone, kSynchronous, kAsynchronous };

CouplingMode coupling_from_string(const std::string& s);
std::string coupling_to_string(CouplingMode mode);

struct ModelConfig {
  int num_layers = 2;
  int hidden_dim = 16;
  int num_heads = 2;
  int ffn_dim = 32;
  double dropout_rate = 0.0;
  int max_seq_len = 128;
  CouplingMode coupling = CouplingMode::kSynchronous;
  int src_vocab = 0;
  int base_vocab = 0;
  int mix_vocab = 0;

  void validate() const;  // throws on inconsistent settings
};

// Closed-form number of encoder parameters (token + position embeddings and
// num_layers blocks of attention, FFN, and two layer norms).
int64_t parameter_count(const ModelConfig& config);

// Ordered name -> tensor store. Insertion order is the initialization and
// serialization order, so construction is deterministic for a given seed.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  int64_t total_parameters() const;
  void zero_grad();
  double grad_l2_norm() const;  // global norm across every parameter

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct EncoderOutput {
  Tensor hidden;                  // [B, T, d]
  std::vector<Tensor> attentions;  // per layer, [B, heads, T, T]
  std::vector<std::vector<int>> src_mask;  // input mask, kept for decoders
};

struct DualDecoderOutput {
  Tensor base_logits;  // [B, base_len, base_vocab]
  Tensor mix_logits;   // [B, mix_len, mix_vocab]
};

struct HeadOutputs {
  Tensor mlm_logits;  // [B, T, src_vocab]
  Tensor spp_logits;  // [B, T]
  Tensor tlc_logits;  // [B, T]
  Tensor btsp_logit;  // [B]
  Tensor cmi_pred;    // [B]
};

class CMLFormer {
 public:
  CMLFormer(const ModelConfig& config, uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }
  int64_t total_parameters() const { return params_.total_parameters(); }

  // dropout_rng is required when config.dropout_rate > 0.
  EncoderOutput encode(const std::vector<std::vector<int>>& token_ids,
                       const std::vector<std::vector<int>>& attn_mask,
                       Rng* dropout_rng = nullptr) const;

  // Teacher-forced pass through both decoders. Decoder self-attention is
  // causal; attention over the encoder respects the encoder's input mask;
  // the coupling sub-layer is causal across streams (position i of one
  // decoder sees positions <= i of the other), so generation order is
  // respected in every mode.
  DualDecoderOutput decode_dual(const EncoderOutput& enc,
                                const std::vector<std::vector<int>>& base_in,
                                const std::vector<std::vector<int>>& mix_in,
                                Rng* dropout_rng = nullptr) const;

  // Auxiliary heads over encoder states. Individual heads are exposed so a
  // disabled objective never touches its parameters.
  Tensor mlm_logits(const EncoderOutput& enc) const;
  Tensor spp_logits(const EncoderOutput& enc) const;
  Tensor tlc_logits(const EncoderOutput& enc) const;
  Tensor btsp_logit(const EncoderOutput& enc) const;
  Tensor cmi_pred(const EncoderOutput& enc) const;
  HeadOutputs heads_forward(const EncoderOutput& enc) const;

  void save(const std::string& path) const;  // kind "pretrain"
  static CMLFormer load(const std::string& path);

 private:
  ModelConfig config_;
  ParamRegistry params_;
};

// Encoder-only classifier used for fine-tuning: the pre-trained encoder
// parameters plus one fresh 2-class head over the CLS state.
class ClassifierModel {
 public:
  // Fresh, randomly initialized encoder (mainly for tests).
  ClassifierModel(const ModelConfig& config, uint64_t seed);
  // Copies encoder.* values from a pre-trained model; the head is freshly
  // initialized from head_seed.
  static ClassifierModel from_pretrained(const CMLFormer& pretrained,
                                         uint64_t head_seed);

  const ModelConfig& config() const { return config_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

  EncoderOutput encode(const std::vector<std::vector<int>>& token_ids,
                       const std::vector<std::vector<int>>& attn_mask,
                       Rng* dropout_rng = nullptr) const;
  Tensor classify(const EncoderOutput& enc) const;  // [B, 2] logits

  void save(const std::string& path) const;  // kind "classifier"
  static ClassifierModel load(const std::string& path);

 private:
  ModelConfig config_;
  ParamRegistry params_;
};

// ---- checkpoint container ----
// Binary layout: magic "CMLF" | u32 version | u64 header bytes | header JSON
// {kind, config, params: [{name, shape}]} | raw little-endian float64 values
// in header order. Round-trips bit-exactly.

struct LoadedCheckpoint {
  std::string kind;
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> params;
};

void save_checkpoint(const std::string& path, const std::string& kind,
                     const ModelConfig& config, const ParamRegistry& params);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace cml
