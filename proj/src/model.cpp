#include "cmlformer/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace cml {

namespace {

constexpr double kMaskNegative = -1e9;  // underflows to exact 0 after exp
constexpr double kInitStd = 0.02;
constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'C', 'M', 'L', 'F'};

// ---- parameter bundles (handles into the registry) ----

struct LinearP {
  Tensor w, b;
};
struct NormP {
  Tensor g, b;
};
struct AttnP {
  LinearP q, k, v, o;
};
struct EncLayerP {
  AttnP attn;
  NormP ln_attn;
  LinearP ffn1, ffn2;
  NormP ln_ffn;
};
struct DecLayerP {
  AttnP self_attn;
  NormP ln_self;
  AttnP enc_attn;
  NormP ln_enc;
  bool coupled = false;
  LinearP cross_proj;
  AttnP cross_attn;
  NormP ln_cross;
  LinearP ffn1, ffn2;
  NormP ln_ffn;
};
struct EncoderP {
  Tensor tok_emb, pos_emb;
  std::vector<EncLayerP> layers;
};
struct DecoderP {
  Tensor tok_emb, pos_emb;
  std::vector<DecLayerP> layers;
  LinearP out_proj;
};

// ---- registration (fixed order => deterministic init for a seed) ----

LinearP add_linear(ParamRegistry& reg, const std::string& scope, int64_t in,
                   int64_t out, Rng& rng) {
  LinearP p;
  p.w = reg.add(scope + ".w", Tensor::randn({in, out}, rng, kInitStd));
  p.b = reg.add(scope + ".b", Tensor::zeros({out}));
  return p;
}

NormP add_norm(ParamRegistry& reg, const std::string& scope, int64_t d) {
  NormP p;
  p.g = reg.add(scope + ".g", Tensor::full({d}, 1.0));
  p.b = reg.add(scope + ".b", Tensor::zeros({d}));
  return p;
}

AttnP add_attention(ParamRegistry& reg, const std::string& scope, int64_t d,
                    Rng& rng) {
  AttnP p;
  p.q.w = reg.add(scope + ".wq", Tensor::randn({d, d}, rng, kInitStd));
  p.q.b = reg.add(scope + ".bq", Tensor::zeros({d}));
  p.k.w = reg.add(scope + ".wk", Tensor::randn({d, d}, rng, kInitStd));
  p.k.b = reg.add(scope + ".bk", Tensor::zeros({d}));
  p.v.w = reg.add(scope + ".wv", Tensor::randn({d, d}, rng, kInitStd));
  p.v.b = reg.add(scope + ".bv", Tensor::zeros({d}));
  p.o.w = reg.add(scope + ".wo", Tensor::randn({d, d}, rng, kInitStd));
  p.o.b = reg.add(scope + ".bo", Tensor::zeros({d}));
  return p;
}

void add_encoder_params(ParamRegistry& reg, const ModelConfig& c, Rng& rng) {
  const int64_t d = c.hidden_dim;
  reg.add("encoder.tok_emb",
          Tensor::randn({c.src_vocab, d}, rng, kInitStd));
  reg.add("encoder.pos_emb",
          Tensor::randn({c.max_seq_len, d}, rng, kInitStd));
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string s = "encoder.layer" + std::to_string(l);
    add_attention(reg, s + ".attn", d, rng);
    add_norm(reg, s + ".ln_attn", d);
    add_linear(reg, s + ".ffn.1", d, c.ffn_dim, rng);
    add_linear(reg, s + ".ffn.2", c.ffn_dim, d, rng);
    add_norm(reg, s + ".ln_ffn", d);
  }
}

void add_decoder_params(ParamRegistry& reg, const ModelConfig& c,
                        const std::string& name, int64_t vocab, Rng& rng) {
  const int64_t d = c.hidden_dim;
  reg.add(name + ".tok_emb", Tensor::randn({vocab, d}, rng, kInitStd));
  reg.add(name + ".pos_emb", Tensor::randn({c.max_seq_len, d}, rng, kInitStd));
  const bool coupled = c.coupling != CouplingMode::kNone;
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string s = name + ".layer" + std::to_string(l);
    add_attention(reg, s + ".self_attn", d, rng);
    add_norm(reg, s + ".ln_self", d);
    add_attention(reg, s + ".enc_attn", d, rng);
    add_norm(reg, s + ".ln_enc", d);
    if (coupled) {
      add_linear(reg, s + ".cross_proj", d, d, rng);
      add_attention(reg, s + ".cross_attn", d, rng);
      add_norm(reg, s + ".ln_cross", d);
    }
    add_linear(reg, s + ".ffn.1", d, c.ffn_dim, rng);
    add_linear(reg, s + ".ffn.2", c.ffn_dim, d, rng);
    add_norm(reg, s + ".ln_ffn", d);
  }
  add_linear(reg, name + ".out_proj", d, vocab, rng);
}

void add_head_params(ParamRegistry& reg, const ModelConfig& c, Rng& rng) {
  const int64_t d = c.hidden_dim;
  add_linear(reg, "heads.mlm", d, c.src_vocab, rng);
  add_linear(reg, "heads.spp", d, 1, rng);
  add_linear(reg, "heads.tlc", d, 1, rng);
  add_linear(reg, "heads.btsp", d, 1, rng);
  add_linear(reg, "heads.cmi", d, 1, rng);
}

// ---- binding (registry -> handle structs) ----

LinearP bind_linear(const ParamRegistry& reg, const std::string& scope) {
  return {reg.get(scope + ".w"), reg.get(scope + ".b")};
}

NormP bind_norm(const ParamRegistry& reg, const std::string& scope) {
  return {reg.get(scope + ".g"), reg.get(scope + ".b")};
}

AttnP bind_attention(const ParamRegistry& reg, const std::string& scope) {
  AttnP p;
  p.q = {reg.get(scope + ".wq"), reg.get(scope + ".bq")};
  p.k = {reg.get(scope + ".wk"), reg.get(scope + ".bk")};
  p.v = {reg.get(scope + ".wv"), reg.get(scope + ".bv")};
  p.o = {reg.get(scope + ".wo"), reg.get(scope + ".bo")};
  return p;
}

EncoderP bind_encoder(const ParamRegistry& reg, const ModelConfig& c) {
  EncoderP e;
  e.tok_emb = reg.get("encoder.tok_emb");
  e.pos_emb = reg.get("encoder.pos_emb");
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string s = "encoder.layer" + std::to_string(l);
    EncLayerP layer;
    layer.attn = bind_attention(reg, s + ".attn");
    layer.ln_attn = bind_norm(reg, s + ".ln_attn");
    layer.ffn1 = bind_linear(reg, s + ".ffn.1");
    layer.ffn2 = bind_linear(reg, s + ".ffn.2");
    layer.ln_ffn = bind_norm(reg, s + ".ln_ffn");
    e.layers.push_back(std::move(layer));
  }
  return e;
}

DecoderP bind_decoder(const ParamRegistry& reg, const ModelConfig& c,
                      const std::string& name) {
  DecoderP dec;
  dec.tok_emb = reg.get(name + ".tok_emb");
  dec.pos_emb = reg.get(name + ".pos_emb");
  const bool coupled = c.coupling != CouplingMode::kNone;
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string s = name + ".layer" + std::to_string(l);
    DecLayerP layer;
    layer.self_attn = bind_attention(reg, s + ".self_attn");
    layer.ln_self = bind_norm(reg, s + ".ln_self");
    layer.enc_attn = bind_attention(reg, s + ".enc_attn");
    layer.ln_enc = bind_norm(reg, s + ".ln_enc");
    layer.coupled = coupled;
    if (coupled) {
      layer.cross_proj = bind_linear(reg, s + ".cross_proj");
      layer.cross_attn = bind_attention(reg, s + ".cross_attn");
      layer.ln_cross = bind_norm(reg, s + ".ln_cross");
    }
    layer.ffn1 = bind_linear(reg, s + ".ffn.1");
    layer.ffn2 = bind_linear(reg, s + ".ffn.2");
    layer.ln_ffn = bind_norm(reg, s + ".ln_ffn");
    dec.layers.push_back(std::move(layer));
  }
  dec.out_proj = bind_linear(reg, name + ".out_proj");
  return dec;
}

// ---- forward building blocks ----

Tensor linear_fwd(const Tensor& x, const LinearP& p) {
  return add(matmul(x, p.w), p.b);
}

Tensor norm_fwd(const Tensor& x, const NormP& p) {
  return layer_norm(x, p.g, p.b);
}

Tensor padding_mask_tensor(const std::vector<std::vector<int>>& mask) {
  const int64_t b = static_cast<int64_t>(mask.size());
  const int64_t t = static_cast<int64_t>(mask[0].size());
  std::vector<double> v(static_cast<size_t>(b * t));
  for (int64_t i = 0; i < b; ++i) {
    bool any = false;
    for (int64_t j = 0; j < t; ++j) {
      const int m = mask[static_cast<size_t>(i)][static_cast<size_t>(j)];
      if (m != 0 && m != 1) {
        throw std::runtime_error("attention mask entries must be 0/1");
      }
      any = any || m == 1;
      v[static_cast<size_t>(i * t + j)] = m == 1 ? 0.0 : kMaskNegative;
    }
    if (!any) {
      throw std::runtime_error("attention mask row " + std::to_string(i) +
                               " masks out every position");
    }
  }
  return Tensor::from_values({b, 1, 1, t}, std::move(v));
}

// Query position i may attend key positions j <= i. Rectangular so it also
// covers cross-stream attention between sequences of different lengths.
Tensor causal_mask_tensor(int64_t tq, int64_t tk) {
  std::vector<double> v(static_cast<size_t>(tq * tk));
  for (int64_t i = 0; i < tq; ++i) {
    for (int64_t j = 0; j < tk; ++j) {
      v[static_cast<size_t>(i * tk + j)] = j <= i ? 0.0 : kMaskNegative;
    }
  }
  return Tensor::from_values({1, 1, tq, tk}, std::move(v));
}

struct AttnResult {
  Tensor out;    // [B, Tq, d]
  Tensor probs;  // [B, h, Tq, Tk], pre-dropout (rows sum to 1)
};

AttnResult multi_head_attention(const Tensor& x_q, const Tensor& memory,
                                const AttnP& p, int num_heads,
                                const Tensor& additive_mask,
                                double dropout_rate, Rng* rng) {
  const int64_t b = x_q.shape()[0];
  const int64_t tq = x_q.shape()[1];
  const int64_t d = x_q.shape()[2];
  const int64_t tk = memory.shape()[1];
  const int64_t dh = d / num_heads;

  auto split_heads = [&](const Tensor& t, int64_t len) {
    return transpose(reshape(t, {b, len, num_heads, dh}), {0, 2, 1, 3});
  };
  Tensor q = split_heads(linear_fwd(x_q, p.q), tq);
  Tensor k = split_heads(linear_fwd(memory, p.k), tk);
  Tensor v = split_heads(linear_fwd(memory, p.v), tk);

  Tensor scores = scale(matmul(q, transpose(k, {0, 1, 3, 2})),
                        1.0 / std::sqrt(static_cast<double>(dh)));
  if (additive_mask.defined()) scores = add(scores, additive_mask);
  Tensor probs = softmax(scores, -1);
  Tensor applied = probs;
  if (dropout_rate > 0.0) applied = dropout(probs, dropout_rate, *rng);
  Tensor ctx = matmul(applied, v);  // [B, h, Tq, dh]
  ctx = reshape(transpose(ctx, {0, 2, 1, 3}), {b, tq, d});
  return {linear_fwd(ctx, p.o), probs};
}

Tensor ffn_fwd(const Tensor& x, const LinearP& ffn1, const LinearP& ffn2,
               double dropout_rate, Rng* rng) {
  Tensor h = relu(linear_fwd(x, ffn1));
  if (dropout_rate > 0.0) h = dropout(h, dropout_rate, *rng);
  return linear_fwd(h, ffn2);
}

Tensor embed_sequence(const Tensor& tok_emb, const Tensor& pos_emb,
                      const std::vector<std::vector<int>>& ids,
                      int max_seq_len, const char* what) {
  if (ids.empty() || ids[0].empty()) {
    throw std::runtime_error(std::string(what) + ": empty batch");
  }
  const int64_t b = static_cast<int64_t>(ids.size());
  const int64_t t = static_cast<int64_t>(ids[0].size());
  if (t > max_seq_len) {
    throw std::runtime_error(std::string(what) + ": sequence length " +
                             std::to_string(t) + " exceeds max_seq_len " +
                             std::to_string(max_seq_len));
  }
  std::vector<int> flat;
  flat.reserve(static_cast<size_t>(b * t));
  for (const auto& row : ids) {
    if (static_cast<int64_t>(row.size()) != t) {
      throw std::runtime_error(std::string(what) + ": ragged batch");
    }
    flat.insert(flat.end(), row.begin(), row.end());
  }
  const int64_t d = tok_emb.shape()[1];
  Tensor tok = reshape(embedding(tok_emb, flat), {b, t, d});
  std::vector<int> positions(static_cast<size_t>(t));
  std::iota(positions.begin(), positions.end(), 0);
  Tensor pos = embedding(pos_emb, positions);  // [T, d], broadcast over batch
  return add(tok, pos);
}

EncoderOutput run_encoder(const ParamRegistry& reg, const ModelConfig& c,
                          const std::vector<std::vector<int>>& token_ids,
                          const std::vector<std::vector<int>>& attn_mask,
                          Rng* rng) {
  if (token_ids.size() != attn_mask.size()) {
    throw std::runtime_error("encode: batch size mismatch between ids and mask");
  }
  for (size_t i = 0; i < token_ids.size(); ++i) {
    if (token_ids[i].size() != attn_mask[i].size()) {
      throw std::runtime_error("encode: ids/mask length mismatch in row " +
                               std::to_string(i));
    }
  }
  if (c.dropout_rate > 0.0 && rng == nullptr) {
    throw std::runtime_error("encode: dropout enabled but no rng provided");
  }
  EncoderP e = bind_encoder(reg, c);
  Tensor x = embed_sequence(e.tok_emb, e.pos_emb, token_ids, c.max_seq_len,
                            "encode");
  Tensor pad = padding_mask_tensor(attn_mask);

  EncoderOutput out;
  out.src_mask = attn_mask;
  for (const EncLayerP& layer : e.layers) {
    AttnResult att = multi_head_attention(x, x, layer.attn, c.num_heads, pad,
                                          c.dropout_rate, rng);
    x = norm_fwd(add(x, att.out), layer.ln_attn);
    Tensor f = ffn_fwd(x, layer.ffn1, layer.ffn2, c.dropout_rate, rng);
    x = norm_fwd(add(x, f), layer.ln_ffn);
    out.attentions.push_back(att.probs);
  }
  out.hidden = x;
  return out;
}

}  // namespace

// ---- config ----

CouplingMode coupling_from_string(const std::string& s) {
  if (s == "none") return CouplingMode::kNone;
  if (s == "synchronous") return CouplingMode::kSynchronous;
  if (s == "asynchronous") return CouplingMode::kAsynchronous;
  throw std::runtime_error("unknown coupling mode '" + s +
                           "' (expected none|synchronous|asynchronous)");
}

std::string coupling_to_string(CouplingMode mode) {
  switch (mode) {
    case CouplingMode::kNone: return "none";
    case CouplingMode::kSynchronous: return "synchronous";
    case CouplingMode::kAsynchronous: return "asynchronous";
  }
  throw std::runtime_error("unknown coupling mode value");
}

void ModelConfig::validate() const {
  if (num_layers < 1) throw std::runtime_error("config: num_layers must be >= 1");
  if (hidden_dim < 1) throw std::runtime_error("config: hidden_dim must be >= 1");
  if (num_heads < 1) throw std::runtime_error("config: num_heads must be >= 1");
  if (hidden_dim % num_heads != 0) {
    throw std::runtime_error("config: hidden_dim " + std::to_string(hidden_dim) +
                             " not divisible by num_heads " +
                             std::to_string(num_heads));
  }
  if (ffn_dim < 1) throw std::runtime_error("config: ffn_dim must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw std::runtime_error("config: dropout_rate must be in [0,1)");
  }
  if (max_seq_len < 1) throw std::runtime_error("config: max_seq_len must be >= 1");
  if (src_vocab < 1 || base_vocab < 1 || mix_vocab < 1) {
    throw std::runtime_error("config: vocab sizes must be >= 1");
  }
}

int64_t parameter_count(const ModelConfig& c) {
  const int64_t d = c.hidden_dim;
  const int64_t f = c.ffn_dim;
  const int64_t embeddings =
      static_cast<int64_t>(c.src_vocab) * d +
      static_cast<int64_t>(c.max_seq_len) * d;
  const int64_t attention = 4 * (d * d + d);
  const int64_t ffn = d * f + f + f * d + d;
  const int64_t norms = 2 * (2 * d);
  return embeddings + c.num_layers * (attention + ffn + norms);
}

// ---- registry ----

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
  if (has(name)) {
    throw std::runtime_error("duplicate parameter name: " + name);
  }
  t.set_requires_grad(true);
  items_.emplace_back(name, t);
  return t;
}

Tensor& ParamRegistry::get(const std::string& name) {
  for (auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw std::runtime_error("unknown parameter: " + name);
}

const Tensor& ParamRegistry::get(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw std::runtime_error("unknown parameter: " + name);
}

bool ParamRegistry::has(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return true;
  }
  return false;
}

int64_t ParamRegistry::total_parameters() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamRegistry::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

double ParamRegistry::grad_l2_norm() const {
  double s = 0.0;
  for (const auto& [name, t] : items_) {
    const double n = t.grad_l2_norm();
    s += n * n;
  }
  return std::sqrt(s);
}

// ---- CMLFormer ----

CMLFormer::CMLFormer(const ModelConfig& config, uint64_t seed)
    : config_(config) {
  config_.validate();
  Rng rng(seed);
  add_encoder_params(params_, config_, rng);
  add_decoder_params(params_, config_, "decoder_base", config_.base_vocab,
                     rng);
  add_decoder_params(params_, config_, "decoder_mix", config_.mix_vocab, rng);
  add_head_params(params_, config_, rng);
}

EncoderOutput CMLFormer::encode(const std::vector<std::vector<int>>& token_ids,
                                const std::vector<std::vector<int>>& attn_mask,
                                Rng* dropout_rng) const {
  return run_encoder(params_, config_, token_ids, attn_mask, dropout_rng);
}

DualDecoderOutput CMLFormer::decode_dual(
    const EncoderOutput& enc, const std::vector<std::vector<int>>& base_in,
    const std::vector<std::vector<int>>& mix_in, Rng* dropout_rng) const {
  if (!enc.hidden.defined() || enc.src_mask.empty()) {
    throw std::runtime_error("decode_dual: encoder output is empty");
  }
  if (config_.dropout_rate > 0.0 && dropout_rng == nullptr) {
    throw std::runtime_error("decode_dual: dropout enabled but no rng provided");
  }
  const DecoderP db = bind_decoder(params_, config_, "decoder_base");
  const DecoderP dm = bind_decoder(params_, config_, "decoder_mix");
  const double dr = config_.dropout_rate;
  const int heads = config_.num_heads;

  Tensor xb = embed_sequence(db.tok_emb, db.pos_emb, base_in,
                             config_.max_seq_len, "decode_dual(base)");
  Tensor xm = embed_sequence(dm.tok_emb, dm.pos_emb, mix_in,
                             config_.max_seq_len, "decode_dual(mix)");
  const int64_t tb = xb.shape()[1], tm = xm.shape()[1];
  const Tensor causal_b = causal_mask_tensor(tb, tb);
  const Tensor causal_m = causal_mask_tensor(tm, tm);
  // Coupling is causally masked as well: position i of one stream only sees
  // positions <= i of the other, so neither decoder leaks future tokens.
  const Tensor cross_mask_b = causal_mask_tensor(tb, tm);
  const Tensor cross_mask_m = causal_mask_tensor(tm, tb);
  const Tensor enc_pad = padding_mask_tensor(enc.src_mask);

  // Layer-(l-1) final states for asynchronous coupling; the embedding
  // output stands in below layer 0.
  Tensor prev_b = xb, prev_m = xm;

  for (int l = 0; l < config_.num_layers; ++l) {
    const DecLayerP& lb = db.layers[static_cast<size_t>(l)];
    const DecLayerP& lm = dm.layers[static_cast<size_t>(l)];
    const Tensor below_b = prev_b, below_m = prev_m;

    // Lockstep stage 1+2: both decoders reach their post encoder-attention
    // states a_l before either runs the coupling sub-layer.
    AttnResult sb = multi_head_attention(xb, xb, lb.self_attn, heads,
                                         causal_b, dr, dropout_rng);
    Tensor ab = norm_fwd(add(xb, sb.out), lb.ln_self);
    AttnResult eb = multi_head_attention(ab, enc.hidden, lb.enc_attn, heads,
                                         enc_pad, dr, dropout_rng);
    ab = norm_fwd(add(ab, eb.out), lb.ln_enc);

    AttnResult sm = multi_head_attention(xm, xm, lm.self_attn, heads,
                                         causal_m, dr, dropout_rng);
    Tensor am = norm_fwd(add(xm, sm.out), lm.ln_self);
    AttnResult em = multi_head_attention(am, enc.hidden, lm.enc_attn, heads,
                                         enc_pad, dr, dropout_rng);
    am = norm_fwd(add(am, em.out), lm.ln_enc);

    Tensor cb = ab, cm = am;
    if (config_.coupling != CouplingMode::kNone) {
      const bool sync = config_.coupling == CouplingMode::kSynchronous;
      // Keys/values come from the other decoder: its same-layer state a_l
      // (synchronous) or its previous layer's final output (asynchronous),
      // projected into this decoder's latent space.
      const Tensor src_for_b = sync ? am : below_m;
      const Tensor src_for_m = sync ? ab : below_b;
      Tensor kv_b = linear_fwd(src_for_b, lb.cross_proj);
      Tensor kv_m = linear_fwd(src_for_m, lm.cross_proj);
      AttnResult ob = multi_head_attention(ab, kv_b, lb.cross_attn, heads,
                                           cross_mask_b, dr, dropout_rng);
      cb = norm_fwd(add(ab, ob.out), lb.ln_cross);
      AttnResult om = multi_head_attention(am, kv_m, lm.cross_attn, heads,
                                           cross_mask_m, dr, dropout_rng);
      cm = norm_fwd(add(am, om.out), lm.ln_cross);
    }

    xb = norm_fwd(add(cb, ffn_fwd(cb, lb.ffn1, lb.ffn2, dr, dropout_rng)),
                  lb.ln_ffn);
    xm = norm_fwd(add(cm, ffn_fwd(cm, lm.ffn1, lm.ffn2, dr, dropout_rng)),
                  lm.ln_ffn);
    prev_b = xb;
    prev_m = xm;
  }

  DualDecoderOutput out;
  out.base_logits = linear_fwd(xb, db.out_proj);
  out.mix_logits = linear_fwd(xm, dm.out_proj);
  return out;
}

Tensor CMLFormer::mlm_logits(const EncoderOutput& enc) const {
  return linear_fwd(enc.hidden, bind_linear(params_, "heads.mlm"));
}

namespace {

Tensor per_position_scalar(const Tensor& hidden, const LinearP& head) {
  Tensor x = linear_fwd(hidden, head);  // [B, T, 1]
  return reshape(x, {x.shape()[0], x.shape()[1]});
}

Tensor cls_scalar(const Tensor& hidden, const LinearP& head) {
  Tensor cls = select(hidden, 1, 0);    // [B, d]
  Tensor x = linear_fwd(cls, head);     // [B, 1]
  return reshape(x, {x.shape()[0]});
}

}  // namespace

Tensor CMLFormer::spp_logits(const EncoderOutput& enc) const {
  return per_position_scalar(enc.hidden, bind_linear(params_, "heads.spp"));
}

Tensor CMLFormer::tlc_logits(const EncoderOutput& enc) const {
  return per_position_scalar(enc.hidden, bind_linear(params_, "heads.tlc"));
}

Tensor CMLFormer::btsp_logit(const EncoderOutput& enc) const {
  return cls_scalar(enc.hidden, bind_linear(params_, "heads.btsp"));
}

Tensor CMLFormer::cmi_pred(const EncoderOutput& enc) const {
  return cls_scalar(enc.hidden, bind_linear(params_, "heads.cmi"));
}

HeadOutputs CMLFormer::heads_forward(const EncoderOutput& enc) const {
  HeadOutputs h;
  h.mlm_logits = mlm_logits(enc);
  h.spp_logits = spp_logits(enc);
  h.tlc_logits = tlc_logits(enc);
  h.btsp_logit = btsp_logit(enc);
  h.cmi_pred = cmi_pred(enc);
  return h;
}

void CMLFormer::save(const std::string& path) const {
  save_checkpoint(path, "pretrain", config_, params_);
}

CMLFormer CMLFormer::load(const std::string& path) {
  LoadedCheckpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "pretrain") {
    throw std::runtime_error("checkpoint " + path + " has kind '" + ckpt.kind +
                             "', expected 'pretrain'");
  }
  CMLFormer model(ckpt.config, /*seed=*/0);
  if (ckpt.params.size() != model.params_.items().size()) {
    throw std::runtime_error("checkpoint " + path + " holds " +
                             std::to_string(ckpt.params.size()) +
                             " tensors, model expects " +
                             std::to_string(model.params_.items().size()));
  }
  for (const auto& [name, tensor] : ckpt.params) {
    Tensor& dst = model.params_.get(name);
    if (dst.shape() != tensor.shape()) {
      throw std::runtime_error("checkpoint tensor " + name + " has shape " +
                               shape_str(tensor.shape()) + ", model expects " +
                               shape_str(dst.shape()));
    }
    dst.values() = tensor.values();
  }
  return model;
}

// ---- ClassifierModel ----

namespace {

void add_classifier_head(ParamRegistry& reg, const ModelConfig& c, Rng& rng) {
  add_linear(reg, "classifier", c.hidden_dim, 2, rng);
}

}  // namespace

ClassifierModel::ClassifierModel(const ModelConfig& config, uint64_t seed)
    : config_(config) {
  config_.validate();
  Rng rng(seed);
  add_encoder_params(params_, config_, rng);
  add_classifier_head(params_, config_, rng);
}

ClassifierModel ClassifierModel::from_pretrained(const CMLFormer& pretrained,
                                                 uint64_t head_seed) {
  ClassifierModel model(pretrained.config(), head_seed);
  for (const auto& [name, tensor] : model.params_.items()) {
    (void)tensor;
    if (name.rfind("encoder.", 0) == 0) {
      model.params_.get(name).values() = pretrained.params().get(name).values();
    }
  }
  return model;
}

EncoderOutput ClassifierModel::encode(
    const std::vector<std::vector<int>>& token_ids,
    const std::vector<std::vector<int>>& attn_mask, Rng* dropout_rng) const {
  return run_encoder(params_, config_, token_ids, attn_mask, dropout_rng);
}

Tensor ClassifierModel::classify(const EncoderOutput& enc) const {
  Tensor cls = select(enc.hidden, 1, 0);  // [B, d]
  return linear_fwd(cls, bind_linear(params_, "classifier"));
}

void ClassifierModel::save(const std::string& path) const {
  save_checkpoint(path, "classifier", config_, params_);
}

ClassifierModel ClassifierModel::load(const std::string& path) {
  LoadedCheckpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "classifier") {
    throw std::runtime_error("checkpoint " + path + " has kind '" + ckpt.kind +
                             "', expected 'classifier'");
  }
  ClassifierModel model(ckpt.config, /*seed=*/0);
  if (ckpt.params.size() != model.params_.items().size()) {
    throw std::runtime_error("checkpoint " + path +
                             " does not match the classifier parameter set");
  }
  for (const auto& [name, tensor] : ckpt.params) {
    Tensor& dst = model.params_.get(name);
    if (dst.shape() != tensor.shape()) {
      throw std::runtime_error("checkpoint tensor " + name + " has shape " +
                               shape_str(tensor.shape()) + ", model expects " +
                               shape_str(dst.shape()));
    }
    dst.values() = tensor.values();
  }
  return model;
}

// ---- checkpoint I/O ----

namespace {

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["num_layers"] = c.num_layers;
  j["hidden_dim"] = c.hidden_dim;
  j["num_heads"] = c.num_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["dropout_rate"] = c.dropout_rate;
  j["max_seq_len"] = c.max_seq_len;
  j["coupling"] = coupling_to_string(c.coupling);
  j["src_vocab"] = c.src_vocab;
  j["base_vocab"] = c.base_vocab;
  j["mix_vocab"] = c.mix_vocab;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.coupling = coupling_from_string(j.at("coupling").get<std::string>());
  c.src_vocab = j.at("src_vocab").get<int>();
  c.base_vocab = j.at("base_vocab").get<int>();
  c.mix_vocab = j.at("mix_vocab").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& kind,
                     const ModelConfig& config, const ParamRegistry& params) {
  nlohmann::ordered_json header;
  header["kind"] = kind;
  header["config"] = config_to_json(config);
  nlohmann::ordered_json plist = nlohmann::ordered_json::array();
  for (const auto& [name, tensor] : params.items()) {
    nlohmann::ordered_json p;
    p["name"] = name;
    p["shape"] = tensor.shape();
    plist.push_back(std::move(p));
  }
  header["params"] = std::move(plist);
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 4);
  const uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(),
            static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, tensor] : params.items()) {
    const auto& v = tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error(path + " is not a checkpoint file");
  }
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kCheckpointVersion) {
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  }
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in) throw std::runtime_error(path + ": truncated checkpoint header");
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw std::runtime_error(path + ": truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": bad checkpoint header: " + e.what());
  }

  LoadedCheckpoint ckpt;
  ckpt.kind = header.at("kind").get<std::string>();
  ckpt.config = config_from_json(header.at("config"));
  for (const auto& p : header.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    const Shape shape = p.at("shape").get<Shape>();
    const int64_t n = shape_numel(shape);
    std::vector<double> values(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) {
      throw std::runtime_error(path + ": truncated tensor data for " + name);
    }
    ckpt.params.emplace_back(name,
                             Tensor::from_values(shape, std::move(values)));
  }
  // no trailing garbage
  char extra;
  if (in.read(&extra, 1)) {
    throw std::runtime_error(path + ": trailing bytes after tensor data");
  }
  return ckpt;
}

}  // namespace cml
