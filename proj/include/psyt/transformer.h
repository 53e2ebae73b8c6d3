#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyt/attention.h"
#include "psyt/autograd.h"
#include "psyt/tokens.h"

namespace psyt {

// Architecture hyperparameters. d_model = 240 splits evenly into 6 heads.
struct ModelConfig {
  std::size_t n_encoder_blocks = 2;
  std::size_t n_decoder_blocks = 2;
  std::size_t n_heads = 6;
  std::size_t d_model = 240;
  std::size_t d_ff_attention = 512;  // hidden width of the projection after head concatenation
  std::size_t d_ff_network = 256;    // hidden width of each block's feed-forward layer
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;
  double norm_eps = 1e-6;

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  std::size_t d_key() const { return d_model / n_heads; }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Raised for token ids the model cannot embed.
class EncodingError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Parameter tree, templated so the same layout can hold tensors, gradients
// or tape handles. Weights are stored (in x out).
template <class T>
struct LinearT {
  T weight;
  T bias;
};

template <class T>
struct NormT {
  T gain;
  T bias;
};

template <class T>
struct AttentionT {
  T wq;
  T wk;
  T wv;
  LinearT<T> inner;  // d_model -> d_ff_attention
  LinearT<T> outer;  // d_ff_attention -> d_model
};

template <class T>
struct FeedForwardT {
  LinearT<T> hidden;  // d_model -> d_ff_network
  LinearT<T> out;     // d_ff_network -> d_model
};

template <class T>
struct EncoderBlockT {
  AttentionT<T> self_attn;
  NormT<T> norm1;
  FeedForwardT<T> ff;
  NormT<T> norm2;
};

template <class T>
struct DecoderBlockT {
  AttentionT<T> self_attn;
  NormT<T> norm1;
  AttentionT<T> cross_attn;
  NormT<T> norm2;
  FeedForwardT<T> ff;
  NormT<T> norm3;
};

template <class T>
struct ParamsT {
  T src_embedding;
  T tgt_embedding;
  std::vector<EncoderBlockT<T>> encoder;
  FeedForwardT<T> encoder_cap;
  NormT<T> encoder_cap_norm;
  std::vector<DecoderBlockT<T>> decoder;
  FeedForwardT<T> decoder_cap;
  NormT<T> decoder_cap_norm;
  LinearT<T> output;
};

using TransformerParams = ParamsT<Tensor>;
using BoundParams = ParamsT<Var>;

namespace detail {

template <class T, class F>
void visit(const std::string& p, LinearT<T>& l, F& f) {
  f(p + ".weight", l.weight);
  f(p + ".bias", l.bias);
}
template <class T, class F>
void visit(const std::string& p, NormT<T>& n, F& f) {
  f(p + ".gain", n.gain);
  f(p + ".bias", n.bias);
}
template <class T, class F>
void visit(const std::string& p, AttentionT<T>& a, F& f) {
  f(p + ".wq", a.wq);
  f(p + ".wk", a.wk);
  f(p + ".wv", a.wv);
  visit(p + ".inner", a.inner, f);
  visit(p + ".outer", a.outer, f);
}
template <class T, class F>
void visit(const std::string& p, FeedForwardT<T>& ff, F& f) {
  visit(p + ".hidden", ff.hidden, f);
  visit(p + ".out", ff.out, f);
}

}  // namespace detail

// Calls f(name, T&) for every parameter in a fixed, documented order.
template <class T, class F>
void visit_params(ParamsT<T>& p, F&& f) {
  f("src_embedding", p.src_embedding);
  f("tgt_embedding", p.tgt_embedding);
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    const std::string b = "encoder." + std::to_string(i);
    detail::visit(b + ".self_attn", p.encoder[i].self_attn, f);
    detail::visit(b + ".norm1", p.encoder[i].norm1, f);
    detail::visit(b + ".ff", p.encoder[i].ff, f);
    detail::visit(b + ".norm2", p.encoder[i].norm2, f);
  }
  detail::visit("encoder_cap", p.encoder_cap, f);
  detail::visit("encoder_cap_norm", p.encoder_cap_norm, f);
  for (std::size_t i = 0; i < p.decoder.size(); ++i) {
    const std::string b = "decoder." + std::to_string(i);
    detail::visit(b + ".self_attn", p.decoder[i].self_attn, f);
    detail::visit(b + ".norm1", p.decoder[i].norm1, f);
    detail::visit(b + ".cross_attn", p.decoder[i].cross_attn, f);
    detail::visit(b + ".norm2", p.decoder[i].norm2, f);
    detail::visit(b + ".ff", p.decoder[i].ff, f);
    detail::visit(b + ".norm3", p.decoder[i].norm3, f);
  }
  detail::visit("decoder_cap", p.decoder_cap, f);
  detail::visit("decoder_cap_norm", p.decoder_cap_norm, f);
  detail::visit("output", p.output, f);
}

template <class T, class F>
void visit_params(const ParamsT<T>& p, F&& f) {
  visit_params(const_cast<ParamsT<T>&>(p), [&f](const std::string& name, T& v) { f(name, std::as_const(v)); });
}

// Same tree shape with every tensor zero-filled.
TransformerParams zeros_like(const TransformerParams& p);
// Flat (name, tensor*) list in visit order.
std::vector<std::pair<std::string, Tensor*>> flatten(TransformerParams& p);
std::size_t parameter_count(const TransformerParams& p);

// Deterministic scaled-uniform initialisation: weights of a layer with fan-in
// n are drawn from U(-init_bound(n), init_bound(n)); embeddings use fan-in 1;
// biases start at 0, layer-norm gains at 1.
TransformerParams init_params(const ModelConfig& config, std::uint64_t seed);
double init_bound(std::size_t fan_in);

// Puts every parameter on `tape`. When grads is non-null the tape adds each
// parameter's gradient into the matching tensor of *grads on backward().
BoundParams bind_params(Tape& tape, const TransformerParams& params, TransformerParams* grads);
// Binds pre-created leaves (one per parameter, in visit order).
BoundParams bind_params(const TransformerParams& shape, std::span<const Var> leaves);

// sin/cos position table; odd d_model is rejected.
Tensor positional_encoding(std::size_t max_len, std::size_t d_model);

// Row-major batch of equal-length token sequences.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<TokenId> ids;

  static TokenBatch from_rows(std::span<const TokenSeq> rows);
  std::span<const TokenId> row(std::size_t b) const { return {ids.data() + b * len, len}; }
};

// Number of leading positions that carry content: through the first eos, or up
// to the first pad when there is no eos.
std::size_t content_length(std::span<const TokenId> seq);

// Per-call cache of the constant tensors the forward pass needs.
struct Encoded {
  Var memory;                         // (batch*len) x d_model
  std::vector<std::size_t> key_lengths;
  std::size_t len = 0;
};

// Multi-head attention: heads of (x_q Wq, x_kv Wk, x_kv Wv) concatenated, then
// the in-attention projection (Linear, ReLU, Linear) back to d_model.
Var multi_head_attention(Var x_q, Var x_kv, const AttentionT<Var>& w, std::size_t heads, const AttentionLayout& layout);
// Just the concatenated head outputs, before the in-attention projection.
Var attention_heads(Var x_q, Var x_kv, const AttentionT<Var>& w, const AttentionLayout& layout);

Encoded encoder_forward(Tape& tape, const BoundParams& params, const ModelConfig& config, const TokenBatch& src);
// Logits ((batch*len) x vocab_size) for the right-shifted decoder input.
Var decoder_forward(Tape& tape, const BoundParams& params, const ModelConfig& config, const TokenBatch& dec_in,
                    const Encoded& memory);

// Convenience: full forward plus masked loss for one batch.
Var sequence_loss(Tape& tape, const BoundParams& params, const ModelConfig& config, const TokenBatch& src,
                  const TokenBatch& dec_in, const TokenBatch& targets);

// Masked cross-entropy on plain tensors (pad positions contribute nothing).
double masked_cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId pad_id = kPadId);

// Non-recording helpers for callers that only want values.
Tensor encode_memory(const TransformerParams& params, const ModelConfig& config, const TokenBatch& src);
Tensor decode_logits(const TransformerParams& params, const ModelConfig& config, const TokenBatch& src,
                     const TokenBatch& dec_in);

}  // namespace psyt
