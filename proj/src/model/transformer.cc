#include "psyt/transformer.h"

#include <cmath>
#include <stdexcept>

#include "psyt/random.h"

namespace psyt {

void ModelConfig::validate() const {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                                std::to_string(n_heads) + ")");
  }
  if (d_model % 2 != 0) throw std::invalid_argument("d_model must be even for the positional encoding");
  if (vocab_size <= static_cast<std::size_t>(kNumReserved)) {
    throw std::invalid_argument("vocab_size must exceed the " + std::to_string(kNumReserved) + " reserved ids");
  }
  if (max_len < 2) throw std::invalid_argument("max_len must be at least 2");
  if (d_ff_attention == 0 || d_ff_network == 0) throw std::invalid_argument("feed-forward sizes must be positive");
  if (!(norm_eps > 0.0)) throw std::invalid_argument("norm_eps must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_encoder_blocks", c.n_encoder_blocks},
                     {"n_decoder_blocks", c.n_decoder_blocks},
                     {"n_heads", c.n_heads},
                     {"d_model", c.d_model},
                     {"d_ff_attention", c.d_ff_attention},
                     {"d_ff_network", c.d_ff_network},
                     {"vocab_size", c.vocab_size},
                     {"max_len", c.max_len},
                     {"norm_eps", c.norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_encoder_blocks = j.value("n_encoder_blocks", d.n_encoder_blocks);
  c.n_decoder_blocks = j.value("n_decoder_blocks", d.n_decoder_blocks);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_model = j.value("d_model", d.d_model);
  c.d_ff_attention = j.value("d_ff_attention", d.d_ff_attention);
  c.d_ff_network = j.value("d_ff_network", d.d_ff_network);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_len = j.value("max_len", d.max_len);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
}

namespace {

template <class T>
ParamsT<T> skeleton(const ModelConfig& c) {
  ParamsT<T> p;
  p.encoder.resize(c.n_encoder_blocks);
  p.decoder.resize(c.n_decoder_blocks);
  return p;
}

template <class T, class S>
ParamsT<T> skeleton_like(const ParamsT<S>& shape) {
  ParamsT<T> p;
  p.encoder.resize(shape.encoder.size());
  p.decoder.resize(shape.decoder.size());
  return p;
}

struct Initializer {
  Rng rng;

  Tensor weight(std::size_t in, std::size_t out) {
    const double b = init_bound(in);
    Tensor t({in, out});
    for (auto& v : t.data()) v = uniform(rng, -b, b);
    return t;
  }
  LinearT<Tensor> linear(std::size_t in, std::size_t out) { return {weight(in, out), Tensor({out})}; }
  NormT<Tensor> norm(std::size_t d) { return {Tensor({d}, 1.0), Tensor({d})}; }
  AttentionT<Tensor> attention(const ModelConfig& c) {
    AttentionT<Tensor> a;
    a.wq = weight(c.d_model, c.d_model);
    a.wk = weight(c.d_model, c.d_model);
    a.wv = weight(c.d_model, c.d_model);
    a.inner = linear(c.d_model, c.d_ff_attention);
    a.outer = linear(c.d_ff_attention, c.d_model);
    return a;
  }
  FeedForwardT<Tensor> ff(const ModelConfig& c) {
    return {linear(c.d_model, c.d_ff_network), linear(c.d_ff_network, c.d_model)};
  }
};

void check_ids(std::span<const TokenId> ids, std::size_t vocab) {
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw EncodingError("token id " + std::to_string(id) + " is outside the vocabulary of " +
                          std::to_string(vocab));
    }
  }
}

Tensor tiled_positions(std::size_t batch, std::size_t len, std::size_t d_model) {
  const Tensor pe = positional_encoding(len, d_model);
  Tensor out({batch * len, d_model});
  for (std::size_t b = 0; b < batch; ++b)
    std::copy(pe.data().begin(), pe.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * len * d_model));
  return out;
}

Var feed_forward(Var x, const FeedForwardT<Var>& ff) {
  return ag::linear(ag::relu(ag::linear(x, ff.hidden.weight, ff.hidden.bias)), ff.out.weight, ff.out.bias);
}

Var add_norm(Var x, Var sub, const NormT<Var>& n, double eps) { return ag::layer_norm(ag::add(x, sub), n.gain, n.bias, eps); }

Var embed(const ModelConfig& c, Var table, const TokenBatch& tokens) {
  if (tokens.len > c.max_len) {
    throw EncodingError("sequence length " + std::to_string(tokens.len) + " exceeds max_len " +
                        std::to_string(c.max_len));
  }
  check_ids(tokens.ids, c.vocab_size);
  Var x = ag::embedding(table, tokens.ids);
  return ag::add_constant(x, tiled_positions(tokens.batch, tokens.len, c.d_model));
}

}  // namespace

TransformerParams zeros_like(const TransformerParams& p) {
  TransformerParams out = p;
  visit_params(out, [](const std::string&, Tensor& t) { t.fill(0.0); });
  return out;
}

std::vector<std::pair<std::string, Tensor*>> flatten(TransformerParams& p) {
  std::vector<std::pair<std::string, Tensor*>> out;
  visit_params(p, [&out](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

std::size_t parameter_count(const TransformerParams& p) {
  std::size_t n = 0;
  visit_params(p, [&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

double init_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

TransformerParams init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Initializer init{Rng(seed)};
  TransformerParams p = skeleton<Tensor>(c);
  p.src_embedding = init.weight(1, c.vocab_size * c.d_model).reshaped({c.vocab_size, c.d_model});
  p.tgt_embedding = init.weight(1, c.vocab_size * c.d_model).reshaped({c.vocab_size, c.d_model});
  for (auto& b : p.encoder) {
    b.self_attn = init.attention(c);
    b.norm1 = init.norm(c.d_model);
    b.ff = init.ff(c);
    b.norm2 = init.norm(c.d_model);
  }
  p.encoder_cap = init.ff(c);
  p.encoder_cap_norm = init.norm(c.d_model);
  for (auto& b : p.decoder) {
    b.self_attn = init.attention(c);
    b.norm1 = init.norm(c.d_model);
    b.cross_attn = init.attention(c);
    b.norm2 = init.norm(c.d_model);
    b.ff = init.ff(c);
    b.norm3 = init.norm(c.d_model);
  }
  p.decoder_cap = init.ff(c);
  p.decoder_cap_norm = init.norm(c.d_model);
  p.output = init.linear(c.d_model, c.vocab_size);
  return p;
}

BoundParams bind_params(Tape& tape, const TransformerParams& params, TransformerParams* grads) {
  std::vector<Var> leaves;
  if (grads) {
    auto sinks = flatten(*grads);
    std::size_t i = 0;
    visit_params(params, [&](const std::string&, const Tensor& t) {
      leaves.push_back(tape.parameter(t, sinks.at(i++).second));
    });
  } else {
    visit_params(params, [&](const std::string&, const Tensor& t) { leaves.push_back(tape.parameter(t, nullptr)); });
  }
  return bind_params(params, leaves);
}

BoundParams bind_params(const TransformerParams& shape, std::span<const Var> leaves) {
  BoundParams out = skeleton_like<Var>(shape);
  std::size_t i = 0;
  visit_params(out, [&](const std::string& name, Var& v) {
    if (i >= leaves.size()) throw std::invalid_argument("too few leaves to bind parameter " + name);
    v = leaves[i++];
  });
  if (i != leaves.size()) throw std::invalid_argument("too many leaves for the parameter tree");
  return out;
}

Tensor positional_encoding(std::size_t max_len, std::size_t d_model) {
  if (d_model % 2 != 0) throw std::invalid_argument("positional encoding needs an even d_model");
  Tensor pe({max_len, d_model});
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; 2 * i < d_model; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      pe(pos, 2 * i) = std::sin(angle);
      pe(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

TokenBatch TokenBatch::from_rows(std::span<const TokenSeq> rows) {
  TokenBatch b;
  b.batch = rows.size();
  b.len = rows.empty() ? 0 : rows[0].size();
  b.ids.reserve(b.batch * b.len);
  for (const auto& r : rows) {
    if (r.size() != b.len) throw DimensionError("token batch rows must share one length");
    b.ids.insert(b.ids.end(), r.begin(), r.end());
  }
  return b;
}

std::size_t content_length(std::span<const TokenId> seq) {
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] == kEosId) return i + 1;
  }
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] == kPadId) return i;
  }
  return seq.size();
}

Var attention_heads(Var x_q, Var x_kv, const AttentionT<Var>& w, const AttentionLayout& layout) {
  Var q = ag::matmul(x_q, w.wq);
  Var k = ag::matmul(x_kv, w.wk);
  Var v = ag::matmul(x_kv, w.wv);
  return ag::attention(q, k, v, layout);
}

Var multi_head_attention(Var x_q, Var x_kv, const AttentionT<Var>& w, std::size_t heads, const AttentionLayout& layout) {
  AttentionLayout l = layout;
  l.heads = heads;
  Var concat = attention_heads(x_q, x_kv, w, l);
  Var hidden = ag::relu(ag::linear(concat, w.inner.weight, w.inner.bias));
  return ag::linear(hidden, w.outer.weight, w.outer.bias);
}

Encoded encoder_forward(Tape&, const BoundParams& p, const ModelConfig& c, const TokenBatch& src) {
  Encoded enc;
  enc.len = src.len;
  std::vector<AttentionMask> masks;
  masks.reserve(src.batch);
  for (std::size_t b = 0; b < src.batch; ++b) {
    const std::size_t n = content_length(src.row(b));
    if (n == 0) throw std::invalid_argument("source sequence " + std::to_string(b) + " has no content");
    enc.key_lengths.push_back(n);
    masks.push_back(AttentionMask::key_padding(src.len, src.len, n));
  }
  const AttentionLayout layout{src.batch, src.len, src.len, c.n_heads, masks};

  Var x = embed(c, p.src_embedding, src);
  for (const auto& blk : p.encoder) {
    x = add_norm(x, multi_head_attention(x, x, blk.self_attn, c.n_heads, layout), blk.norm1, c.norm_eps);
    x = add_norm(x, feed_forward(x, blk.ff), blk.norm2, c.norm_eps);
  }
  enc.memory = add_norm(x, feed_forward(x, p.encoder_cap), p.encoder_cap_norm, c.norm_eps);
  return enc;
}

Var decoder_forward(Tape&, const BoundParams& p, const ModelConfig& c, const TokenBatch& dec_in, const Encoded& memory) {
  if (memory.key_lengths.size() != dec_in.batch) {
    throw DimensionError("decoder batch " + std::to_string(dec_in.batch) + " does not match encoder batch " +
                         std::to_string(memory.key_lengths.size()));
  }
  // Decoder input starts with the shift pad, so only the causal mask applies
  // to self-attention; later pads sit behind positions whose targets are pad.
  const AttentionMask causal = AttentionMask::causal(dec_in.len);
  const AttentionLayout self_layout{dec_in.batch, dec_in.len, dec_in.len, c.n_heads,
                                    std::span<const AttentionMask>(&causal, 1)};
  std::vector<AttentionMask> cross_masks;
  cross_masks.reserve(dec_in.batch);
  for (std::size_t n : memory.key_lengths) cross_masks.push_back(AttentionMask::key_padding(dec_in.len, memory.len, n));
  const AttentionLayout cross_layout{dec_in.batch, dec_in.len, memory.len, c.n_heads, cross_masks};

  Var y = embed(c, p.tgt_embedding, dec_in);
  for (const auto& blk : p.decoder) {
    y = add_norm(y, multi_head_attention(y, y, blk.self_attn, c.n_heads, self_layout), blk.norm1, c.norm_eps);
    y = add_norm(y, multi_head_attention(y, memory.memory, blk.cross_attn, c.n_heads, cross_layout), blk.norm2,
                 c.norm_eps);
    y = add_norm(y, feed_forward(y, blk.ff), blk.norm3, c.norm_eps);
  }
  y = add_norm(y, feed_forward(y, p.decoder_cap), p.decoder_cap_norm, c.norm_eps);
  return ag::linear(y, p.output.weight, p.output.bias);
}

Var sequence_loss(Tape& tape, const BoundParams& params, const ModelConfig& config, const TokenBatch& src,
                  const TokenBatch& dec_in, const TokenBatch& targets) {
  if (targets.batch != dec_in.batch || targets.len != dec_in.len) {
    throw DimensionError("targets and decoder input must have the same shape");
  }
  const Encoded enc = encoder_forward(tape, params, config, src);
  Var logits = decoder_forward(tape, params, config, dec_in, enc);
  return ag::masked_cross_entropy(logits, targets.ids, kPadId);
}

double masked_cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId pad_id) {
  Tape tape(false);
  return ag::masked_cross_entropy(tape.constant(logits), targets, pad_id).value()[0];
}

Tensor encode_memory(const TransformerParams& params, const ModelConfig& config, const TokenBatch& src) {
  Tape tape(false);
  const BoundParams bp = bind_params(tape, params, nullptr);
  return encoder_forward(tape, bp, config, src).memory.value();
}

Tensor decode_logits(const TransformerParams& params, const ModelConfig& config, const TokenBatch& src,
                     const TokenBatch& dec_in) {
  Tape tape(false);
  const BoundParams bp = bind_params(tape, params, nullptr);
  const Encoded enc = encoder_forward(tape, bp, config, src);
  return decoder_forward(tape, bp, config, dec_in, enc).value();
}

}  // namespace psyt
