#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "psyt/autograd.h"

namespace psyt {

// Boolean (len_q x len_k) matrix; true means the query may attend the key.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t len_q, std::size_t len_k, bool allowed = true);

  // Lower-triangular: query i sees keys 0..i.
  static AttentionMask causal(std::size_t len);
  // Every query sees exactly the first valid_k keys.
  static AttentionMask key_padding(std::size_t len_q, std::size_t len_k, std::size_t valid_k);

  std::size_t len_q() const { return len_q_; }
  std::size_t len_k() const { return len_k_; }
  bool allowed(std::size_t q, std::size_t k) const { return bits_[q * len_k_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool allowed) { bits_[q * len_k_ + k] = allowed ? 1 : 0; }

  bool is_lower_triangular() const;

 private:
  std::size_t len_q_ = 0;
  std::size_t len_k_ = 0;
  std::vector<std::uint8_t> bits_;
};

// Added to masked scores before the softmax. Finite so gradients stay finite.
inline constexpr double kMaskBias = -1e9;

// Shape of a packed attention call: q holds batch*len_q rows, k and v hold
// batch*len_k rows, and the model width is split into `heads` column blocks.
// masks has one entry per batch element, or a single entry shared by all.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t len_q = 0;
  std::size_t len_k = 0;
  std::size_t heads = 1;
  std::span<const AttentionMask> masks;
};

namespace ag {

// softmax(q k^T / sqrt(D_k) + mask bias) v per batch element and head, with
// the head outputs concatenated along columns. A query row whose keys are all
// masked has no defined distribution and raises std::invalid_argument.
Var attention(Var q, Var k, Var v, const AttentionLayout& layout);

}  // namespace ag

// Single-head, unbatched scaled dot-product attention on plain tensors.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask);

}  // namespace psyt
