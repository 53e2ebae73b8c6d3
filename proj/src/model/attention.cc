#include "psyt/attention.h"

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace psyt {

AttentionMask::AttentionMask(std::size_t len_q, std::size_t len_k, bool allowed)
    : len_q_(len_q), len_k_(len_k), bits_(len_q * len_k, allowed ? 1 : 0) {}

AttentionMask AttentionMask::causal(std::size_t len) {
  AttentionMask m(len, len, false);
  for (std::size_t q = 0; q < len; ++q)
    for (std::size_t k = 0; k <= q; ++k) m.set(q, k, true);
  return m;
}

AttentionMask AttentionMask::key_padding(std::size_t len_q, std::size_t len_k, std::size_t valid_k) {
  AttentionMask m(len_q, len_k, false);
  for (std::size_t q = 0; q < len_q; ++q)
    for (std::size_t k = 0; k < valid_k && k < len_k; ++k) m.set(q, k, true);
  return m;
}

bool AttentionMask::is_lower_triangular() const {
  for (std::size_t q = 0; q < len_q_; ++q)
    for (std::size_t k = q + 1; k < len_k_; ++k)
      if (allowed(q, k)) return false;
  return true;
}

namespace ag {

namespace {

struct Geometry {
  std::size_t batch, len_q, len_k, heads, dk, width;
};

const AttentionMask& mask_for(const AttentionLayout& layout, std::size_t b) {
  return layout.masks.size() == 1 ? layout.masks[0] : layout.masks[b];
}

}  // namespace

Var attention(Var q, Var k, Var v, const AttentionLayout& layout) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t width = qv.cols();
  if (layout.heads == 0 || width % layout.heads != 0) {
    throw DimensionError("attention width " + std::to_string(width) + " not divisible into " +
                         std::to_string(layout.heads) + " heads");
  }
  if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2 || kv.cols() != width || vv.cols() != width ||
      qv.rows() != layout.batch * layout.len_q || kv.rows() != layout.batch * layout.len_k ||
      vv.rows() != kv.rows()) {
    throw DimensionError("attention operands q " + shape_string(qv.shape()) + ", k " + shape_string(kv.shape()) +
                         ", v " + shape_string(vv.shape()) + " do not match layout");
  }
  if (layout.masks.size() != 1 && layout.masks.size() != layout.batch) {
    throw DimensionError("attention needs 1 or batch masks, got " + std::to_string(layout.masks.size()));
  }
  for (std::size_t b = 0; b < layout.masks.size(); ++b) {
    if (layout.masks[b].len_q() != layout.len_q || layout.masks[b].len_k() != layout.len_k) {
      throw DimensionError("attention mask is " + std::to_string(layout.masks[b].len_q()) + "x" +
                           std::to_string(layout.masks[b].len_k()) + ", expected " + std::to_string(layout.len_q) +
                           "x" + std::to_string(layout.len_k));
    }
  }

  const Geometry g{layout.batch, layout.len_q, layout.len_k, layout.heads, width / layout.heads, width};
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(g.dk));
  auto probs = std::make_shared<std::vector<double>>(g.batch * g.heads * g.len_q * g.len_k);
  Tensor out({g.batch * g.len_q, width});

  std::vector<double> scores(g.len_k);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const AttentionMask& mask = mask_for(layout, b);
    for (std::size_t h = 0; h < g.heads; ++h) {
      const std::size_t col = h * g.dk;
      for (std::size_t i = 0; i < g.len_q; ++i) {
        const double* qrow = &qv(b * g.len_q + i, col);
        bool any = false;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < g.len_k; ++j) {
          const double* krow = &kv(b * g.len_k + j, col);
          double s = 0.0;
          for (std::size_t c = 0; c < g.dk; ++c) s += qrow[c] * krow[c];
          s *= inv_scale;
          if (mask.allowed(i, j)) {
            any = true;
          } else {
            s += kMaskBias;
          }
          scores[j] = s;
          mx = std::max(mx, s);
        }
        if (!any) {
          throw std::invalid_argument("attention: query row " + std::to_string(i) + " of batch element " +
                                      std::to_string(b) + " has every key masked");
        }
        double total = 0.0;
        for (std::size_t j = 0; j < g.len_k; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          total += scores[j];
        }
        double* p = probs->data() + ((b * g.heads + h) * g.len_q + i) * g.len_k;
        double* orow = &out(b * g.len_q + i, col);
        for (std::size_t j = 0; j < g.len_k; ++j) {
          p[j] = scores[j] / total;
          if (p[j] == 0.0) continue;
          const double* vrow = &vv(b * g.len_k + j, col);
          for (std::size_t c = 0; c < g.dk; ++c) orow[c] += p[j] * vrow[c];
        }
      }
    }
  }

  return q.tape->record(std::move(out), {q, k, v}, [q, k, v, g, probs, inv_scale](Tape& t, const Tensor& grad, const Tensor&) {
    const Tensor& qv = t.value(q);
    const Tensor& kv = t.value(k);
    const Tensor& vv = t.value(v);
    const bool need_q = t.requires_grad(q);
    const bool need_k = t.requires_grad(k);
    const bool need_v = t.requires_grad(v);
    Tensor* gq = need_q ? &t.grad_slot(q) : nullptr;
    Tensor* gk = need_k ? &t.grad_slot(k) : nullptr;
    Tensor* gv = need_v ? &t.grad_slot(v) : nullptr;
    std::vector<double> dp(g.len_k);
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t h = 0; h < g.heads; ++h) {
        const std::size_t col = h * g.dk;
        for (std::size_t i = 0; i < g.len_q; ++i) {
          const double* p = probs->data() + ((b * g.heads + h) * g.len_q + i) * g.len_k;
          const double* go = &grad(b * g.len_q + i, col);
          double dot = 0.0;
          for (std::size_t j = 0; j < g.len_k; ++j) {
            const double* vrow = &vv(b * g.len_k + j, col);
            double s = 0.0;
            for (std::size_t c = 0; c < g.dk; ++c) s += go[c] * vrow[c];
            dp[j] = s;
            dot += s * p[j];
            if (gv && p[j] != 0.0) {
              double* dv = &(*gv)(b * g.len_k + j, col);
              for (std::size_t c = 0; c < g.dk; ++c) dv[c] += p[j] * go[c];
            }
          }
          const double* qrow = &qv(b * g.len_q + i, col);
          for (std::size_t j = 0; j < g.len_k; ++j) {
            const double ds = p[j] * (dp[j] - dot) * inv_scale;
            if (ds == 0.0) continue;
            const double* krow = &kv(b * g.len_k + j, col);
            if (gq) {
              double* dq = &(*gq)(b * g.len_q + i, col);
              for (std::size_t c = 0; c < g.dk; ++c) dq[c] += ds * krow[c];
            }
            if (gk) {
              double* dk = &(*gk)(b * g.len_k + j, col);
              for (std::size_t c = 0; c < g.dk; ++c) dk[c] += ds * qrow[c];
            }
          }
        }
      }
    }
  });
}

}  // namespace ag

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask) {
  if (q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols()) {
    throw DimensionError("scaled_dot_attention: q " + shape_string(q.shape()) + " and k " + shape_string(k.shape()) +
                         " must share the key dimension");
  }
  if (v.rank() != 2 || v.rows() != k.rows()) {
    throw DimensionError("scaled_dot_attention: v " + shape_string(v.shape()) + " must have one row per key");
  }
  if (mask.len_q() != q.rows() || mask.len_k() != k.rows()) {
    throw DimensionError("scaled_dot_attention: mask does not match query/key lengths");
  }
  Tape tape(false);
  const std::size_t dk = q.cols();
  const std::size_t dv = v.cols();
  if (dv == dk) {
    AttentionLayout layout{1, q.rows(), k.rows(), 1, std::span<const AttentionMask>(&mask, 1)};
    return ag::attention(tape.constant(q), tape.constant(k), tape.constant(v), layout).value();
  }
  // The packed op needs equal q/v widths; fall back to explicit products.
  Tensor scores = matmul_nt(q, k);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    bool any = false;
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      scores(i, j) *= inv_scale;
      if (mask.allowed(i, j)) {
        any = true;
      } else {
        scores(i, j) += kMaskBias;
      }
    }
    if (!any) throw std::invalid_argument("attention: query row " + std::to_string(i) + " has every key masked");
  }
  return matmul(softmax(scores, 1), v);
}

}  // namespace psyt
