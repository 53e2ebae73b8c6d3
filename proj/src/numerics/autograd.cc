#include "psyt/autograd.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace psyt {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(const Tensor& value, Tensor* grad_sink) {
  Node n;
  n.ref = &value;
  n.sink = grad_sink;
  n.requires_grad = record_ && grad_sink != nullptr;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backward fn) {
  value.check_finite("forward value");
  Node n;
  n.owned = std::move(value);
  if (record_) {
    for (const Var& p : parents) {
      if (p.tape != this) throw std::logic_error("operands recorded on different tapes");
      n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.ref ? *n.ref : n.owned;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.grad.empty() ? Tensor(value(v).shape()) : n.grad;
}

Tensor& Tape::grad_slot(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor(value(v).shape());
  return n.grad;
}

void Tape::backward(Var root) {
  if (!record_) throw std::logic_error("backward() on a non-recording tape");
  if (value(root).size() != 1) {
    throw DimensionError("backward() needs a scalar root, got " + shape_string(value(root).shape()));
  }
  grad_slot(root).fill(1.0);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    n.grad.check_finite("gradient");
    if (n.sink) *n.sink += n.grad;
    if (n.backward) {
      const Tensor g = std::move(n.grad);
      n.grad = Tensor();
      nodes_[i].backward(*this, g, value({this, i}));
    }
  }
}

double log_sum_exp(std::span<const double> row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double total = 0.0;
  for (double v : row) total += std::exp(v - mx);
  return mx + std::log(total);
}

namespace ag {

namespace {

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("operands recorded on different tapes");
  return *a.tape;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_matrix(a.value(), "matmul");
  require_matrix(b.value(), "matmul");
  return tape.record(psyt::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(a)) t.grad_slot(a) += matmul_nt(g, t.value(b));
    if (t.requires_grad(b)) t.grad_slot(b) += matmul_tn(t.value(a), g);
  });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  return tape.record(psyt::add(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(a)) t.grad_slot(a) += g;
    if (t.requires_grad(b)) t.grad_slot(b) += g;
  });
}

Var add_row(Var a, Var bias) {
  Tape& tape = tape_of(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.size() != av.cols()) {
    throw DimensionError("add_row bias " + shape_string(bv.shape()) + " does not match " + shape_string(av.shape()));
  }
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return tape.record(std::move(out), {a, bias}, [a, bias](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(a)) t.grad_slot(a) += g;
    if (t.requires_grad(bias)) {
      Tensor& gb = t.grad_slot(bias);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
    }
  });
}

Var add_constant(Var a, const Tensor& c) {
  return a.tape->record(psyt::add(a.value(), c), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    t.grad_slot(a) += g;
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  out *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor& ga = t.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (y[i] > 0.0) ga[i] += g[i];
  });
}

Var transpose(Var a) {
  require_matrix(a.value(), "transpose");
  return a.tape->record(psyt::transpose(a.value()), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    t.grad_slot(a) += psyt::transpose(g);
  });
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  return x.tape->record(psyt::softmax(xv, xv.rank() - 1), {x}, [x](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor& gx = t.grad_slot(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const auto yr = y.row(r);
      const auto gr = g.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
      auto out = gx.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) out[c] += yr[c] * (gr[c] - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& tape = tape_of(x, gain);
  tape_of(x, bias);
  Tensor out = psyt::layer_norm(x.value(), gain.value(), bias.value(), eps);
  return tape.record(std::move(out), {x, gain, bias}, [x, gain, bias, eps](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gain);
    const std::size_t d = xv.cols();
    const double dd = static_cast<double>(d);
    const bool need_x = t.requires_grad(x);
    const bool need_gain = t.requires_grad(gain);
    const bool need_bias = t.requires_grad(bias);
    std::vector<double> xhat(d), dxhat(d);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      const auto in = xv.row(r);
      const auto gr = g.row(r);
      double mean = 0.0;
      for (double v : in) mean += v;
      mean /= dd;
      double var = 0.0;
      for (double v : in) var += (v - mean) * (v - mean);
      var /= dd;
      const double inv = 1.0 / std::sqrt(var + eps);
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (in[j] - mean) * inv;
        dxhat[j] = gr[j] * gv[j];
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat[j];
      }
      mean_dxhat /= dd;
      mean_dxhat_xhat /= dd;
      if (need_x) {
        auto gx = t.grad_slot(x).row(r);
        for (std::size_t j = 0; j < d; ++j) gx[j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
      }
      if (need_gain) {
        Tensor& gg = t.grad_slot(gain);
        for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xhat[j];
      }
      if (need_bias) {
        Tensor& gb = t.grad_slot(bias);
        for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
      }
    }
  });
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = table.value();
  require_matrix(tv, "embedding");
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw std::out_of_range("embedding id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    }
    const auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return table.tape->record(std::move(out), {table},
                            [table, idv = std::move(idv)](Tape& t, const Tensor& g, const Tensor&) {
                              Tensor& gt = t.grad_slot(table);
                              for (std::size_t i = 0; i < idv.size(); ++i) {
                                auto dst = gt.row(static_cast<std::size_t>(idv[i]));
                                const auto src = g.row(i);
                                for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                              }
                            });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record(Tensor({1}, std::vector<double>{s}), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_slot(a);
    for (auto& v : ga.data()) v += g[0];
  });
}

Var masked_cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t pad_id) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "masked_cross_entropy");
  if (targets.size() != lv.rows()) {
    throw DimensionError("masked_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(lv.shape()));
  }
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == pad_id) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= lv.cols()) {
      throw std::out_of_range("target id " + std::to_string(targets[r]) + " outside vocabulary of " +
                              std::to_string(lv.cols()));
    }
    const auto row = lv.row(r);
    total += log_sum_exp(row) - row[static_cast<std::size_t>(targets[r])];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("masked_cross_entropy: every target is padding");
  const double n = static_cast<double>(count);
  std::vector<std::int32_t> tv(targets.begin(), targets.end());
  return logits.tape->record(
      Tensor({1}, std::vector<double>{total / n}), {logits},
      [logits, tv = std::move(tv), pad_id, n](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& lv = t.value(logits);
        Tensor& gl = t.grad_slot(logits);
        const double w = g[0] / n;
        for (std::size_t r = 0; r < tv.size(); ++r) {
          if (tv[r] == pad_id) continue;
          const auto row = lv.row(r);
          const double lse = log_sum_exp(row);
          auto out = gl.row(r);
          for (std::size_t c = 0; c < row.size(); ++c) out[c] += w * std::exp(row[c] - lse);
          out[static_cast<std::size_t>(tv[r])] -= w;
        }
      });
}

}  // namespace ag

}  // namespace psyt
