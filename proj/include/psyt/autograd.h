#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "psyt/tensor.h"

namespace psyt {

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// node list backwards is a valid topological order for backpropagation.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  // Leaf whose gradient is kept on the tape (read it back with grad()).
  Var variable(Tensor value);
  // Leaf that refers to an external tensor; backward() adds its gradient into
  // *grad_sink. The referenced tensor must outlive the tape.
  Var parameter(const Tensor& value, Tensor* grad_sink);

  // Appends an op result. `fn` runs during backward() only when some parent
  // requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward fn);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  // Gradient accumulated so far; an all-zero tensor when nothing flowed in.
  Tensor grad(Var v) const;
  // Mutable gradient buffer, zero-initialised on first access.
  Tensor& grad_slot(Var v);

  // Seeds d(root)/d(root) = 1 and propagates. root must hold one element.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor grad;
    Backward backward;
    Tensor* sink = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool record_;
};

// Differentiable ops. All operands must live on the same tape.
namespace ag {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
// a + bias broadcast over rows; bias has a.cols() elements.
Var add_row(Var a, Var bias);
// a + c for a constant tensor c of the same shape.
Var add_constant(Var a, const Tensor& c);
Var scale(Var a, double s);
Var relu(Var a);
Var transpose(Var a);
// Softmax over the last axis.
Var softmax(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps);
// Row gather: out[i] = table[ids[i]].
Var embedding(Var table, std::span<const std::int32_t> ids);
Var linear(Var x, Var weight, Var bias);
Var sum(Var a);
// Mean over positions whose target != pad_id of -log softmax(logits)[target].
Var masked_cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t pad_id);

}  // namespace ag

// Numerically stable log(sum(exp(row))).
double log_sum_exp(std::span<const double> row);

}  // namespace psyt
