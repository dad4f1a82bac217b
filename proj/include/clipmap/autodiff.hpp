#pragma once

// Reverse-mode differentiation over an explicit tape.
//
// A Tape records operations in execution order; every op's inputs already sit
// on the tape, so the record order is a topological order and backward() is a
// single reverse sweep. Parameters enter through Tape::leaf(); after backward()
// their gradient is *added* to Tensor::grad (callers zero between steps).
// A tape supports exactly one backward(); a second call throws.
//
// Vars are lightweight handles into their tape and must not outlive it.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "clipmap/tensor.hpp"

namespace clipmap::ad {

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Called once during backward with the tape and the id of the node whose
  // output gradient is final.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Binds a parameter. Differentiable iff param.requires_grad().
  Var leaf(Tensor& param);
  Var constant(Tensor value);

  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient of an intermediate node (empty span when never reached).
  std::span<const Real> grad(Var v) const { return nodes_[v.id()].grad; }

  // Op-author interface.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  std::span<const Real> out_grad(std::size_t id) const { return nodes_[id].grad; }
  // Gradient buffer of an input, allocated on demand; null if the input does
  // not participate in differentiation.
  Real* grad_sink(std::size_t id);
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    Tensor value;
    std::vector<Real> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// All binary ops require operands from the same tape.

Var matmul(Var a, Var b);     // [m×k]·[k×n]
Var matmul_nt(Var a, Var b);  // [m×k]·[n×k]ᵀ
Var transpose(Var a);
// x[N×in]·wᵀ + bias; `bias` may be an invalid Var.
Var linear(Var x, Var w, Var bias);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real s);
// a · s for a learnable scalar s.
Var scale_by(Var a, Var s);
// x[N×D] + p[T×D] where row r receives p[r mod T].
Var add_periodic_rows(Var x, Var p);

Var gelu(Var x);
Var layer_norm(Var x, Var gamma, Var beta, Real eps);
Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads, bool causal);

Var gather_rows(Var table, std::vector<std::size_t> rows);
// Inserts `row` [1×D] at the head of every group of `group` rows of x.
Var prepend_rows(Var x, Var row, std::size_t group);
Var l2_normalize_rows(Var x);
// min(exp(s), cap), gradient zero where clamped.
Var exp_clamped(Var s, Real cap);

Var sum(Var x);
Var mean(Var x);
Var softmax_rows(Var x);
Var reshape(Var x, Shape shape);
// Stacks blocks of equal element count as rows of an [n × numel] matrix.
Var stack_flat(const std::vector<Var>& blocks);
// Row `row` of x reshaped to `shape`.
Var take_row(Var x, std::size_t row, Shape shape);

// Mean over rows of −Σ_j target[i,j]·log_softmax(logits)[i,j]. Target rows
// must each sum to 1 within 1e-9.
Var cross_entropy_soft(Var logits, const Tensor& target_probs);
// Mean hard-label cross-entropy; labels[i] is the class of row i.
Var cross_entropy_labels(Var logits, std::span<const std::size_t> labels);

// Non-differentiable helpers on plain tensors.
Tensor softmax_rows(const Tensor& x);
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace clipmap::ad
