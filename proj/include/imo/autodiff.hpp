#pragma once

#include <functional>
#include <string_view>
#include <vector>

#include "imo/tensor.hpp"

/// Reverse-mode automatic differentiation over float64 tensors.
///
/// A Tape records every op whose inputs require gradients. Values live in
/// tape slots addressed by `Var` handles; parameters are bound by pointer so
/// that `backward` accumulates straight into `Parameter::grad`.
namespace imo::ad {

enum class OpKind {
  Leaf,
  MatMul,
  MatMulNT,
  Transpose,
  Reshape,
  Add,
  Sub,
  Mul,
  Scale,
  Exp,
  Log,
  Relu,
  Sigmoid,
  Abs,
  Softmax,
  LogSoftmax,
  LayerNorm,
  Gather,
  Concat,
  SliceCols,
  Sum,
  Mean,
  Cosine,
  UnitStep,
};

std::string_view op_name(OpKind kind);

/// Derivative estimator used by `unit_step` on the backward pass.
enum class Surrogate {
  LongTailed,  ///< 2-4|t| on |t|<=0.4, 0.4 on 0.4<=|t|<=1, else 0
  ClippedSTE,  ///< 1 on |t|<=1, else 0
};

/// Backward multiplier of the long-tailed estimator. At |t| = 1 the inclusive
/// middle branch applies, so the factor is 0.4.
double long_tailed_factor(double t);
double clipped_ste_factor(double t);
double surrogate_factor(Surrogate s, double t);

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  struct Node;
  using BackwardFn = std::function<void(Tape&, const Node&)>;

  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    int output;
    BackwardFn backward;
  };

  /// With `record == false` ops compute values only (evaluation mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf owning its own gradient buffer, readable through `grad()`.
  Var leaf(Tensor value, bool requires_grad = true);
  /// Leaf bound to a parameter; requires grad iff the parameter is trainable.
  Var param(Parameter& p);

  void backward(Var loss);

  const Tensor& value(int id) const { return slots_[id].get(); }
  bool requires_grad(int id) const { return slots_[id].requires_grad; }
  /// Gradient of a `leaf()` slot after backward.
  Tensor grad(Var v) const;

  bool recording() const { return record_; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  /// Per-node visit counter from the last backward pass.
  const std::vector<int>& visit_counts() const { return visits_; }

  // Used by op implementations.
  Var record(OpKind kind, std::vector<int> inputs, Tensor out, BackwardFn fn);
  /// Gradient buffer for slot `id`, or nullptr when it does not require grad.
  double* grad_ptr(int id);
  const std::vector<double>& out_grad(const Node& n) const { return slots_[n.output].grad; }

 private:
  struct Slot {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    const Tensor* borrowed = nullptr;

    const Tensor& get() const { return borrowed ? *borrowed : value; }
  };

  std::vector<Slot> slots_;
  std::vector<Node> nodes_;
  std::vector<int> visits_;
  bool record_;
  bool consumed_ = false;
};

// Matrix ops on rank-2 operands.
Var matmul(Var a, Var b);
/// a * b^T without materializing the transpose.
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

/// Elementwise ops. `b` may match `a`, be a trailing-axes suffix of `a`'s
/// shape (broadcast over leading axes), or hold a single element.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);

Var exp(Var a);
Var log(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var abs(Var a);

/// Forward: 1 where t >= 0 else 0. Backward multiplies by the surrogate factor.
Var unit_step(Var t, Surrogate s = Surrogate::LongTailed);

Var softmax(Var a);
Var log_softmax(Var a);
Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Rows of `table` selected by `ids`. Throws InputError on an out-of-range id.
Var gather(Var table, const std::vector<int>& ids);
/// Concatenation along the last axis; leading shapes must agree.
Var concat(const std::vector<Var>& parts);
Var slice_cols(Var a, std::size_t begin, std::size_t count);

Var sum(Var a);
Var mean(Var a);
/// Cosine similarity of two equal-length tensors. A zero-norm operand
/// yields 0 with no gradient.
Var cosine(Var a, Var b);

}  // namespace imo::ad
