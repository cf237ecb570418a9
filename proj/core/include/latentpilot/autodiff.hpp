#pragma once

// Tape-based reverse-mode automatic differentiation over dense matrices.
//
// Every value is an Eigen matrix laid out batch-major (rows = batch
// elements, columns = features). Nodes are appended to a Tape in creation
// order, which is already a topological order, so backward() is a single
// reverse sweep. A node only records a backward closure when at least one
// of its parents requires a gradient; constants and stop_gradient() results
// therefore cut the graph and leave upstream gradients identically zero.

#include <Eigen/Dense>

#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace lp::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  /// Convenience for 1x1 results.
  double scalar() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A value that never receives a gradient.
  Var constant(Matrix value);
  /// A leaf that accumulates a gradient (parameters, inputs under test).
  Var leaf(Matrix value);

  /// Records an op result. `parents` decides whether the node is tracked.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var record(Matrix value, std::span<const Var> parents, Backward backward);

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 loss and sweeps backwards.
  /// May be called once per tape.
  void backward(Var loss);

  /// Gradient of the last backward() target w.r.t. `v`; zeros if none flowed.
  Matrix grad(Var v) const;

  const Matrix& value(int id) const { return nodes_[id].value; }
  /// Upstream gradient of node `id` during the backward sweep.
  const Matrix& upstream(int id) const { return nodes_[id].grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Adds `g` into the gradient of `target` if that node is tracked.
  void accumulate(Var target, const Matrix& g);
  template <typename Expr>
  void accumulate(Var target, const Eigen::MatrixBase<Expr>& g) {
    accumulate(target, Matrix(g));
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  bool swept_ = false;
};

// ---- elementwise and linear-algebra ops -----------------------------------

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);  // Hadamard product
Var operator/(Var a, Var b);  // Hadamard quotient
Var operator-(Var a);
Var operator*(Var a, double c);
Var operator*(double c, Var a);
Var operator+(Var a, double c);
Var operator+(double c, Var a);
Var operator-(Var a, double c);
Var operator-(double c, Var a);

/// a (n x k) times b (k x m).
Var matmul(Var a, Var b);
/// Adds a 1 x n row to every row of a (bias broadcast).
Var add_row(Var a, Var row);
/// Multiplies every column of a (B x n) by the column vector c (B x 1).
Var mul_col(Var a, Var c);

Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var sqrt(Var a);

/// Sum of all entries, 1 x 1.
Var sum(Var a);
/// Mean of all entries, 1 x 1.
Var mean(Var a);
/// Row-wise sum, B x 1.
Var sum_cols(Var a);

Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
/// Tiles a 1 x n row into `rows` x n.
Var broadcast_rows(Var row, Eigen::Index rows);

/// Blockwise weighted sum: out(b, k) = sum_i alpha(b, i) * y(b, i * n + k),
/// where alpha is B x m and y is B x (m * n).
Var mix_blocks(Var alpha, Var y);

/// Identity in the forward pass; severs gradient flow.
Var stop_gradient(Var a);

}  // namespace lp::ad
