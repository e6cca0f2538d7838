#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation in creation order, which is already a
// topological order, so backward() is a single reverse sweep. Frozen arrays
// enter the tape by reference (constant_ref) and never receive gradients;
// trainable arrays enter through parameter() and have their gradient
// accumulated into Parameter::grad.

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace oslo {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) { zero_grad(); }

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // grad_in[i] is left empty when input i needs no gradient.
  using BackwardFn =
      std::function<void(const Matrix& grad_out, const Tape& tape, std::vector<Matrix>& grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // The referenced matrix must outlive the tape.
  Var constant_ref(const Matrix& value);
  Var parameter(Parameter& p);
  // Leaf whose gradient is kept on the tape (read it back with Var::grad()).
  Var leaf(Matrix value);

  Var record(Matrix value, std::vector<Var> inputs, BackwardFn backward);

  // Seeds d(root)/d(root) = 1; root must be 1x1.
  void backward(Var root);

  const Matrix& value(int id) const;
  const Matrix& grad(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix grad;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool keep_grad = false;
    Parameter* param = nullptr;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
};

// Differentiable operations. All shapes are checked and mismatches throw
// std::invalid_argument.
namespace ag {

Var matmul(Var a, Var b);
// x * W^T + b, b is a 1 x out row broadcast to every row (may be invalid).
Var linear(Var x, Var w, Var b = {});
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);
Var transpose(Var a);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
// Row-major reshape: element (i, j) of the result is element i*cols + j of
// the row-major flattening of a.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var relu(Var a);
Var quick_gelu(Var a);
Var layer_norm_rows(Var a, double eps = 1e-5);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var l2_normalize_rows(Var a);
Var sum(Var a);
Var mean(Var a);
Var mean_rows(Var a);
Var element(Var a, Eigen::Index r, Eigen::Index c);
Var detach(Var a);
// Cosine similarity of two 1 x n rows, returned as 1x1.
Var cosine(Var a, Var b);

}  // namespace ag

}  // namespace oslo
