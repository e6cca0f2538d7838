#include <gtest/gtest.h>

#include <functional>
#include <stdexcept>

#include "oslo/autograd.hpp"
#include "test_support.hpp"

using namespace oslo;
using oslo::testing::check_gradient;
using oslo::testing::random_matrix;

namespace {

using UnaryOp = std::function<Var(Var)>;
using BinaryOp = std::function<Var(Var, Var)>;

// Projects the op output onto a fixed random weighting so every output entry
// contributes to the scalar.
double weighted(const Matrix& out, const Matrix& w) { return out.cwiseProduct(w).sum(); }

void expect_unary_gradient(const UnaryOp& op, Matrix x, double tol = 1e-6) {
  Rng rng(11);
  Matrix w;
  {
    Tape probe;
    const Matrix out = op(probe.constant(x)).value();
    w = random_matrix(rng, out.rows(), out.cols());
  }
  Parameter p("x", x);
  {
    Tape tape;
    Var y = op(tape.parameter(p));
    tape.backward(ag::sum(ag::mul(y, tape.constant(w))));
  }
  auto f = [&] {
    Tape tape;
    return weighted(op(tape.constant(p.value)).value(), w);
  };
  auto r = check_gradient(p.value, p.grad, f);
  EXPECT_LT(r.max_rel_error, tol);
}

void expect_binary_gradient(const BinaryOp& op, Matrix a, Matrix b, double tol = 1e-6) {
  Rng rng(12);
  Matrix w;
  {
    Tape probe;
    const Matrix out = op(probe.constant(a), probe.constant(b)).value();
    w = random_matrix(rng, out.rows(), out.cols());
  }
  Parameter pa("a", a), pb("b", b);
  {
    Tape tape;
    Var y = op(tape.parameter(pa), tape.parameter(pb));
    tape.backward(ag::sum(ag::mul(y, tape.constant(w))));
  }
  auto f = [&] {
    Tape tape;
    return weighted(op(tape.constant(pa.value), tape.constant(pb.value)).value(), w);
  };
  EXPECT_LT(check_gradient(pa.value, pa.grad, f).max_rel_error, tol);
  EXPECT_LT(check_gradient(pb.value, pb.grad, f).max_rel_error, tol);
}

}  // namespace

TEST(Autograd, MatmulAndLinear) {
  Rng rng(1);
  expect_binary_gradient(ag::matmul, random_matrix(rng, 3, 4), random_matrix(rng, 4, 2));
  expect_binary_gradient([](Var x, Var w) { return ag::linear(x, w); }, random_matrix(rng, 3, 4),
                         random_matrix(rng, 5, 4));
  Rng r2(2);
  Matrix bias = random_matrix(r2, 1, 5);
  expect_binary_gradient(
      [&](Var x, Var w) { return ag::linear(x, w, x.tape()->constant(bias)); }, random_matrix(rng, 3, 4),
      random_matrix(rng, 5, 4));
  expect_binary_gradient(
      [&](Var b, Var w) { return ag::linear(w.tape()->constant(Matrix::Ones(2, 4)), w, b); },
      random_matrix(rng, 1, 5), random_matrix(rng, 5, 4));
}

TEST(Autograd, Elementwise) {
  Rng rng(3);
  expect_binary_gradient(ag::add, random_matrix(rng, 2, 3), random_matrix(rng, 2, 3));
  expect_binary_gradient(ag::sub, random_matrix(rng, 2, 3), random_matrix(rng, 2, 3));
  expect_binary_gradient(ag::mul, random_matrix(rng, 2, 3), random_matrix(rng, 2, 3));
  expect_binary_gradient(ag::add_row, random_matrix(rng, 4, 3), random_matrix(rng, 1, 3));
  expect_binary_gradient(ag::mul_row, random_matrix(rng, 4, 3), random_matrix(rng, 1, 3));
  expect_unary_gradient([](Var a) { return ag::scale(a, -2.5); }, random_matrix(rng, 2, 3));
  expect_unary_gradient([](Var a) { return ag::add_scalar(a, 4.0); }, random_matrix(rng, 2, 3));
  expect_unary_gradient(ag::transpose, random_matrix(rng, 2, 3));
}

TEST(Autograd, Activations) {
  Rng rng(4);
  Matrix x = random_matrix(rng, 3, 5);
  // Keep relu inputs away from the kink.
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.3;
  }
  expect_unary_gradient(ag::relu, x);
  expect_unary_gradient(ag::quick_gelu, random_matrix(rng, 3, 5));
  expect_unary_gradient([](Var a) { return ag::layer_norm_rows(a); }, random_matrix(rng, 3, 5));
  expect_unary_gradient(ag::softmax_rows, random_matrix(rng, 3, 5));
  expect_unary_gradient(ag::log_softmax_rows, random_matrix(rng, 3, 5));
  expect_unary_gradient(ag::l2_normalize_rows, random_matrix(rng, 3, 5));
}

TEST(Autograd, ShapeOps) {
  Rng rng(5);
  expect_binary_gradient(
      [](Var a, Var b) {
        std::vector<Var> parts{a, b, a};
        return ag::concat_rows(parts);
      },
      random_matrix(rng, 2, 3), random_matrix(rng, 1, 3));
  expect_binary_gradient(
      [](Var a, Var b) {
        std::vector<Var> parts{b, a};
        return ag::concat_cols(parts);
      },
      random_matrix(rng, 2, 3), random_matrix(rng, 2, 2));
  expect_unary_gradient([](Var a) { return ag::slice_rows(a, 1, 2); }, random_matrix(rng, 4, 3));
  expect_unary_gradient([](Var a) { return ag::slice_cols(a, 1, 1); }, random_matrix(rng, 4, 3));
  expect_unary_gradient([](Var a) { return ag::reshape(a, 3, 4); }, random_matrix(rng, 2, 6));
  expect_unary_gradient(ag::mean_rows, random_matrix(rng, 4, 3));
  expect_unary_gradient(ag::sum, random_matrix(rng, 4, 3));
  expect_unary_gradient(ag::mean, random_matrix(rng, 4, 3));
  expect_unary_gradient([](Var a) { return ag::element(a, 2, 1); }, random_matrix(rng, 4, 3));
  expect_binary_gradient(ag::cosine, random_matrix(rng, 1, 6), random_matrix(rng, 1, 6));
}

TEST(Autograd, ReshapeIsRowMajor) {
  Tape tape;
  Matrix a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  Matrix r = ag::reshape(tape.constant(a), 3, 2).value();
  Matrix expect(3, 2);
  expect << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(r, expect);
}

TEST(Autograd, DetachBlocksGradient) {
  Parameter p("x", Matrix::Constant(1, 2, 2.0));
  Tape tape;
  Var x = tape.parameter(p);
  tape.backward(ag::sum(ag::add(ag::mul(ag::detach(x), x), x)));
  // d/dx (c*x + x) with c = 2 held fixed.
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 3.0);
}

TEST(Autograd, GradientAccumulatesAcrossTapes) {
  Parameter p("x", Matrix::Constant(1, 1, 1.5));
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    tape.backward(ag::scale(tape.parameter(p), 2.0));
  }
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 4.0);
  p.zero_grad();
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 0.0);
}

TEST(Autograd, LeafKeepsGradient) {
  Tape tape;
  Var x = tape.leaf(Matrix::Constant(2, 2, 1.0));
  tape.backward(ag::sum(ag::scale(x, 3.0)));
  EXPECT_EQ(x.grad(), Matrix::Constant(2, 2, 3.0));
}

TEST(Autograd, ShapeErrorsThrow) {
  Tape tape;
  Var a = tape.constant(Matrix::Zero(2, 3));
  Var b = tape.constant(Matrix::Zero(2, 2));
  EXPECT_THROW(ag::matmul(a, a), std::invalid_argument);
  EXPECT_THROW(ag::add(a, b), std::invalid_argument);
  EXPECT_THROW(ag::slice_rows(a, 1, 5), std::invalid_argument);
  EXPECT_THROW(ag::reshape(a, 4, 2), std::invalid_argument);
  EXPECT_THROW(ag::l2_normalize_rows(a), std::invalid_argument);
  EXPECT_THROW(tape.backward(a), std::logic_error);
}

TEST(Autograd, SoftmaxIsStableForLargeLogits) {
  Tape tape;
  Matrix x(1, 3);
  x << 1000.0, 1001.0, 999.0;
  Matrix s = ag::softmax_rows(tape.constant(x)).value();
  EXPECT_NEAR(s.sum(), 1.0, 1e-12);
  EXPECT_TRUE(s.allFinite());
  Matrix ls = ag::log_softmax_rows(tape.constant(x)).value();
  EXPECT_TRUE(ls.allFinite());
}
