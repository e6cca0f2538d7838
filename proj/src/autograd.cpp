#include "oslo/autograd.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace oslo {

const Matrix& Var::value() const {
  if (!tape_) throw std::logic_error("value() on an empty Var");
  return tape_->value(id_);
}

const Matrix& Var::grad() const {
  if (!tape_) throw std::logic_error("grad() on an empty Var");
  return tape_->grad(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::logic_error(fmt::format("scalar() on a {}x{} value", v.rows(), v.cols()));
  return v(0, 0);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Matrix value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::constant_ref(const Matrix& value) {
  Node n;
  n.external = &value;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.external = &p.value;
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::leaf(Matrix value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  n.keep_grad = true;
  return push(std::move(n));
}

Var Tape::record(Matrix value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape_ != this) throw std::logic_error("operation mixes Vars from different tapes");
    n.inputs.push_back(v.id_);
    n.requires_grad = n.requires_grad || nodes_[static_cast<size_t>(v.id_)].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Matrix& Tape::value(int id) const {
  const Node& n = nodes_.at(static_cast<size_t>(id));
  return n.external ? *n.external : n.owned;
}

const Matrix& Tape::grad(int id) const { return nodes_.at(static_cast<size_t>(id)).grad; }

void Tape::backward(Var root) {
  if (root.tape_ != this) throw std::logic_error("backward() on a Var from another tape");
  Node& r = nodes_[static_cast<size_t>(root.id_)];
  if (value(root.id_).size() != 1) throw std::logic_error("backward() root must be a scalar");
  if (!r.requires_grad) return;
  r.grad = Matrix::Ones(1, 1);

  std::vector<Matrix> grad_in;
  for (int id = root.id_; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param) {
      n.param->grad += n.grad;
    }
    if (n.backward) {
      grad_in.assign(n.inputs.size(), Matrix());
      n.backward(n.grad, *this, grad_in);
      for (size_t i = 0; i < n.inputs.size(); ++i) {
        if (grad_in[i].size() == 0) continue;
        Node& in = nodes_[static_cast<size_t>(n.inputs[i])];
        if (!in.requires_grad) continue;
        if (in.grad.size() == 0) {
          in.grad = std::move(grad_in[i]);
        } else {
          in.grad += grad_in[i];
        }
      }
    }
    if (!n.keep_grad && id != root.id_) {
      n.grad.resize(0, 0);
    }
  }
}

namespace ag {
namespace {

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw std::invalid_argument(fmt::format("{}: {}", op, what));
}

std::string shape(const Matrix& m) { return fmt::format("{}x{}", m.rows(), m.cols()); }

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("operation on an empty Var");
  return *a.tape();
}

}  // namespace

Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  require(av.cols() == bv.rows(), "matmul", shape(av) + " * " + shape(bv));
  int ia = a.id(), ib = b.id();
  return tape_of(a).record(av * bv, {a, b}, [ia, ib](const Matrix& g, const Tape& t, std::vector<Matrix>& gi) {
    if (t.requires_grad(ia)) gi[0] = g * t.value(ib).transpose();
    if (t.requires_grad(ib)) gi[1] = t.value(ia).transpose() * g;
  });
}

Var linear(Var x, Var w, Var b) {
  const Matrix& xv = x.value();
  const Matrix& wv = w.value();
  require(xv.cols() == wv.cols(), "linear", "input " + shape(xv) + " vs weight " + shape(wv));
  Matrix out = xv * wv.transpose();
  std::vector<Var> inputs{x, w};
  if (b.valid()) {
    const Matrix& bv = b.value();
    require(bv.rows() == 1 && bv.cols() == wv.rows(), "linear", "bias " + shape(bv) + " vs weight " + shape(wv));
    out.rowwise() += bv.row(0);
    inputs.push_back(b);
  }
  int ix = x.id(), iw = w.id();
  bool has_bias = b.valid();
  int ib = has_bias ? b.id() : -1;
  return tape_of(x).record(std::move(out), std::move(inputs),
                           [ix, iw, ib, has_bias](const Matrix& g, const Tape& t, std::vector<Matrix>& gi) {
                             if (t.requires_grad(ix)) gi[0] = g * t.value(iw);
                             if (t.requires_grad(iw)) gi[1] = g.transpose() * t.value(ix);
                             if (has_bias && t.requires_grad(ib)) gi[2] = g.colwise().sum();
                           });
}

Var add(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add", shape(a.value()) + " + " + shape(b.value()));
  return tape_of(a).record(a.value() + b.value(), {a, b}, [](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
    gi[0] = g;
    gi[1] = g;
  });
}

Var sub(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub", shape(a.value()) + " - " + shape(b.value()));
  return tape_of(a).record(a.value() - b.value(), {a, b}, [](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
    gi[0] = g;
    gi[1] = -g;
  });
}

Var mul(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul", shape(a.value()) + " .* " + shape(b.value()));
  int ia = a.id(), ib = b.id();
  return tape_of(a).record(a.value().cwiseProduct(b.value()), {a, b},
                           [ia, ib](const Matrix& g, const Tape& t, std::vector<Matrix>& gi) {
                             if (t.requires_grad(ia)) gi[0] = g.cwiseProduct(t.value(ib));
                             if (t.requires_grad(ib)) gi[1] = g.cwiseProduct(t.value(ia));
                           });
}

Var scale(Var a, double s) {
  return tape_of(a).record(a.value() * s, {a},
                           [s](const Matrix& g, const Tape&, std::vector<Matrix>& gi) { gi[0] = g * s; });
}

Var add_scalar(Var a, double s) {
  Matrix out = a.value().array() + s;
  return tape_of(a).record(std::move(out), {a}, [](const Matrix& g, const Tape&, std::vector<Matrix>& gi) { gi[0] = g; });
}

Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row", shape(a.value()) + " + row " + shape(row.value()));
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return tape_of(a).record(std::move(out), {a, row}, [](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
    gi[0] = g;
    gi[1] = g.colwise().sum();
  });
}

Var mul_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "mul_row", shape(a.value()) + " .* row " + shape(row.value()));
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  int ia = a.id(), ir = row.id();
  return tape_of(a).record(std::move(out), {a, row}, [ia, ir](const Matrix& g, const Tape& t, std::vector<Matrix>& gi) {
    if (t.requires_grad(ia)) gi[0] = g.array().rowwise() * t.value(ir).row(0).array();
    if (t.requires_grad(ir)) gi[1] = g.cwiseProduct(t.value(ia)).colwise().sum();
  });
}

Var transpose(Var a) {
  return tape_of(a).record(a.value().transpose(), {a},
                           [](const Matrix& g, const Tape&, std::vector<Matrix>& gi) { gi[0] = g.transpose(); });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  Eigen::Index cols = parts[0].cols(), rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == cols, "concat_rows", "column mismatch " + shape(p.value()));
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    offsets.push_back(r);
    if (p.rows() > 0) out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  std::vector<Eigen::Index> counts;
  for (const Var& p : parts) counts.push_back(p.rows());
  return tape_of(parts[0]).record(std::move(out), std::move(inputs),
                                  [offsets, counts](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
                                    for (size_t i = 0; i < offsets.size(); ++i) {
                                      if (counts[i] > 0) gi[i] = g.middleRows(offsets[i], counts[i]);
                                    }
                                  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, "concat_cols", "row mismatch " + shape(p.value()));
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets, counts;
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    offsets.push_back(c);
    counts.push_back(p.cols());
    if (p.cols() > 0) out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), std::move(inputs),
                                  [offsets, counts](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
                                    for (size_t i = 0; i < offsets.size(); ++i) {
                                      if (counts[i] > 0) gi[i] = g.middleCols(offsets[i], counts[i]);
                                    }
                                  });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows",
          fmt::format("[{}, {}) of {}", begin, begin + count, shape(a.value())));
  Eigen::Index rows = a.rows(), cols = a.cols();
  return tape_of(a).record(a.value().middleRows(begin, count), {a},
                           [begin, count, rows, cols](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
                             gi[0] = Matrix::Zero(rows, cols);
                             gi[0].middleRows(begin, count) = g;
                           });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.cols(), "slice_cols",
          fmt::format("[{}, {}) of {}", begin, begin + count, shape(a.value())));
  Eigen::Index rows = a.rows(), cols = a.cols();
  return tape_of(a).record(a.value().middleCols(begin, count), {a},
                           [begin, count, rows, cols](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
                             gi[0] = Matrix::Zero(rows, cols);
                             gi[0].middleCols(begin, count) = g;
                           });
}

namespace {

Matrix reshape_row_major(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  Matrix out(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j, ++k) {
      out(k / cols, k % cols) = m(i, j);
    }
  }
  return out;
}

}  // namespace

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  require(rows * cols == a.value().size(), "reshape", fmt::format("{} to {}x{}", shape(a.value()), rows, cols));
  Eigen::Index r0 = a.rows(), c0 = a.cols();
  return tape_of(a).record(reshape_row_major(a.value(), rows, cols), {a},
                           [r0, c0](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
                             gi[0] = reshape_row_major(g, r0, c0);
                           });
}

Var relu(Var a) {
  int ia = a.id();
  return tape_of(a).record(a.value().cwiseMax(0.0), {a}, [ia](const Matrix& g, const Tape& t, std::vector<Matrix>& gi) {
    gi[0] = (t.value(ia).array() > 0.0).select(g, 0.0);
  });
}

Var quick_gelu(Var a) {
  static constexpr double k = 1.702;
  Matrix s = (1.0 + (-k * a.value().array()).exp()).inverse().matrix();
  Matrix out = a.value().cwiseProduct(s);
  int ia = a.id();
  return tape_of(a).record(std::move(out), {a}, [ia, s](const Matrix& g, const Tape& t, std::vector<Matrix>& gi) {
    const auto x = t.value(ia).array();
    const auto sa = s.array();
    gi[0] = (g.array() * (sa + k * x * sa * (1.0 - sa))).matrix();
  });
}

Var layer_norm_rows(Var a, double eps) {
  const Matrix& x = a.value();
  const Eigen::Index n = x.cols();
  require(n > 0, "layer_norm_rows", "zero-width rows");
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mu = x.row(i).mean();
    double var = (x.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat;
  return tape_of(a).record(std::move(out), {a}, [xhat, inv_std](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
    Matrix gx(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      double gm = g.row(i).mean();
      double gxm = g.row(i).cwiseProduct(xhat.row(i)).mean();
      gx.row(i) = inv_std(i) * (g.row(i).array() - gm - xhat.row(i).array() * gxm);
    }
    gi[0] = std::move(gx);
  });
}

namespace {

Matrix softmax_of(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mx = x.row(i).maxCoeff();
    RowVector e = (x.row(i).array() - mx).exp();
    y.row(i) = e / e.sum();
  }
  return y;
}

}  // namespace

Var softmax_rows(Var a) {
  require(a.cols() > 0, "softmax_rows", "zero-width rows");
  Matrix y = softmax_of(a.value());
  Matrix out = y;
  return tape_of(a).record(std::move(out), {a}, [y](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    gi[0] = y.cwiseProduct(g - dot.replicate(1, g.cols()));
  });
}

Var log_softmax_rows(Var a) {
  require(a.cols() > 0, "log_softmax_rows", "zero-width rows");
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mx = x.row(i).maxCoeff();
    double lse = mx + std::log((x.row(i).array() - mx).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  Matrix y = out.array().exp().matrix();
  return tape_of(a).record(std::move(out), {a}, [y](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
    Eigen::VectorXd gs = g.rowwise().sum();
    gi[0] = g - y.cwiseProduct(gs.replicate(1, g.cols()));
  });
}

Var l2_normalize_rows(Var a) {
  const Matrix& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm();
  // NaN rows pass through so divergence surfaces as a non-finite loss.
  require((norms.array() != 0.0).all(), "l2_normalize_rows", "zero-norm row");
  Matrix y = x.array().colwise() / norms.array();
  Matrix out = y;
  return tape_of(a).record(std::move(out), {a}, [y, norms](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix gx = g - y.cwiseProduct(dot.replicate(1, g.cols()));
    gi[0] = gx.array().colwise() / norms.array();
  });
}

Var sum(Var a) {
  Eigen::Index r = a.rows(), c = a.cols();
  return tape_of(a).record(Matrix::Constant(1, 1, a.value().sum()), {a},
                           [r, c](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
                             gi[0] = Matrix::Constant(r, c, g(0, 0));
                           });
}

Var mean(Var a) {
  Eigen::Index r = a.rows(), c = a.cols();
  require(r * c > 0, "mean", "empty input");
  double n = static_cast<double>(r * c);
  return tape_of(a).record(Matrix::Constant(1, 1, a.value().mean()), {a},
                           [r, c, n](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
                             gi[0] = Matrix::Constant(r, c, g(0, 0) / n);
                           });
}

Var mean_rows(Var a) {
  Eigen::Index r = a.rows();
  require(r > 0, "mean_rows", "no rows");
  Matrix out = a.value().colwise().mean();
  return tape_of(a).record(std::move(out), {a}, [r](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
    gi[0] = g.replicate(r, 1) / static_cast<double>(r);
  });
}

Var element(Var a, Eigen::Index r, Eigen::Index c) {
  require(r >= 0 && c >= 0 && r < a.rows() && c < a.cols(), "element",
          fmt::format("({}, {}) of {}", r, c, shape(a.value())));
  Eigen::Index rows = a.rows(), cols = a.cols();
  return tape_of(a).record(Matrix::Constant(1, 1, a.value()(r, c)), {a},
                           [r, c, rows, cols](const Matrix& g, const Tape&, std::vector<Matrix>& gi) {
                             gi[0] = Matrix::Zero(rows, cols);
                             gi[0](r, c) = g(0, 0);
                           });
}

Var detach(Var a) { return tape_of(a).constant(a.value()); }

Var cosine(Var a, Var b) {
  require(a.rows() == 1 && b.rows() == 1 && a.cols() == b.cols(), "cosine",
          shape(a.value()) + " vs " + shape(b.value()));
  return sum(mul(l2_normalize_rows(a), l2_normalize_rows(b)));
}

}  // namespace ag
}  // namespace oslo
