#include "latentpilot/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace lp::ad {

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("autodiff: use of an unbound Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("autodiff: Vars from different tapes");
  return tape_of(a);
}

// Numerically stable log(1 + exp(x)).
double softplus_scalar(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::invalid_argument("Var::scalar: not a 1x1 value");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), true, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward) {
  bool tracked = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw std::invalid_argument("autodiff: Vars from different tapes");
    tracked = tracked || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Matrix(), tracked,
                        tracked ? std::move(backward) : Backward()});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(Var target, const Matrix& g) {
  Node& n = nodes_[target.id()];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  if (swept_) throw std::logic_error("Tape::backward: tape already swept");
  if (loss.tape() != this) throw std::invalid_argument("Tape::backward: foreign Var");
  if (loss.value().size() != 1) throw std::invalid_argument("Tape::backward: loss must be 1x1");
  swept_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad = Matrix::Ones(1, 1);
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// ---- ops --------------------------------------------------------------------

Var operator+(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "add");
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, int self) {
    t.accumulate(a, t.upstream(self));
    t.accumulate(b, t.upstream(self));
  });
}

Var operator-(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "sub");
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, int self) {
    t.accumulate(a, t.upstream(self));
    t.accumulate(b, -t.upstream(self));
  });
}

Var operator*(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "mul");
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var operator/(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "div");
  return t.record(a.value().cwiseQuotient(b.value()), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    const Matrix& bv = b.value();
    if (a.requires_grad()) t.accumulate(a, g.cwiseQuotient(bv));
    if (b.requires_grad()) {
      t.accumulate(b, -g.cwiseProduct(a.value()).cwiseQuotient(bv.cwiseProduct(bv)));
    }
  });
}

Var operator-(Var a) { return a * -1.0; }

Var operator*(Var a, double c) {
  Tape& t = tape_of(a);
  return t.record(a.value() * c, {a},
                  [a, c](Tape& t, int self) { t.accumulate(a, t.upstream(self) * c); });
}

Var operator*(double c, Var a) { return a * c; }

Var operator+(Var a, double c) {
  Tape& t = tape_of(a);
  return t.record((a.value().array() + c).matrix(), {a},
                  [a](Tape& t, int self) { t.accumulate(a, t.upstream(self)); });
}

Var operator+(double c, Var a) { return a + c; }
Var operator-(Var a, double c) { return a + (-c); }
Var operator-(double c, Var a) { return (-a) + c; }

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + ")");
  }
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: row must be 1 x " + std::to_string(a.cols()));
  }
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    t.accumulate(a, g);
    if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
  });
}

Var mul_col(Var a, Var c) {
  Tape& t = tape_of(a, c);
  if (c.cols() != 1 || c.rows() != a.rows()) {
    throw std::invalid_argument("mul_col: column must be " + std::to_string(a.rows()) + " x 1");
  }
  Matrix out = a.value().array().colwise() * c.value().col(0).array();
  return t.record(std::move(out), {a, c}, [a, c](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (a.requires_grad()) {
      t.accumulate(a, Matrix(g.array().colwise() * c.value().col(0).array()));
    }
    if (c.requires_grad()) t.accumulate(c, g.cwiseProduct(a.value()).rowwise().sum());
  });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  return t.record(a.value().cwiseMax(0.0), {a}, [a](Tape& t, int self) {
    Matrix mask = (a.value().array() > 0.0).cast<double>().matrix();
    t.accumulate(a, t.upstream(self).cwiseProduct(mask));
  });
}

Var tanh(Var a) {
  Tape& t = tape_of(a);
  return t.record(a.value().array().tanh().matrix(), {a}, [a](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.accumulate(a, t.upstream(self).cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().unaryExpr([](double x) { return sigmoid_scalar(x); });
  return t.record(std::move(out), {a}, [a](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.accumulate(a, t.upstream(self).cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

Var softplus(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().unaryExpr([](double x) { return softplus_scalar(x); });
  return t.record(std::move(out), {a}, [a](Tape& t, int self) {
    Matrix d = a.value().unaryExpr([](double x) { return sigmoid_scalar(x); });
    t.accumulate(a, t.upstream(self).cwiseProduct(d));
  });
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  return t.record(a.value().array().exp().matrix(), {a}, [a](Tape& t, int self) {
    t.accumulate(a, t.upstream(self).cwiseProduct(t.value(self)));
  });
}

Var log(Var a) {
  Tape& t = tape_of(a);
  return t.record(a.value().array().log().matrix(), {a}, [a](Tape& t, int self) {
    t.accumulate(a, t.upstream(self).cwiseQuotient(a.value()));
  });
}

Var square(Var a) {
  Tape& t = tape_of(a);
  return t.record(a.value().array().square().matrix(), {a}, [a](Tape& t, int self) {
    t.accumulate(a, 2.0 * t.upstream(self).cwiseProduct(a.value()));
  });
}

Var sqrt(Var a) {
  Tape& t = tape_of(a);
  return t.record(a.value().array().sqrt().matrix(), {a}, [a](Tape& t, int self) {
    t.accumulate(a, (0.5 * t.upstream(self).array() / t.value(self).array()).matrix());
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [a](Tape& t, int self) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), t.upstream(self)(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty input");
  return sum(a) * (1.0 / n);
}

Var sum_cols(Var a) {
  Tape& t = tape_of(a);
  return t.record(a.value().rowwise().sum(), {a}, [a](Tape& t, int self) {
    t.accumulate(a, t.upstream(self).replicate(1, a.cols()));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = tape_of(parts.front());
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("concat_cols: Vars from different tapes");
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [keep](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    Eigen::Index off = 0;
    for (const Var& p : keep) {
      if (p.requires_grad()) t.accumulate(p, Matrix(g.middleCols(off, p.cols())));
      off += p.cols();
    }
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::invalid_argument("slice_cols: range out of bounds");
  }
  return t.record(a.value().middleCols(start, count), {a},
                  [a, start, count](Tape& t, int self) {
                    Matrix g = Matrix::Zero(a.rows(), a.cols());
                    g.middleCols(start, count) = t.upstream(self);
                    t.accumulate(a, g);
                  });
}

Var broadcast_rows(Var row, Eigen::Index rows) {
  Tape& t = tape_of(row);
  if (row.rows() != 1) throw std::invalid_argument("broadcast_rows: input must be a single row");
  return t.record(row.value().replicate(rows, 1), {row}, [row](Tape& t, int self) {
    t.accumulate(row, t.upstream(self).colwise().sum());
  });
}

Var mix_blocks(Var alpha, Var y) {
  Tape& t = tape_of(alpha, y);
  const Eigen::Index batch = alpha.rows();
  const Eigen::Index m = alpha.cols();
  if (y.rows() != batch || m == 0 || y.cols() % m != 0) {
    throw std::invalid_argument("mix_blocks: expected y of shape B x (m * n)");
  }
  const Eigen::Index n = y.cols() / m;
  const Matrix& av = alpha.value();
  const Matrix& yv = y.value();
  Matrix out = Matrix::Zero(batch, n);
  for (Eigen::Index i = 0; i < m; ++i) {
    out.array() += yv.middleCols(i * n, n).array().colwise() * av.col(i).array();
  }
  return t.record(std::move(out), {alpha, y}, [alpha, y, m, n](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    const Matrix& av = alpha.value();
    const Matrix& yv = y.value();
    if (alpha.requires_grad()) {
      Matrix ga(av.rows(), m);
      for (Eigen::Index i = 0; i < m; ++i) {
        ga.col(i) = yv.middleCols(i * n, n).cwiseProduct(g).rowwise().sum();
      }
      t.accumulate(alpha, ga);
    }
    if (y.requires_grad()) {
      Matrix gy(yv.rows(), yv.cols());
      for (Eigen::Index i = 0; i < m; ++i) {
        gy.middleCols(i * n, n) = g.array().colwise() * av.col(i).array();
      }
      t.accumulate(y, gy);
    }
  });
}

Var stop_gradient(Var a) {
  Tape& t = tape_of(a);
  return t.constant(a.value());
}

}  // namespace lp::ad
