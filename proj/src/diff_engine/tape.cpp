#include "odeguide/diff_engine/tape.hpp"

#include <cmath>
#include <sstream>
#include <string>

#include "odeguide/errors.hpp"

namespace odeguide::ad {

const Matrix& Var::value() const { return tape_->value(*this); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ContractError("Var::scalar: value is not 1x1");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording_;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::span<const Var> parents, Pullback pullback) {
  Node n;
  n.value = std::move(value);
  if (recording_) {
    for (const Var& p : parents) {
      if (&p.tape() != this) throw ContractError("Tape::record: parent belongs to another tape");
      n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
    }
    if (n.requires_grad) n.pullback = std::move(pullback);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
    std::ostringstream msg;
    msg << "Tape::accumulate: gradient shape " << g.rows() << "x" << g.cols() << " vs value "
        << n.value.rows() << "x" << n.value.cols();
    throw ContractError(msg.str());
  }
  if (n.has_grad) {
    n.grad += g;
  } else {
    n.grad = g;
    n.has_grad = true;
  }
}

void Tape::backward(const Var& output) {
  if (!recording_) throw ContractError("Tape::backward: tape does not record gradients");
  const Matrix& out = value(output);
  if (out.rows() != 1 || out.cols() != 1) throw ContractError("Tape::backward: output must be 1x1");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  if (!nodes_[output.id()].requires_grad) return;
  accumulate(output, Matrix::Ones(1, 1));
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.pullback) continue;
    n.pullback(*this, n.value, n.grad);
    // Intermediate gradients are not needed once propagated.
    n.grad.resize(0, 0);
    n.has_grad = false;
  }
}

Matrix Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::Identity;
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "softplus") return Activation::Softplus;
  throw ContractError("unsupported activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation act) {
  switch (act) {
    case Activation::Identity: return "identity";
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Softplus: return "softplus";
  }
  return "identity";
}

namespace {

using Eigen::Index;

struct Shape {
  Index rows;
  Index cols;
};

Shape broadcast_shape(const Matrix& a, const Matrix& b, const char* op) {
  auto dim = [&](Index x, Index y) -> Index {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    std::ostringstream msg;
    msg << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and " << b.rows()
        << "x" << b.cols();
    throw ContractError(msg.str());
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

Matrix expand(const Matrix& m, Shape s) {
  if (m.rows() == s.rows && m.cols() == s.cols) return m;
  return m.replicate(s.rows / m.rows(), s.cols / m.cols());
}

Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

enum class BinOp { Add, Sub, Mul, Div };

Var binary(const Var& a, const Var& b, BinOp op, const char* name) {
  Tape& tape = a.tape();
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Shape s = broadcast_shape(av, bv, name);
  const bool same = av.rows() == bv.rows() && av.cols() == bv.cols();
  Matrix out;
  if (same) {
    switch (op) {
      case BinOp::Add: out = av + bv; break;
      case BinOp::Sub: out = av - bv; break;
      case BinOp::Mul: out = av.cwiseProduct(bv); break;
      case BinOp::Div: out = av.cwiseQuotient(bv); break;
    }
  } else {
    const Matrix ae = expand(av, s);
    const Matrix be = expand(bv, s);
    switch (op) {
      case BinOp::Add: out = ae + be; break;
      case BinOp::Sub: out = ae - be; break;
      case BinOp::Mul: out = ae.cwiseProduct(be); break;
      case BinOp::Div: out = ae.cwiseQuotient(be); break;
    }
  }
  return tape.record(std::move(out), {a, b}, [a, b, op, s](Tape& t, const Matrix&, const Matrix& g) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    switch (op) {
      case BinOp::Add:
        t.accumulate(a, reduce_to(g, av.rows(), av.cols()));
        t.accumulate(b, reduce_to(g, bv.rows(), bv.cols()));
        break;
      case BinOp::Sub:
        t.accumulate(a, reduce_to(g, av.rows(), av.cols()));
        t.accumulate(b, reduce_to(-g, bv.rows(), bv.cols()));
        break;
      case BinOp::Mul: {
        if (t.requires_grad(a)) {
          t.accumulate(a, reduce_to(g.cwiseProduct(expand(bv, s)), av.rows(), av.cols()));
        }
        if (t.requires_grad(b)) {
          t.accumulate(b, reduce_to(g.cwiseProduct(expand(av, s)), bv.rows(), bv.cols()));
        }
        break;
      }
      case BinOp::Div: {
        const Matrix be = expand(bv, s);
        if (t.requires_grad(a)) {
          t.accumulate(a, reduce_to(g.cwiseQuotient(be), av.rows(), av.cols()));
        }
        if (t.requires_grad(b)) {
          const Matrix ae = expand(av, s);
          const Matrix gb = -(g.cwiseProduct(ae)).cwiseQuotient(be.cwiseProduct(be));
          t.accumulate(b, reduce_to(gb, bv.rows(), bv.cols()));
        }
        break;
      }
    }
  });
}

template <typename Forward, typename Derivative>
Var unary(const Var& x, Forward fwd, Derivative deriv) {
  Matrix out = x.value().unaryExpr(fwd);
  return x.tape().record(std::move(out), {x},
                         [x, deriv](Tape& t, const Matrix& value, const Matrix& g) {
                           Matrix d(value.rows(), value.cols());
                           const Matrix& in = x.value();
                           for (Index j = 0; j < d.cols(); ++j) {
                             for (Index i = 0; i < d.rows(); ++i) d(i, j) = deriv(in(i, j), value(i, j));
                           }
                           t.accumulate(x, g.cwiseProduct(d));
                         });
}

double softplus_value(double x) {
  return x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary(a, b, BinOp::Add, "add"); }
Var sub(const Var& a, const Var& b) { return binary(a, b, BinOp::Sub, "sub"); }
Var mul(const Var& a, const Var& b) { return binary(a, b, BinOp::Mul, "mul"); }
Var div(const Var& a, const Var& b) { return binary(a, b, BinOp::Div, "div"); }

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(const Var& a, const Var& b) { return mul(a, b); }
Var operator/(const Var& a, const Var& b) { return div(a, b); }

Var operator*(double c, const Var& a) {
  return a.tape().record(a.value() * c, {a},
                         [a, c](Tape& t, const Matrix&, const Matrix& g) { t.accumulate(a, g * c); });
}
Var operator*(const Var& a, double c) { return c * a; }
Var operator-(const Var& a) { return -1.0 * a; }

Var operator+(const Var& a, double c) {
  return a.tape().record((a.value().array() + c).matrix(), {a},
                         [a](Tape& t, const Matrix&, const Matrix& g) { t.accumulate(a, g); });
}
Var operator-(const Var& a, double c) { return a + (-c); }
Var operator+(double c, const Var& a) { return a + c; }
Var operator-(double c, const Var& a) { return (-a) + c; }

Var matmul(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    std::ostringstream msg;
    msg << "matmul: " << av.rows() << "x" << av.cols() << " times " << bv.rows() << "x" << bv.cols();
    throw ContractError(msg.str());
  }
  return a.tape().record(av * bv, {a, b}, [a, b](Tape& t, const Matrix&, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var affine(const Var& x, const Var& weight, const Var& bias) {
  const Matrix& xv = x.value();
  const Matrix& wv = weight.value();
  const Matrix& bv = bias.value();
  if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols()) {
    std::ostringstream msg;
    msg << "affine: input " << xv.rows() << "x" << xv.cols() << ", weight " << wv.rows() << "x"
        << wv.cols() << ", bias " << bv.rows() << "x" << bv.cols();
    throw ContractError(msg.str());
  }
  Matrix out = xv * wv;
  out.rowwise() += bv.row(0);
  return x.tape().record(std::move(out), {x, weight, bias},
                         [x, weight, bias](Tape& t, const Matrix&, const Matrix& g) {
                           if (t.requires_grad(x)) t.accumulate(x, g * weight.value().transpose());
                           if (t.requires_grad(weight)) t.accumulate(weight, x.value().transpose() * g);
                           if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
                         });
}

Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::Identity: return x;
    case Activation::Tanh: return tanh(x);
    case Activation::Relu: return relu(x);
    case Activation::Sigmoid: return sigmoid(x);
    case Activation::Softplus: return softplus(x);
  }
  return x;
}

Var tanh(const Var& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return sigmoid_value(v); }, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& x) {
  return unary(
      x, [](double v) { return softplus_value(v); }, [](double v, double) { return sigmoid_value(v); });
}

Var exp(const Var& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var square(const Var& x) {
  return x.tape().record(x.value().cwiseAbs2(), {x}, [x](Tape& t, const Matrix&, const Matrix& g) {
    t.accumulate(x, 2.0 * g.cwiseProduct(x.value()));
  });
}

Var sum(const Var& x) {
  return x.tape().record(Matrix::Constant(1, 1, x.value().sum()), {x},
                         [x](Tape& t, const Matrix&, const Matrix& g) {
                           t.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
                         });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw ContractError("mean: empty input");
  return (1.0 / n) * sum(x);
}

Var row_sum(const Var& x) {
  return x.tape().record(x.value().rowwise().sum(), {x}, [x](Tape& t, const Matrix&, const Matrix& g) {
    t.accumulate(x, g.replicate(1, x.cols()));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ContractError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return parts.front().tape().record(std::move(out), parts,
                                     [owned](Tape& t, const Matrix&, const Matrix& g) {
                                       Index c = 0;
                                       for (const Var& p : owned) {
                                         if (t.requires_grad(p)) t.accumulate(p, g.middleCols(c, p.cols()));
                                         c += p.cols();
                                       }
                                     });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_cols(const Var& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw ContractError("slice_cols: out of range");
  return x.tape().record(x.value().middleCols(start, count), {x},
                         [x, start, count](Tape& t, const Matrix&, const Matrix& g) {
                           Matrix full = Matrix::Zero(x.rows(), x.cols());
                           full.middleCols(start, count) = g;
                           t.accumulate(x, full);
                         });
}

}  // namespace odeguide::ad
