#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace odeguide::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Called during backward with the node's forward value and accumulated gradient.
/// Propagates into parents through Tape::accumulate.
using Pullback = std::function<void(Tape&, const Matrix& value, const Matrix& grad)>;

/// Linear record of matrix-valued operations. Backward walks it in reverse.
/// A tape built with record_gradients = false keeps values only.
class Tape {
 public:
  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  /// Records an operation node. The pullback is dropped when no parent needs a gradient.
  Var record(Matrix value, std::span<const Var> parents, Pullback pullback);
  Var record(Matrix value, std::initializer_list<Var> parents, Pullback pullback) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(pullback));
  }

  const Matrix& value(const Var& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  bool recording() const { return recording_; }

  /// Seeds d(output)/d(output) = 1 for a 1x1 output and propagates.
  void backward(const Var& output);

  /// Gradient of the last backward output with respect to a leaf variable.
  /// Zero-filled when the variable did not influence the output.
  Matrix grad(const Var& v) const;

  void accumulate(const Var& v, const Matrix& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Pullback pullback;
    bool requires_grad = false;
    bool has_grad = false;
    bool leaf = false;
  };

  bool recording_;
  std::vector<Node> nodes_;
};

enum class Activation { Identity, Tanh, Relu, Sigmoid, Softplus };

/// Accepts "identity", "tanh", "relu", "sigmoid", "softplus"; anything else is a ContractError.
Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation act);

// Elementwise binary ops broadcast a 1xC row, an Rx1 column, or a 1x1 scalar.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator*(double c, const Var& a);
Var operator*(const Var& a, double c);
Var operator+(const Var& a, double c);
Var operator-(const Var& a, double c);
Var operator+(double c, const Var& a);
Var operator-(double c, const Var& a);

Var matmul(const Var& a, const Var& b);
/// x * W + b with b a 1 x out row broadcast over the rows of x.
Var affine(const Var& x, const Var& weight, const Var& bias);

Var activate(const Var& x, Activation act);
Var tanh(const Var& x);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var square(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
Var row_sum(const Var& x);

Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count);

}  // namespace odeguide::ad
