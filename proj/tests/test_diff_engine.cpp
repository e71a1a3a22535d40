#include <doctest.h>

#include <cmath>

#include "odeguide/diff_engine/mlp.hpp"
#include "odeguide/diff_engine/optim.hpp"
#include "odeguide/errors.hpp"

using namespace odeguide;
using namespace odeguide::ad;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = standard_normal(rng);
  }
  return m;
}

// Independent forward pass: explicit loops, no Eigen products.
Matrix oracle_forward(const MlpSpec& spec, const ParamSet& ps, const std::string& prefix, const Matrix& x) {
  Matrix h = x;
  for (std::size_t k = 0; k < spec.layers(); ++k) {
    const Matrix& W = ps.get(prefix + ".W" + std::to_string(k));
    const Matrix& b = ps.get(prefix + ".b" + std::to_string(k));
    Matrix out(h.rows(), W.cols());
    for (Eigen::Index r = 0; r < h.rows(); ++r) {
      for (Eigen::Index c = 0; c < W.cols(); ++c) {
        double s = b(0, c);
        for (Eigen::Index i = 0; i < h.cols(); ++i) s += h(r, i) * W(i, c);
        switch (spec.activations[k]) {
          case Activation::Tanh: s = std::tanh(s); break;
          case Activation::Relu: s = s > 0 ? s : 0; break;
          case Activation::Sigmoid: s = 1 / (1 + std::exp(-s)); break;
          case Activation::Softplus: s = std::log(1 + std::exp(s)); break;
          case Activation::Identity: break;
        }
        out(r, c) = s;
      }
    }
    h = out;
  }
  return h;
}

}  // namespace

TEST_CASE("mlp_apply with zero weights returns the activated bias") {
  ParamSet ps;
  Rng rng(1);
  const MlpSpec spec = MlpSpec::make(3, {4}, 2, Activation::Tanh, Activation::Sigmoid);
  add_mlp(ps, "f", spec, rng);
  ps.mutable_values(ps.index_of("f.W0")).setZero();
  ps.mutable_values(ps.index_of("f.W1")).setZero();
  ps.mutable_values(ps.index_of("f.b1")) << 0.5, -1.0;
  const Matrix out = mlp_apply(spec, ps, "f", Matrix::Random(5, 3));
  for (Eigen::Index r = 0; r < 5; ++r) {
    CHECK(out(r, 0) == doctest::Approx(1 / (1 + std::exp(-0.5))));
    CHECK(out(r, 1) == doctest::Approx(1 / (1 + std::exp(1.0))));
  }
}

TEST_CASE("identity layer passes input through") {
  ParamSet ps;
  ps.add("id.W0", Matrix::Identity(3, 3));
  ps.add("id.b0", Matrix::Zero(1, 3));
  const MlpSpec spec = MlpSpec::make(3, {}, 3, Activation::Identity);
  const Matrix x = Matrix::Random(4, 3);
  CHECK(mlp_apply(spec, ps, "id", x) == x);
}

TEST_CASE("mlp_apply and the tape forward match a loop oracle") {
  Rng rng(42);
  ParamSet ps;
  const MlpSpec spec = MlpSpec::make(5, {7, 6}, 3, Activation::Tanh);
  const Mlp mlp = add_mlp(ps, "net", spec, rng);
  const Matrix x = random_matrix(4, 5, rng);
  const Matrix want = oracle_forward(spec, ps, "net", x);
  CHECK((mlp_apply(mlp, ps, x) - want).cwiseAbs().maxCoeff() < 1e-13);
  Tape tape(false);
  const BoundParams bp = bind(tape, ps, false);
  const Var out = mlp_forward(mlp, bp, tape.constant(x));
  CHECK((out.value() - want).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("mlp input width mismatch names the layer") {
  Rng rng(3);
  ParamSet ps;
  const MlpSpec spec = MlpSpec::make(2, {3}, 1, Activation::Relu);
  const Mlp mlp = add_mlp(ps, "g", spec, rng);
  try {
    mlp_apply(mlp, ps, Matrix::Zero(1, 4));
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
  }
}

TEST_CASE("unknown activation names are rejected") {
  CHECK_THROWS_AS(parse_activation("gelu"), ContractError);
  CHECK(parse_activation("relu") == Activation::Relu);
}

TEST_CASE("value_and_grad of w^2") {
  ParamSet ps;
  ps.add("w", Matrix::Constant(1, 1, 3.0));
  const Program f = [](Tape&, const BoundParams& b, std::span<const Var>) { return sum(square(b[0])); };
  const GradRecord r = value_and_grad(f, ps);
  CHECK(r.loss == 9.0);
  CHECK(r.grad[0](0, 0) == 6.0);
}

TEST_CASE("constants produce zero gradient") {
  ParamSet ps;
  ps.add("w", Matrix::Constant(2, 2, 1.5));
  const Program f = [](Tape& t, const BoundParams&, std::span<const Var>) {
    return sum(t.constant(Matrix::Constant(3, 1, 2.0)));
  };
  const GradRecord r = value_and_grad(f, ps);
  CHECK(r.loss == 6.0);
  CHECK(r.grad[0].isZero(0.0));
}

TEST_CASE("input gradients are returned on request") {
  ParamSet ps;
  ps.add("w", Matrix::Constant(1, 2, 2.0));
  const Program f = [](Tape&, const BoundParams& b, std::span<const Var> in) { return sum(mul(in[0], b[0])); };
  Matrix x(3, 2);
  x << 1, 2, 3, 4, 5, 6;
  const GradRecord r = value_and_grad(f, ps, {x}, true);
  REQUIRE(r.input_grads.size() == 1);
  CHECK(r.input_grads[0].isApprox(Matrix::Constant(3, 2, 2.0)));
  CHECK(r.grad[0](0, 0) == 9.0);
  CHECK(r.grad[0](0, 1) == 12.0);
}

TEST_CASE("grad_check on linear and quadratic programs") {
  Rng rng(5);
  ParamSet ps;
  ps.add("a", random_matrix(3, 2, rng));
  const Matrix c = random_matrix(3, 2, rng);
  const Program lin = [c](Tape& t, const BoundParams& b, std::span<const Var>) {
    return sum(mul(b[0], t.constant(c)));
  };
  CHECK(grad_check(lin, ps, 1e-2) <= 1e-10);
  const Program quad = [c](Tape& t, const BoundParams& b, std::span<const Var>) {
    return sum(square(b[0] - t.constant(c))) + 0.5 * sum(mul(b[0], t.constant(c)));
  };
  CHECK(grad_check(quad, ps, 1e-3) <= 1e-8);
}

TEST_CASE("grad_check on a random deep MLP covering every op") {
  Rng rng(11);
  ParamSet ps;
  const Mlp a = add_mlp(ps, "a", MlpSpec::make(4, {6, 6, 5}, 3, Activation::Tanh), rng);
  const Mlp b = add_mlp(ps, "b", MlpSpec::make(3, {5}, 2, Activation::Sigmoid, Activation::Softplus), rng);
  ps.add("s", random_matrix(1, 2, rng));
  const Matrix x = random_matrix(6, 4, rng);
  const Matrix y = random_matrix(6, 2, rng);
  const Program f = [&](Tape& t, const BoundParams& bp, std::span<const Var> in) {
    const Var h = mlp_forward(a, bp, in[0]);
    const Var o = mlp_forward(b, bp, h);
    const Var z = concat_cols({slice_cols(o, 1, 1), slice_cols(o, 0, 1)});
    const Var e = z * exp(bp["s"]) / (1.0 + square(bp["s"])) - t.constant(y);
    const Var r = row_sum(square(e));
    return mean(log(r + 1.0)) + sum(tanh(-o) * 0.1) - sum(sub(relu(o), 2.0 * o));
  };
  CHECK(grad_check(f, ps, {x}, {}) <= 1e-4);
}

TEST_CASE("grad_check subset mode is reproducible") {
  Rng rng(12);
  ParamSet ps;
  const Mlp a = add_mlp(ps, "a", MlpSpec::make(3, {8}, 1, Activation::Tanh), rng);
  const Matrix x = random_matrix(5, 3, rng);
  const Program f = [&](Tape&, const BoundParams& bp, std::span<const Var> in) {
    return sum(square(mlp_forward(a, bp, in[0])));
  };
  GradCheckOptions o;
  o.max_coords = 7;
  o.seed = 99;
  const double e1 = grad_check(f, ps, {x}, o);
  const double e2 = grad_check(f, ps, {x}, o);
  CHECK(e1 == e2);
  CHECK(e1 <= 1e-4);
}

TEST_CASE("adam with zero gradient leaves params unchanged") {
  ParamSet ps;
  ps.add("w", Matrix::Constant(2, 1, 0.7));
  AdamState st = AdamState::init(ps);
  adam_step(ps, ps.zeros_like(), st, AdamConfig{0.1});
  CHECK(ps[0](0, 0) == 0.7);
}

TEST_CASE("adam first step moves by about lr against the gradient") {
  ParamSet ps;
  ps.add("w", Matrix::Constant(1, 2, 1.0));
  ParamSet g = ps.zeros_like();
  g.mutable_values(0) << 3.0, -0.02;
  AdamState st = AdamState::init(ps);
  adam_step(ps, g, st, AdamConfig{0.01});
  CHECK(ps[0](0, 0) == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(ps[0](0, 1) == doctest::Approx(1.0 + 0.01).epsilon(1e-6));
}

TEST_CASE("two adam steps on w^2 reduce the loss") {
  ParamSet ps;
  ps.add("w", Matrix::Constant(1, 1, 1.0));
  const Program f = [](Tape&, const BoundParams& b, std::span<const Var>) { return sum(square(b[0])); };
  AdamState st = AdamState::init(ps);
  double prev = evaluate(f, ps);
  // By hand: step 1 w = 0.9; step 2 m = 0.36, v = 0.00562, bias-corrected ratio ~ 0.9997, w ~ 0.8
  for (int k = 0; k < 2; ++k) {
    const GradRecord r = value_and_grad(f, ps);
    adam_step(ps, r.grad, st, AdamConfig{0.1});
    const double now = evaluate(f, ps);
    CHECK(now < prev);
    prev = now;
  }
  CHECK(ps[0](0, 0) == doctest::Approx(0.8).epsilon(1e-3));
}

TEST_CASE("adam rejects shape mismatch") {
  ParamSet ps;
  ps.add("w", Matrix::Zero(2, 2));
  ParamSet g;
  g.add("w", Matrix::Zero(2, 3));
  AdamState st = AdamState::init(ps);
  CHECK_THROWS_AS(adam_step(ps, g, st, AdamConfig{0.1}), ContractError);
}

TEST_CASE("ParamSet JSON round-trip is lossless") {
  Rng rng(8);
  ParamSet ps;
  add_mlp(ps, "m", MlpSpec::make(3, {4}, 2, Activation::Tanh), rng);
  ps.coord(0) = 0.1 + 0.2;
  const ParamSet back = ParamSet::from_json(nlohmann::json::parse(ps.to_json().dump()));
  REQUIRE(back.same_shape(ps));
  for (std::size_t i = 0; i < ps.count(); ++i) CHECK(back.coord(i) == ps.coord(i));
}
