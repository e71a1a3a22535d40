#include "odeguide/diff_engine/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "odeguide/errors.hpp"
#include "odeguide/random.hpp"

namespace odeguide::ad {

AdamState AdamState::init(const ParamSet& params) {
  return AdamState{params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, const AdamConfig& config) {
  if (!(config.lr > 0.0)) throw ContractError("adam_step: lr must be positive");
  if (!params.same_shape(grads)) throw ContractError("adam_step: gradient shape mismatch");
  if (!params.same_shape(state.m) || !params.same_shape(state.v)) {
    throw ContractError("adam_step: optimizer state shape mismatch");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.mutable_values(i);
    auto m = state.m.mutable_values(i);
    auto v = state.v.mutable_values(i);
    const Matrix& g = grads[i];
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    p.array() -= config.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config.eps);
  }
}

GradRecord value_and_grad(const Program& f, const ParamSet& params, const std::vector<Matrix>& inputs,
                          bool input_gradients) {
  Tape tape;
  BoundParams bound = bind(tape, params, true);
  std::vector<Var> in;
  in.reserve(inputs.size());
  for (const auto& m : inputs) in.push_back(input_gradients ? tape.variable(m) : tape.constant(m));
  Var out = f(tape, bound, in);
  if (out.rows() != 1 || out.cols() != 1) throw ContractError("value_and_grad: program must return a scalar");
  GradRecord rec;
  rec.loss = out.scalar();
  tape.backward(out);
  rec.grad = gradients(tape, bound);
  if (input_gradients) {
    for (const auto& v : in) rec.input_grads.push_back(tape.grad(v));
  }
  return rec;
}

double evaluate(const Program& f, const ParamSet& params, const std::vector<Matrix>& inputs) {
  Tape tape(false);
  BoundParams bound = bind(tape, params, false);
  std::vector<Var> in;
  in.reserve(inputs.size());
  for (const auto& m : inputs) in.push_back(tape.constant(m));
  Var out = f(tape, bound, in);
  if (out.rows() != 1 || out.cols() != 1) throw ContractError("evaluate: program must return a scalar");
  return out.scalar();
}

double grad_check(const Program& f, const ParamSet& params, const std::vector<Matrix>& inputs,
                  const GradCheckOptions& options) {
  if (!(options.eps > 0.0 && options.eps <= 1e-2)) throw ContractError("grad_check: eps must lie in (0, 1e-2]");
  const GradRecord rec = value_and_grad(f, params, inputs);
  const std::size_t n = params.count();
  std::vector<std::size_t> coords(n);
  std::iota(coords.begin(), coords.end(), 0);
  if (options.max_coords > 0 && options.max_coords < n) {
    Rng rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coords);
    std::sort(coords.begin(), coords.end());
  }
  ParamSet probe = params;
  double worst = 0.0;
  for (std::size_t c : coords) {
    const double orig = probe.coord(c);
    probe.coord(c) = orig + options.eps;
    const double up = evaluate(f, probe, inputs);
    probe.coord(c) = orig - options.eps;
    const double down = evaluate(f, probe, inputs);
    probe.coord(c) = orig;
    const double fd = (up - down) / (2.0 * options.eps);
    const double an = rec.grad.coord(c);
    worst = std::max(worst, std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-12));
  }
  return worst;
}

double grad_check(const Program& f, const ParamSet& params, double eps) {
  GradCheckOptions opt;
  opt.eps = eps;
  return grad_check(f, params, {}, opt);
}

}  // namespace odeguide::ad

namespace odeguide::ad {

double clip_grad_norm(ParamSet& grads, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) sq += grads[i].squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < grads.size(); ++i) grads.mutable_values(i) *= s;
  }
  return norm;
}

}  // namespace odeguide::ad
