#include "odeguide/diff_engine/mlp.hpp"

#include <cmath>
#include <sstream>

#include "odeguide/errors.hpp"

namespace odeguide::ad {

MlpSpec MlpSpec::make(int input, const std::vector<int>& hidden, int output, Activation hidden_act,
                      Activation output_act) {
  MlpSpec s;
  s.widths.push_back(input);
  for (int h : hidden) {
    s.widths.push_back(h);
    s.activations.push_back(hidden_act);
  }
  s.widths.push_back(output);
  s.activations.push_back(output_act);
  s.validate();
  return s;
}

void MlpSpec::validate() const {
  if (activations.empty()) throw ContractError("MlpSpec: at least one layer required");
  if (widths.size() != activations.size() + 1) throw ContractError("MlpSpec: widths/activations mismatch");
  for (int w : widths) {
    if (w <= 0) throw ContractError("MlpSpec: widths must be positive");
  }
}

Mlp Mlp::resolve(const MlpSpec& spec, const std::string& prefix, const ParamSet& params) {
  spec.validate();
  Mlp m{spec, prefix, {}, {}};
  for (std::size_t k = 0; k < spec.layers(); ++k) {
    const std::size_t w = params.index_of(prefix + ".W" + std::to_string(k));
    const std::size_t b = params.index_of(prefix + ".b" + std::to_string(k));
    if (params[w].rows() != spec.widths[k] || params[w].cols() != spec.widths[k + 1] ||
        params[b].rows() != 1 || params[b].cols() != spec.widths[k + 1]) {
      throw ContractError("Mlp: tensor shapes of '" + prefix + "' layer " + std::to_string(k) +
                          " do not match spec");
    }
    m.weights.push_back(w);
    m.biases.push_back(b);
  }
  return m;
}

Mlp add_mlp(ParamSet& params, const std::string& prefix, const MlpSpec& spec, Rng& rng) {
  spec.validate();
  for (std::size_t k = 0; k < spec.layers(); ++k) {
    const int fan_in = spec.widths[k];
    const int fan_out = spec.widths[k + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix w(fan_in, fan_out);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
    Matrix b(1, fan_out);
    for (Eigen::Index j = 0; j < b.cols(); ++j) b(0, j) = dist(rng);
    params.add(prefix + ".W" + std::to_string(k), std::move(w));
    params.add(prefix + ".b" + std::to_string(k), std::move(b));
  }
  return Mlp::resolve(spec, prefix, params);
}

namespace {

void check_input(const Mlp& mlp, Eigen::Index cols) {
  if (cols != mlp.spec.input_width()) {
    std::ostringstream msg;
    msg << "mlp '" << mlp.prefix << "' layer 0: input width " << cols << ", expected "
        << mlp.spec.input_width();
    throw ContractError(msg.str());
  }
}

void apply_activation_inplace(Matrix& m, Activation act) {
  switch (act) {
    case Activation::Identity: break;
    case Activation::Tanh: m = m.array().tanh().matrix(); break;
    case Activation::Relu: m = m.cwiseMax(0.0); break;
    case Activation::Sigmoid:
      m = m.unaryExpr([](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
      break;
    case Activation::Softplus:
      m = m.unaryExpr([](double v) { return v > 30.0 ? v : (v < -30.0 ? std::exp(v) : std::log1p(std::exp(v))); });
      break;
  }
}

}  // namespace

Var mlp_forward(const Mlp& mlp, const BoundParams& bound, const Var& input) {
  check_input(mlp, input.cols());
  Var h = input;
  for (std::size_t k = 0; k < mlp.spec.layers(); ++k) {
    h = activate(affine(h, bound[mlp.weights[k]], bound[mlp.biases[k]]), mlp.spec.activations[k]);
  }
  return h;
}

Matrix mlp_apply(const Mlp& mlp, const ParamSet& params, const Matrix& input) {
  check_input(mlp, input.cols());
  Matrix h = input;
  for (std::size_t k = 0; k < mlp.spec.layers(); ++k) {
    Matrix next = h * params[mlp.weights[k]];
    next.rowwise() += params[mlp.biases[k]].row(0);
    apply_activation_inplace(next, mlp.spec.activations[k]);
    h = std::move(next);
  }
  return h;
}

Matrix mlp_apply(const MlpSpec& spec, const ParamSet& params, const std::string& prefix, const Matrix& input) {
  return mlp_apply(Mlp::resolve(spec, prefix, params), params, input);
}

}  // namespace odeguide::ad
