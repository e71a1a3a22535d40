#include "odeguide/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "odeguide/errors.hpp"

namespace odeguide {

using ad::Matrix;
using ad::Var;

void DiffusionSchedule::check_step(int tau) const {
  if (tau < 1 || tau > T_d) {
    std::ostringstream msg;
    msg << "diffusion step " << tau << " outside [1, " << T_d << "]";
    throw RangeError(msg.str());
  }
}

DiffusionSchedule make_schedule(int T_d, double beta_start, double beta_end, double lambda_const) {
  if (T_d < 1) throw ContractError("make_schedule: T_d must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ContractError("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule s;
  s.T_d = T_d;
  s.lambda_const = lambda_const;
  const auto n = static_cast<std::size_t>(T_d) + 1;
  s.beta.assign(n, 0.0);
  s.alpha.assign(n, 1.0);
  s.alpha_bar.assign(n, 1.0);
  s.loss_weights.assign(n, 0.0);
  for (int tau = 1; tau <= T_d; ++tau) {
    const double frac = T_d == 1 ? 0.0 : static_cast<double>(tau - 1) / (T_d - 1);
    const double b = beta_start + frac * (beta_end - beta_start);
    s.beta[tau] = b;
    s.alpha[tau] = 1.0 - b;
    s.alpha_bar[tau] = s.alpha_bar[tau - 1] * (1.0 - b);
    s.loss_weights[tau] = lambda_const * s.alpha[tau] * (1.0 - s.alpha_bar[tau]) / (b * b);
  }
  return s;
}

Matrix forward_sample(const Matrix& y0, int tau, const DiffusionSchedule& s, const Matrix& noise) {
  s.check_step(tau);
  if (y0.rows() != noise.rows() || y0.cols() != noise.cols()) {
    throw ContractError("forward_sample: noise shape differs from y0");
  }
  const double ab = s.alpha_bar[tau];
  return std::sqrt(ab) * y0 + std::sqrt(1.0 - ab) * noise;
}

NoiseScale parse_noise_scale(const std::string& name) {
  if (name == "variance") return NoiseScale::Variance;
  if (name == "posterior_std") return NoiseScale::PosteriorStd;
  if (name == "beta_std") return NoiseScale::BetaStd;
  throw ConfigError("unknown noise scale '" + name + "' (variance, posterior_std, beta_std)");
}

std::string noise_scale_name(NoiseScale s) {
  switch (s) {
    case NoiseScale::Variance: return "variance";
    case NoiseScale::PosteriorStd: return "posterior_std";
    case NoiseScale::BetaStd: return "beta_std";
  }
  return "?";
}

double reverse_noise_coefficient(int tau, const DiffusionSchedule& s, NoiseScale mode) {
  s.check_step(tau);
  if (tau == 1) return 0.0;
  const double tilde = (1.0 - s.alpha_bar[tau - 1]) / (1.0 - s.alpha_bar[tau]) * s.beta[tau];
  switch (mode) {
    case NoiseScale::Variance: return tilde;
    case NoiseScale::PosteriorStd: return std::sqrt(tilde);
    case NoiseScale::BetaStd: return std::sqrt(s.beta[tau]);
  }
  return 0.0;
}

Matrix reverse_step(const Matrix& y_tau, int tau, const Matrix& y0_hat, const DiffusionSchedule& s,
                    const Matrix& noise, NoiseScale mode) {
  s.check_step(tau);
  if (y_tau.rows() != y0_hat.rows() || y_tau.cols() != y0_hat.cols()) {
    throw ContractError("reverse_step: y0_hat shape differs from y_tau");
  }
  if (tau == 1) return y0_hat;
  if (noise.rows() != y_tau.rows() || noise.cols() != y_tau.cols()) {
    throw ContractError("reverse_step: noise shape differs from y_tau");
  }
  const double ab = s.alpha_bar[tau];
  const double ab_prev = s.alpha_bar[tau - 1];
  const double c0 = std::sqrt(ab_prev) * s.beta[tau] / (1.0 - ab);
  const double ct = std::sqrt(s.alpha[tau]) * (1.0 - ab_prev) / (1.0 - ab);
  return c0 * y0_hat + ct * y_tau + reverse_noise_coefficient(tau, s, mode) * noise;
}

std::vector<double> timestep_embedding(int tau, int T_d, int freqs) {
  if (T_d < 1 || freqs < 1) throw ContractError("timestep_embedding: T_d and freqs must be positive");
  const double u = static_cast<double>(tau) / T_d;
  const double top = std::max(1.0, T_d / 2.0);
  std::vector<double> out(2 * static_cast<std::size_t>(freqs));
  for (int k = 0; k < freqs; ++k) {
    const double e = freqs == 1 ? 0.0 : static_cast<double>(k) / (freqs - 1);
    const double w = M_PI * std::pow(top, e);
    out[2 * k] = std::sin(w * u);
    out[2 * k + 1] = std::cos(w * u);
  }
  return out;
}

namespace {

ad::MlpSpec denoiser_spec(const DenoiserConfig& c, std::size_t horizon, std::size_t cond_dim) {
  const int in = static_cast<int>(horizon + 2 * static_cast<std::size_t>(c.freqs) + cond_dim);
  return ad::MlpSpec::make(in, std::vector<int>(static_cast<std::size_t>(c.hidden_layers), c.hidden),
                           static_cast<int>(horizon), c.activation);
}

Matrix embedding_rows(const std::vector<int>& taus, int T_d, int freqs) {
  Matrix e(static_cast<Eigen::Index>(taus.size()), 2 * freqs);
  for (std::size_t r = 0; r < taus.size(); ++r) {
    const std::vector<double> v = timestep_embedding(taus[r], T_d, freqs);
    for (std::size_t k = 0; k < v.size(); ++k) e(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = v[k];
  }
  return e;
}

Matrix broadcast_cond(const Matrix& cond, Eigen::Index rows, std::size_t cond_dim) {
  if (static_cast<std::size_t>(cond.cols()) != cond_dim) {
    std::ostringstream msg;
    msg << "denoiser: condition width " << cond.cols() << " != " << cond_dim;
    throw ContractError(msg.str());
  }
  if (cond.rows() == rows) return cond;
  if (cond.rows() == 1) return cond.replicate(rows, 1);
  throw ContractError("denoiser: condition rows must be 1 or match y_tau");
}

Matrix denoiser_input(const DenoiserModel& m, const Matrix& y_tau, const std::vector<int>& taus, const Matrix& cond) {
  if (static_cast<std::size_t>(y_tau.cols()) != m.horizon) {
    std::ostringstream msg;
    msg << "denoiser: y_tau width " << y_tau.cols() << " != horizon " << m.horizon;
    throw ContractError(msg.str());
  }
  const Eigen::Index n = y_tau.rows();
  const Matrix e = embedding_rows(taus, m.T_d, m.config.freqs);
  const Matrix c = broadcast_cond(cond, n, m.cond_dim);
  Matrix in(n, static_cast<Eigen::Index>(m.input_width()));
  in << y_tau, e, c;
  return in;
}

}  // namespace

DenoiserModel DenoiserModel::create(const DenoiserConfig& config, std::size_t horizon, std::size_t cond_dim, int T_d,
                                    std::uint64_t seed) {
  if (horizon < 1) throw ContractError("DenoiserModel: horizon must be positive");
  if (config.hidden < 1 || config.hidden_layers < 0 || config.freqs < 1) {
    throw ContractError("DenoiserConfig: sizes must be positive");
  }
  if (T_d < 1) throw ContractError("DenoiserModel: T_d must be positive");
  DenoiserModel m;
  m.config = config;
  m.horizon = horizon;
  m.cond_dim = cond_dim;
  m.T_d = T_d;
  Rng rng(seed);
  m.net = ad::add_mlp(m.params, "den", denoiser_spec(config, horizon, cond_dim), rng);
  return m;
}

void DenoiserModel::rebind() { net = ad::Mlp::resolve(denoiser_spec(config, horizon, cond_dim), "den", params); }

std::size_t DenoiserModel::input_width() const { return horizon + 2 * static_cast<std::size_t>(config.freqs) + cond_dim; }

Matrix DenoiserModel::predict(const Matrix& y_tau, int tau, const Matrix& cond) const {
  if (tau < 1 || tau > T_d) throw RangeError("denoiser: step outside [1, T_d]");
  const std::vector<int> taus(static_cast<std::size_t>(y_tau.rows()), tau);
  return ad::mlp_apply(net, params, denoiser_input(*this, y_tau, taus, cond));
}

Var DenoiserModel::forward(const ad::BoundParams& bound, const Var& y_tau, const std::vector<int>& taus,
                           const Matrix& cond) const {
  ad::Tape& tape = y_tau.tape();
  const Eigen::Index n = y_tau.value().rows();
  if (static_cast<std::size_t>(n) != taus.size()) throw ContractError("denoiser: one step per row required");
  if (static_cast<std::size_t>(y_tau.value().cols()) != horizon) throw ContractError("denoiser: y_tau width mismatch");
  Matrix side(n, static_cast<Eigen::Index>(2 * static_cast<std::size_t>(config.freqs) + cond_dim));
  side << embedding_rows(taus, T_d, config.freqs), broadcast_cond(cond, n, cond_dim);
  const Var in = ad::concat_cols({y_tau, tape.constant(side)});
  return ad::mlp_forward(net, bound, in);
}

nlohmann::ordered_json DenoiserModel::manifest() const {
  nlohmann::ordered_json j;
  j["format"] = "odeguide.denoiser/1";
  j["horizon"] = horizon;
  j["cond_dim"] = cond_dim;
  j["T_d"] = T_d;
  j["hidden"] = config.hidden;
  j["hidden_layers"] = config.hidden_layers;
  j["activation"] = std::string(ad::activation_name(config.activation));
  j["freqs"] = config.freqs;
  return j;
}

void DiffusionData::validate() const {
  const Eigen::Index n = y0.rows();
  if (n < 1) throw ContractError("DiffusionData: no rows");
  if (mask.rows() != n || mask.cols() != y0.cols()) throw ContractError("DiffusionData: mask shape mismatch");
  if (cond.rows() != n) throw ContractError("DiffusionData: condition rows mismatch");
  if (weights.size() != static_cast<std::size_t>(n)) throw ContractError("DiffusionData: one weight per row required");
  if (!y0.allFinite() || !cond.allFinite()) throw ContractError("DiffusionData: non-finite values");
}

Var diffusion_loss(const DenoiserModel& model, const ad::BoundParams& bound, const DiffusionSchedule& s,
                   const DiffusionData& data, const std::vector<std::size_t>& rows, const std::vector<int>& taus,
                   const Matrix& noise) {
  if (rows.empty() || rows.size() != taus.size()) throw ContractError("diffusion_loss: rows and steps must match");
  const auto n = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index T = data.y0.cols();
  if (noise.rows() != n || noise.cols() != T) throw ContractError("diffusion_loss: noise shape mismatch");
  Matrix y0(n, T), mask(n, T), cond(n, data.cond.cols()), y_tau(n, T), scale(n, 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]);
    const int tau = taus[static_cast<std::size_t>(r)];
    s.check_step(tau);
    y0.row(r) = data.y0.row(i);
    mask.row(r) = data.mask.row(i);
    cond.row(r) = data.cond.row(i);
    y_tau.row(r) = forward_sample(data.y0.row(i), tau, s, noise.row(r));
    scale(r, 0) = data.weights[static_cast<std::size_t>(i)] * s.loss_weights[static_cast<std::size_t>(tau)];
  }
  ad::Tape& tape = bound.vars.front().tape();
  const Var pred = model.forward(bound, tape.constant(y_tau), taus, cond);
  const Var err = ad::square(pred - tape.constant(y0)) * tape.constant(mask);
  return ad::sum(ad::row_sum(err) * tape.constant(scale)) * (1.0 / static_cast<double>(n));
}

DiffusionDraw draw_diffusion_batch(const DiffusionData& data, const DiffusionSchedule& s,
                                   const std::vector<std::size_t>& rows, Rng& rng) {
  DiffusionDraw d;
  d.rows = rows;
  d.taus.resize(rows.size());
  d.noise.resize(static_cast<Eigen::Index>(rows.size()), data.y0.cols());
  std::uniform_int_distribution<int> pick(1, s.T_d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    d.taus[r] = pick(rng);
    for (Eigen::Index c = 0; c < data.y0.cols(); ++c) d.noise(static_cast<Eigen::Index>(r), c) = standard_normal(rng);
  }
  return d;
}

namespace {

ad::Program loss_program(const DenoiserModel& m, const DiffusionSchedule& s, const DiffusionData& data,
                         const DiffusionDraw& d) {
  return [&m, &s, &data, &d](ad::Tape&, const ad::BoundParams& bound, std::span<const Var>) {
    return diffusion_loss(m, bound, s, data, d.rows, d.taus, d.noise);
  };
}

}  // namespace

TrainResult train_diffusion(DenoiserModel& m, const DiffusionSchedule& s, const DiffusionData& data,
                            const DiffusionTrainConfig& cfg) {
  data.validate();
  if (static_cast<std::size_t>(data.y0.cols()) != m.horizon) throw ContractError("train_diffusion: horizon mismatch");
  if (static_cast<std::size_t>(data.cond.cols()) != m.cond_dim) throw ContractError("train_diffusion: cond mismatch");
  if (m.T_d != s.T_d) throw ContractError("train_diffusion: schedule length differs from the model");
  if (cfg.batch_size < 1) throw ContractError("train_diffusion: batch_size must be positive");

  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  Rng eval_rng(mix_seed(cfg.seed, 0xE7A1));
  const DiffusionDraw eval = draw_diffusion_batch(data, s, all, eval_rng);
  auto eval_loss = [&]() { return ad::evaluate(loss_program(m, s, data, eval), m.params); };

  TrainResult res;
  res.initial_loss = eval_loss();
  res.loss_curve.push_back(res.initial_loss);
  ad::AdamState adam = ad::AdamState::init(m.params);
  ad::AdamConfig acfg;
  acfg.lr = cfg.lr;
  const std::size_t per_epoch = (all.size() + cfg.batch_size - 1) / cfg.batch_size;
  const double total = static_cast<double>(per_epoch * cfg.epochs);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, epoch + 1));
    std::vector<std::size_t> order = all;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> idx(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(start + cfg.batch_size, order.size())));
      const DiffusionDraw d = draw_diffusion_batch(data, s, idx, rng);
      ad::GradRecord g = ad::value_and_grad(loss_program(m, s, data, d), m.params);
      if (!std::isfinite(g.loss) || !g.grad.all_finite()) throw TrainingError("diffusion training diverged", step);
      ad::clip_grad_norm(g.grad, cfg.clip_norm);
      if (cfg.cosine_decay) acfg.lr = 0.5 * cfg.lr * (1.0 + std::cos(M_PI * static_cast<double>(step) / total));
      ad::adam_step(m.params, g.grad, adam, acfg);
      ++step;
    }
    const double l = eval_loss();
    if (!std::isfinite(l)) throw TrainingError("diffusion training diverged", step);
    res.loss_curve.push_back(l);
  }
  res.final_loss = res.loss_curve.back();
  return res;
}

Denoiser conditioned(const DenoiserModel& model, const Matrix& cond) {
  return [&model, cond](const Matrix& y_tau, int tau) { return model.predict(y_tau, tau, cond); };
}

SampleEnsemble sample(const Denoiser& denoiser, std::size_t horizon, const DiffusionSchedule& s,
                      const GuidanceHook& guidance, std::size_t n_samples, std::uint64_t seed, NoiseScale mode) {
  if (n_samples < 1) throw ContractError("sample: n_samples must be positive");
  if (horizon < 1) throw ContractError("sample: horizon must be positive");
  const auto T = static_cast<Eigen::Index>(horizon);
  SampleEnsemble out{Matrix(static_cast<Eigen::Index>(n_samples), T), seed};
  // Each member runs its own chain so that its result does not depend on the ensemble size.
  for (std::size_t i = 0; i < n_samples; ++i) {
    Rng rng(mix_seed(seed, i));
    auto draw = [&]() {
      Matrix z(1, T);
      for (Eigen::Index c = 0; c < T; ++c) z(0, c) = standard_normal(rng);
      return z;
    };
    Matrix y = draw();
    for (int tau = s.T_d; tau >= 1; --tau) {
      Matrix y0_hat = denoiser(y, tau);
      if (y0_hat.rows() != 1 || y0_hat.cols() != T) throw ContractError("sample: denoiser output shape mismatch");
      if (guidance) y0_hat = guidance(y0_hat, tau);
      const Matrix z = tau > 1 ? draw() : Matrix::Zero(1, T);
      y = reverse_step(y, tau, y0_hat, s, z, mode);
    }
    if (!y.allFinite()) throw TrainingError("sample: non-finite sample", i);
    out.samples.row(static_cast<Eigen::Index>(i)) = y;
  }
  return out;
}

std::size_t condition_width(std::size_t horizon, std::size_t x_dim) { return horizon * (2 + x_dim); }

std::vector<double> condition_vector(const HybridCpModel& hybrid, const HybridPrediction& pred,
                                     const std::vector<double>& a) {
  const std::size_t T = pred.y.size();
  if (a.size() != T) throw ContractError("condition_vector: treatment length differs from the prediction");
  const std::size_t dx = hybrid.x_dim;
  std::vector<double> out;
  out.reserve(condition_width(T, dx));
  for (std::size_t t = 0; t < T; ++t) out.push_back(hybrid.stats.y(pred.y[t]));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < dx; ++k) {
      out.push_back(hybrid.stats.x(pred.x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)), k));
    }
  }
  out.insert(out.end(), a.begin(), a.end());
  return out;
}

DiffusionData build_diffusion_data(const Dataset& ds, const HybridCpModel& hybrid, const PropensityModel* propensity) {
  if (ds.units.empty()) throw ContractError("build_diffusion_data: empty dataset");
  const std::size_t T = ds.horizon();
  const auto n = static_cast<Eigen::Index>(ds.units.size());
  DiffusionData d;
  d.y0.resize(n, static_cast<Eigen::Index>(T));
  d.mask.resize(n, static_cast<Eigen::Index>(T));
  d.cond.resize(n, static_cast<Eigen::Index>(condition_width(T, hybrid.x_dim)));
  d.weights.assign(ds.units.size(), 1.0);
  for (Eigen::Index r = 0; r < n; ++r) {
    const UnitRecord& u = ds.units[static_cast<std::size_t>(r)];
    const Trajectory& f = u.factual;
    const HybridPrediction p = predict(hybrid, initial_observation(f), u.factual_treatment, f.t);
    const std::vector<double> c = condition_vector(hybrid, p, f.a);
    for (std::size_t k = 0; k < c.size(); ++k) d.cond(r, static_cast<Eigen::Index>(k)) = c[k];
    for (std::size_t t = 0; t < T; ++t) {
      const bool obs = f.observed[t] != 0;
      d.y0(r, static_cast<Eigen::Index>(t)) = hybrid.stats.y(obs ? f.y[t] : p.y[t]);
      d.mask(r, static_cast<Eigen::Index>(t)) = obs ? 1.0 : 0.0;
    }
    if (propensity != nullptr) d.weights[static_cast<std::size_t>(r)] = propensity_weight(*propensity, u);
  }
  return d;
}

}  // namespace odeguide
