#include "odeguide/hybrid_cp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "odeguide/errors.hpp"

namespace odeguide {

using ad::Matrix;
using ad::Var;

Var expert_rhs_op(const ExpertModel& model, const Var& z, const Matrix& drive) {
  const Eigen::Index E = static_cast<Eigen::Index>(model.dim());
  if (z.cols() != E || drive.rows() != z.rows() || drive.cols() != 1) {
    throw ContractError("expert_rhs_op: shape mismatch");
  }
  const Matrix& zv = z.value();
  Matrix out(zv.rows(), E);
  StateVector row(static_cast<std::size_t>(E));
  for (Eigen::Index r = 0; r < zv.rows(); ++r) {
    for (Eigen::Index c = 0; c < E; ++c) row[static_cast<std::size_t>(c)] = zv(r, c);
    const StateVector d = model.derivative(row, drive(r, 0));
    for (Eigen::Index c = 0; c < E; ++c) out(r, c) = d[static_cast<std::size_t>(c)];
  }
  const ExpertModel* m = &model;
  return z.tape().record(std::move(out), {z}, [m, z, drive](ad::Tape& t, const Matrix&, const Matrix& g) {
    const Matrix& zv = z.value();
    const Eigen::Index E = zv.cols();
    Matrix gz(zv.rows(), E);
    StateVector row(static_cast<std::size_t>(E));
    for (Eigen::Index r = 0; r < zv.rows(); ++r) {
      for (Eigen::Index c = 0; c < E; ++c) row[static_cast<std::size_t>(c)] = zv(r, c);
      gz.row(r) = g.row(r) * m->jacobian(row, drive(r, 0));
    }
    t.accumulate(z, gz);
  });
}

Standardizer Standardizer::fit(const Dataset& ds) {
  Standardizer s;
  const std::size_t dx = ds.covariate_dim();
  double sy = 0.0, syy = 0.0, n = 0.0;
  std::vector<double> sx(dx, 0.0), sxx(dx, 0.0);
  for (const auto& u : ds.units) {
    const Trajectory& tr = u.factual;
    for (std::size_t k = 0; k < tr.length(); ++k) {
      if (!tr.observed[k]) continue;
      n += 1.0;
      sy += tr.y[k];
      syy += tr.y[k] * tr.y[k];
      for (std::size_t i = 0; i < dx; ++i) {
        const double v = tr.x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i));
        sx[i] += v;
        sxx[i] += v * v;
      }
    }
  }
  if (n == 0.0) throw ContractError("Standardizer: no observed points");
  auto sd = [n](double s1, double s2) {
    const double var = std::max(s2 / n - (s1 / n) * (s1 / n), 0.0);
    const double v = std::sqrt(var);
    return v > 1e-8 ? v : 1.0;
  };
  s.y_mean = sy / n;
  s.y_sd = sd(sy, syy);
  for (std::size_t i = 0; i < dx; ++i) {
    s.x_mean.push_back(sx[i] / n);
    s.x_sd.push_back(sd(sx[i], sxx[i]));
  }
  return s;
}

nlohmann::ordered_json Standardizer::to_json() const {
  return {{"y_mean", y_mean}, {"y_sd", y_sd}, {"x_mean", x_mean}, {"x_sd", x_sd}};
}

Standardizer Standardizer::from_json(const nlohmann::ordered_json& j) {
  Standardizer s;
  s.y_mean = j.at("y_mean");
  s.y_sd = j.at("y_sd");
  s.x_mean = j.at("x_mean").get<std::vector<double>>();
  s.x_sd = j.at("x_sd").get<std::vector<double>>();
  return s;
}

namespace {

ad::MlpSpec net(const HybridConfig& c, int in, int out) {
  return ad::MlpSpec::make(in, std::vector<int>(static_cast<std::size_t>(c.hidden_layers), c.hidden), out,
                           c.activation);
}

struct NetShapes {
  ad::MlpSpec f_y, f_x, enc_x, enc_y, enc_e, read_y, read_x;
};

NetShapes shapes(const HybridConfig& c, std::size_t x_dim) {
  const int My = c.latent_y, Mx = c.latent_x, E = static_cast<int>(c.expert.dim()), dx = static_cast<int>(x_dim);
  return {net(c, My + E + Mx + 1, My), net(c, Mx + My + 1, Mx), net(c, dx + 2, Mx), net(c, Mx + 2, My),
          net(c, dx + 2, E),           net(c, E + My + Mx + 1, 1), net(c, Mx + 1, dx)};
}

}  // namespace

HybridCpModel HybridCpModel::create(const HybridConfig& config, std::size_t x_dim, const Standardizer& stats,
                                    std::uint64_t seed) {
  config.expert.validate();
  if (config.latent_y < 1 || config.latent_x < 1 || config.hidden < 1 || config.hidden_layers < 0) {
    throw ContractError("HybridConfig: latent and hidden sizes must be positive");
  }
  if (!(config.dt > 0.0)) throw ContractError("HybridConfig: dt must be positive");
  if (x_dim < 1) throw ContractError("HybridCpModel: at least one covariate required");
  HybridCpModel m;
  m.config = config;
  m.x_dim = x_dim;
  m.stats = stats;
  const NetShapes s = shapes(config, x_dim);
  Rng rng(seed);
  m.f_y = ad::add_mlp(m.params, "f_y", s.f_y, rng);
  m.f_x = ad::add_mlp(m.params, "f_x", s.f_x, rng);
  m.enc_x = ad::add_mlp(m.params, "enc_x", s.enc_x, rng);
  m.enc_y = ad::add_mlp(m.params, "enc_y", s.enc_y, rng);
  m.enc_e = ad::add_mlp(m.params, "enc_e", s.enc_e, rng);
  m.read_y = ad::add_mlp(m.params, "read_y", s.read_y, rng);
  m.read_x = ad::add_mlp(m.params, "read_x", s.read_x, rng);
  return m;
}

std::size_t HybridCpModel::state_dim() const {
  return static_cast<std::size_t>(config.latent_y + config.latent_x) + expert_dim();
}

void HybridCpModel::rebind() {
  const NetShapes s = shapes(config, x_dim);
  f_y = ad::Mlp::resolve(s.f_y, "f_y", params);
  f_x = ad::Mlp::resolve(s.f_x, "f_x", params);
  enc_x = ad::Mlp::resolve(s.enc_x, "enc_x", params);
  enc_y = ad::Mlp::resolve(s.enc_y, "enc_y", params);
  enc_e = ad::Mlp::resolve(s.enc_e, "enc_e", params);
  read_y = ad::Mlp::resolve(s.read_y, "read_y", params);
  read_x = ad::Mlp::resolve(s.read_x, "read_x", params);
}

nlohmann::ordered_json HybridCpModel::manifest() const {
  nlohmann::ordered_json j;
  j["format"] = "odeguide.hybrid/1";
  j["family"] = family_name(config.expert.family);
  j["latent_y"] = config.latent_y;
  j["latent_x"] = config.latent_x;
  j["hidden"] = config.hidden;
  j["hidden_layers"] = config.hidden_layers;
  j["activation"] = std::string(ad::activation_name(config.activation));
  j["dt"] = config.dt;
  j["expert_scale"] = config.expert_scale;
  j["x_dim"] = x_dim;
  j["stats"] = stats.to_json();
  return j;
}

Var normalize_expert(const HybridConfig& config, const Var& positive) {
  if (config.expert.family == ExpertFamily::Pkpd) return positive;
  const double N = config.expert.family == ExpertFamily::Seirm ? config.expert.seirm.N : config.expert.seirhd.N;
  return ad::div(positive, ad::row_sum(positive)) * N;
}

std::vector<double> normalize_expert(const HybridConfig& config, const std::vector<double>& positive) {
  ad::Tape tape(false);
  Matrix m(1, static_cast<Eigen::Index>(positive.size()));
  for (std::size_t i = 0; i < positive.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = positive[i];
  const Matrix out = normalize_expert(config, tape.constant(m)).value();
  return {out.data(), out.data() + out.size()};
}

namespace {

struct Latents {
  Var z_y, z_x, z_e;
};

template <typename F>
Matrix column_of(const std::vector<TreatmentSchedule>& schedules, F f) {
  Matrix m(static_cast<Eigen::Index>(schedules.size()), 1);
  for (std::size_t b = 0; b < schedules.size(); ++b) m(static_cast<Eigen::Index>(b), 0) = f(schedules[b]);
  return m;
}

Latents encode(const HybridCpModel& m, const ad::BoundParams& bp, const Var& init) {
  const Eigen::Index dx = static_cast<Eigen::Index>(m.x_dim);
  const Var z_x = ad::mlp_forward(m.enc_x, bp, init);
  const Var ay = ad::slice_cols(init, dx, 2);
  const Var z_y = ad::mlp_forward(m.enc_y, bp, ad::concat_cols({z_x, ay}));
  const Var raw = ad::mlp_forward(m.enc_e, bp, init);
  const Var z_e = normalize_expert(m.config, ad::softplus(raw) * (1.0 / m.config.expert_scale));
  return {z_y, z_x, z_e};
}

Var derivative(const HybridCpModel& m, const ad::BoundParams& bp, const Latents& z, const Var& lag, const Var& a,
               const Matrix& drive) {
  const Var dzy = ad::mlp_forward(m.f_y, bp, ad::concat_cols({z.z_y, z.z_e * m.config.expert_scale, z.z_x, a}));
  const Var dzx = ad::mlp_forward(m.f_x, bp, ad::concat_cols({z.z_x, lag, a}));
  const Var dze = expert_rhs_op(m.config.expert, z.z_e, drive);
  return ad::concat_cols({dzy, dzx, dze});
}

Latents split(const HybridCpModel& m, const Var& state) {
  const Eigen::Index My = m.config.latent_y, Mx = m.config.latent_x;
  const Eigen::Index E = static_cast<Eigen::Index>(m.expert_dim());
  return {ad::slice_cols(state, 0, My), ad::slice_cols(state, My, Mx), ad::slice_cols(state, My + Mx, E)};
}

std::pair<Var, Var> read(const HybridCpModel& m, const ad::BoundParams& bp, const Latents& z, const Var& a) {
  const Var y = ad::mlp_forward(m.read_y, bp, ad::concat_cols({z.z_e * m.config.expert_scale, z.z_y, z.z_x, a}));
  const Var x = ad::mlp_forward(m.read_x, bp, ad::concat_cols({z.z_x, a}));
  return {y, x};
}

std::vector<std::size_t> grid_positions(const std::vector<double>& times, double dt) {
  if (times.empty()) throw ContractError("hybrid: no measurement times");
  std::vector<std::size_t> idx;
  for (double t : times) {
    const double pos = (t - times.front()) / dt;
    const double r = std::round(pos);
    if (std::abs(pos - r) > 1e-6) throw ContractError("hybrid: measurement time off the solver grid");
    if (!idx.empty() && static_cast<std::size_t>(r) <= idx.back()) {
      throw ContractError("hybrid: measurement times must increase");
    }
    idx.push_back(static_cast<std::size_t>(r));
  }
  return idx;
}

Matrix row_matrix(const std::vector<double>& v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

std::vector<double> row_vector(const Matrix& m) { return {m.data(), m.data() + m.size()}; }

Matrix init_row(const HybridCpModel& m, const InitObservation& obs) {
  if (obs.x0.size() != m.x_dim) throw ContractError("hybrid: x0 has the wrong dimension");
  Matrix r(1, static_cast<Eigen::Index>(m.x_dim + 2));
  for (std::size_t i = 0; i < m.x_dim; ++i) r(0, static_cast<Eigen::Index>(i)) = m.stats.x(obs.x0[i], i);
  r(0, static_cast<Eigen::Index>(m.x_dim)) = obs.a0;
  r(0, static_cast<Eigen::Index>(m.x_dim + 1)) = m.stats.y(obs.y0);
  return r;
}

}  // namespace

HybridOutputs hybrid_forward(const HybridCpModel& m, const ad::BoundParams& bp, const Matrix& init,
                             const std::vector<TreatmentSchedule>& schedules, const std::vector<double>& times) {
  ad::Tape& tape = bp.vars.front().tape();
  if (static_cast<std::size_t>(init.rows()) != schedules.size()) throw ContractError("hybrid: batch size mismatch");
  if (init.cols() != static_cast<Eigen::Index>(m.x_dim + 2)) throw ContractError("hybrid: init width mismatch");
  const std::vector<std::size_t> positions = grid_positions(times, m.config.dt);
  const double dt = m.config.dt;
  const double t0 = times.front();
  const ExpertModel& expert = m.config.expert;

  auto a_at = [&](double t) {
    return tape.constant(column_of(schedules, [t](const TreatmentSchedule& s) { return s.indicator(t); }));
  };
  auto drive_at = [&](double t) {
    return column_of(schedules, [&expert, t](const TreatmentSchedule& s) { return expert.drive(t, s); });
  };

  const Latents z0 = encode(m, bp, tape.constant(init));
  Var state = ad::concat_cols({z0.z_y, z0.z_x, z0.z_e});
  Var prev_zy = z0.z_y;

  HybridOutputs out;
  std::vector<Var> ys, xs;
  auto emit = [&](double t) {
    const Latents z = split(m, state);
    auto [y, x] = read(m, bp, z, a_at(t));
    ys.push_back(y);
    xs.push_back(x);
    out.expert.push_back(z.z_e);
  };
  emit(t0);
  std::size_t next = 1;
  for (std::size_t s = 0; s < positions.back(); ++s) {
    const double t = t0 + static_cast<double>(s) * dt;
    const Var lag = prev_zy;
    const Var a_lo = a_at(t), a_mid = a_at(t + 0.5 * dt), a_hi = a_at(t + dt);
    const Matrix d_lo = drive_at(t), d_mid = drive_at(t + 0.5 * dt), d_hi = drive_at(t + dt);
    const Var k1 = derivative(m, bp, split(m, state), lag, a_lo, d_lo);
    const Var k2 = derivative(m, bp, split(m, state + k1 * (0.5 * dt)), lag, a_mid, d_mid);
    const Var k3 = derivative(m, bp, split(m, state + k2 * (0.5 * dt)), lag, a_mid, d_mid);
    const Var k4 = derivative(m, bp, split(m, state + k3 * dt), lag, a_hi, d_hi);
    prev_zy = ad::slice_cols(state, 0, m.config.latent_y);
    state = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if (next < positions.size() && s + 1 == positions[next]) {
      emit(t0 + static_cast<double>(s + 1) * dt);
      ++next;
    }
  }
  out.y = ad::concat_cols(std::span<const Var>(ys));
  out.x = ad::concat_cols(std::span<const Var>(xs));
  return out;
}

LatentState encode_init(const HybridCpModel& m, const InitObservation& obs) {
  ad::Tape tape(false);
  const ad::BoundParams bp = ad::bind(tape, m.params, false);
  const Latents z = encode(m, bp, tape.constant(init_row(m, obs)));
  return {row_vector(z.z_y.value()), row_vector(z.z_x.value()), row_vector(z.z_e.value())};
}

LatentState hybrid_rhs(const HybridCpModel& m, const LatentState& latents, const std::vector<double>& z_y_lag,
                       double a, double drive) {
  ad::Tape tape(false);
  const ad::BoundParams bp = ad::bind(tape, m.params, false);
  const Latents z{tape.constant(row_matrix(latents.z_y)), tape.constant(row_matrix(latents.z_x)),
                  tape.constant(row_matrix(latents.z_e))};
  const Var d = derivative(m, bp, z, tape.constant(row_matrix(z_y_lag)), tape.constant(Matrix::Constant(1, 1, a)),
                           Matrix::Constant(1, 1, drive));
  const Latents parts = split(m, d);
  return {row_vector(parts.z_y.value()), row_vector(parts.z_x.value()), row_vector(parts.z_e.value())};
}

std::pair<double, std::vector<double>> readout(const HybridCpModel& m, const LatentState& latents, double a) {
  ad::Tape tape(false);
  const ad::BoundParams bp = ad::bind(tape, m.params, false);
  const Latents z{tape.constant(row_matrix(latents.z_y)), tape.constant(row_matrix(latents.z_x)),
                  tape.constant(row_matrix(latents.z_e))};
  auto [y, x] = read(m, bp, z, tape.constant(Matrix::Constant(1, 1, a)));
  std::vector<double> xr = row_vector(x.value());
  for (std::size_t i = 0; i < xr.size(); ++i) xr[i] = m.stats.x_inv(xr[i], i);
  return {m.stats.y_inv(y.scalar()), xr};
}

InitObservation initial_observation(const Trajectory& traj) {
  if (traj.length() == 0 || !traj.observed[0]) throw ContractError("hybrid: first time point must be observed");
  InitObservation obs;
  for (Eigen::Index i = 0; i < traj.x.cols(); ++i) obs.x0.push_back(traj.x(0, i));
  obs.a0 = traj.a[0];
  obs.y0 = traj.y[0];
  return obs;
}

HybridPrediction predict(const HybridCpModel& m, const InitObservation& obs, const TreatmentSchedule& schedule,
                         const std::vector<double>& times) {
  ad::Tape tape(false);
  const ad::BoundParams bp = ad::bind(tape, m.params, false);
  const HybridOutputs o = hybrid_forward(m, bp, init_row(m, obs), {schedule}, times);
  HybridPrediction p;
  p.t = times;
  const std::size_t T = times.size();
  p.x.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(m.x_dim));
  const Matrix& y = o.y.value();
  const Matrix& x = o.x.value();
  for (std::size_t k = 0; k < T; ++k) {
    p.y.push_back(m.stats.y_inv(y(0, static_cast<Eigen::Index>(k))));
    for (std::size_t i = 0; i < m.x_dim; ++i) {
      p.x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) =
          m.stats.x_inv(x(0, static_cast<Eigen::Index>(k * m.x_dim + i)), i);
    }
    p.expert.push_back(row_vector(o.expert[k].value()));
  }
  return p;
}

HybridBatch make_batch(const HybridCpModel& m, const Dataset& ds, const std::vector<std::size_t>& units) {
  if (units.empty()) throw ContractError("make_batch: empty batch");
  HybridBatch b;
  const std::size_t T = ds.horizon();
  const std::size_t dx = m.x_dim;
  if (ds.covariate_dim() != dx) throw ContractError("make_batch: covariate dimension mismatch");
  const Eigen::Index B = static_cast<Eigen::Index>(units.size());
  b.times = ds.units.front().factual.t;
  b.init.resize(B, static_cast<Eigen::Index>(dx + 2));
  b.y = Matrix::Zero(B, static_cast<Eigen::Index>(T));
  b.y_mask = Matrix::Zero(B, static_cast<Eigen::Index>(T));
  b.x = Matrix::Zero(B, static_cast<Eigen::Index>(T * dx));
  b.x_mask = Matrix::Zero(B, static_cast<Eigen::Index>(T * dx));
  for (Eigen::Index r = 0; r < B; ++r) {
    const UnitRecord& u = ds.units.at(units[static_cast<std::size_t>(r)]);
    const Trajectory& tr = u.factual;
    b.init.row(r) = init_row(m, initial_observation(tr));
    b.schedules.push_back(u.factual_treatment);
    for (std::size_t k = 0; k < T; ++k) {
      if (!tr.observed[k]) continue;
      const Eigen::Index kk = static_cast<Eigen::Index>(k);
      b.y(r, kk) = m.stats.y(tr.y[k]);
      b.y_mask(r, kk) = 1.0;
      for (std::size_t i = 0; i < dx; ++i) {
        const Eigen::Index c = static_cast<Eigen::Index>(k * dx + i);
        b.x(r, c) = m.stats.x(tr.x(kk, static_cast<Eigen::Index>(i)), i);
        b.x_mask(r, c) = 1.0;
      }
    }
  }
  return b;
}

Var hybrid_loss(const HybridCpModel& m, const ad::BoundParams& bp, const HybridBatch& batch) {
  ad::Tape& tape = bp.vars.front().tape();
  const HybridOutputs o = hybrid_forward(m, bp, batch.init, batch.schedules, batch.times);
  const double ny = batch.y_mask.sum();
  const double nx = batch.x_mask.sum();
  if (ny == 0.0) throw ContractError("hybrid_loss: no observed outcomes in batch");
  const Var ey = ad::mul(o.y - tape.constant(batch.y), tape.constant(batch.y_mask));
  Var loss = ad::sum(ad::square(ey)) * (1.0 / ny);
  if (nx > 0.0) {
    const Var ex = ad::mul(o.x - tape.constant(batch.x), tape.constant(batch.x_mask));
    loss = loss + ad::sum(ad::square(ex)) * (1.0 / nx);
  }
  return loss;
}

ad::Program hybrid_loss_program(const HybridCpModel& m, const HybridBatch& batch) {
  return [&m, &batch](ad::Tape&, const ad::BoundParams& bp, std::span<const Var>) { return hybrid_loss(m, bp, batch); };
}

TrainResult train_hybrid(HybridCpModel& m, const Dataset& ds, const HybridTrainConfig& cfg) {
  if (ds.units.empty()) throw ContractError("train_hybrid: empty dataset");
  if (cfg.batch_size < 1) throw ContractError("train_hybrid: batch_size must be positive");
  std::vector<std::size_t> all(ds.units.size());
  std::iota(all.begin(), all.end(), 0);
  const HybridBatch full = make_batch(m, ds, all);
  auto full_loss = [&]() { return ad::evaluate(hybrid_loss_program(m, full), m.params); };

  TrainResult res;
  res.initial_loss = full_loss();
  res.loss_curve.push_back(res.initial_loss);
  ad::AdamState adam = ad::AdamState::init(m.params);
  ad::AdamConfig acfg;
  acfg.lr = cfg.lr;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = all;
    Rng rng(mix_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(start + cfg.batch_size, order.size())));
      const HybridBatch batch = make_batch(m, ds, idx);
      ad::GradRecord g = ad::value_and_grad(hybrid_loss_program(m, batch), m.params);
      if (!std::isfinite(g.loss) || !g.grad.all_finite()) throw TrainingError("hybrid training diverged", step);
      ad::clip_grad_norm(g.grad, cfg.clip_norm);
      ad::adam_step(m.params, g.grad, adam, acfg);
      ++step;
    }
    const double l = full_loss();
    if (!std::isfinite(l)) throw TrainingError("hybrid training diverged", step);
    res.loss_curve.push_back(l);
  }
  res.final_loss = res.loss_curve.back();
  return res;
}

}  // namespace odeguide
