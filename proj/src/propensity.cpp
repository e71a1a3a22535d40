#include "odeguide/propensity.hpp"

#include <cmath>
#include <sstream>

#include "odeguide/errors.hpp"

namespace odeguide {

namespace {

double logistic(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

double a_prev_at(const Trajectory& f, std::size_t t) { return t == 0 ? 0.0 : f.a[t - 1]; }

std::vector<double> row(const Eigen::MatrixXd& x, std::size_t t) {
  std::vector<double> out(static_cast<std::size_t>(x.cols()));
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k));
  return out;
}

}  // namespace

double PropensityModel::prob_treated(const std::vector<double>& x_t, double a_prev) const {
  if (x_t.size() + 1 != weights.size()) throw ContractError("PropensityModel: covariate width mismatch");
  double v = bias + weights.back() * a_prev;
  for (std::size_t k = 0; k < x_t.size(); ++k) v += weights[k] * (x_t[k] - x_mean[k]) / x_sd[k];
  return logistic(v);
}

double PropensityModel::prob_observed(const std::vector<double>& x_t, double a_prev, double a_t) const {
  const double p = prob_treated(x_t, a_prev);
  return a_t > 0.5 ? p : 1.0 - p;
}

nlohmann::ordered_json PropensityModel::to_json() const {
  nlohmann::ordered_json j;
  j["weights"] = weights;
  j["bias"] = bias;
  j["x_mean"] = x_mean;
  j["x_sd"] = x_sd;
  j["history"] = history;
  j["floor"] = floor;
  return j;
}

PropensityModel PropensityModel::from_json(const nlohmann::ordered_json& j) {
  PropensityModel m;
  m.weights = j.at("weights").get<std::vector<double>>();
  m.bias = j.at("bias").get<double>();
  m.x_mean = j.at("x_mean").get<std::vector<double>>();
  m.x_sd = j.at("x_sd").get<std::vector<double>>();
  m.history = j.at("history").get<std::size_t>();
  m.floor = j.at("floor").get<double>();
  return m;
}

Eigen::MatrixXd carry_forward(const Trajectory& traj) {
  Eigen::MatrixXd x = traj.x;
  for (Eigen::Index t = 1; t < x.rows(); ++t) {
    if (traj.observed[static_cast<std::size_t>(t)] == 0) x.row(t) = x.row(t - 1);
  }
  return x;
}

PropensityModel fit_propensity(const Dataset& ds, const PropensityConfig& cfg) {
  if (ds.units.empty()) throw ContractError("fit_propensity: empty dataset");
  if (cfg.history < 1) throw ContractError("fit_propensity: history must be positive");
  if (!(cfg.floor > 0.0 && cfg.floor < 1.0)) throw ContractError("fit_propensity: floor must lie in (0, 1)");
  const std::size_t dx = ds.covariate_dim();

  std::vector<std::vector<double>> feats;
  std::vector<double> labels;
  for (const UnitRecord& u : ds.units) {
    const Eigen::MatrixXd x = carry_forward(u.factual);
    for (std::size_t t = 1; t < u.factual.length(); ++t) {
      std::vector<double> f = row(x, t);
      f.push_back(u.factual.a[t - 1]);
      feats.push_back(std::move(f));
      labels.push_back(u.factual.a[t] > 0.5 ? 1.0 : 0.0);
    }
  }
  if (feats.empty()) throw ContractError("fit_propensity: trajectories need at least two points");

  PropensityModel m;
  m.history = cfg.history;
  m.floor = cfg.floor;
  m.x_mean.assign(dx, 0.0);
  m.x_sd.assign(dx, 1.0);
  const auto n = static_cast<double>(feats.size());
  for (std::size_t k = 0; k < dx; ++k) {
    double s = 0.0, ss = 0.0;
    for (const auto& f : feats) s += f[k];
    const double mu = s / n;
    for (const auto& f : feats) ss += (f[k] - mu) * (f[k] - mu);
    const double sd = std::sqrt(ss / n);
    m.x_mean[k] = mu;
    m.x_sd[k] = sd > 1e-12 ? sd : 1.0;
  }

  // Adam on the mean negative log-likelihood with a small ridge term.
  const std::size_t p = dx + 2;
  Eigen::MatrixXd X(static_cast<Eigen::Index>(feats.size()), static_cast<Eigen::Index>(p));
  Eigen::VectorXd y(static_cast<Eigen::Index>(feats.size()));
  for (std::size_t i = 0; i < feats.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t k = 0; k < dx; ++k) X(r, static_cast<Eigen::Index>(k)) = (feats[i][k] - m.x_mean[k]) / m.x_sd[k];
    X(r, static_cast<Eigen::Index>(dx)) = feats[i][dx];
    X(r, static_cast<Eigen::Index>(dx + 1)) = 1.0;
    y(r) = labels[i];
  }
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
  Eigen::VectorXd mom = w, vel = w;
  const double b1 = 0.9, b2 = 0.999;
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    const Eigen::VectorXd z = X * w;
    Eigen::VectorXd pr(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) pr(i) = logistic(z(i));
    Eigen::VectorXd g = X.transpose() * (pr - y) / n;
    g.head(static_cast<Eigen::Index>(dx + 1)) += cfg.l2 * w.head(static_cast<Eigen::Index>(dx + 1));
    mom = b1 * mom + (1.0 - b1) * g;
    vel = b2 * vel + (1.0 - b2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(it));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(it));
    w -= cfg.lr * (mom / c1).cwiseQuotient(((vel / c2).cwiseSqrt().array() + 1e-8).matrix());
  }
  if (!w.allFinite()) throw TrainingError("propensity fit diverged", cfg.iterations);
  m.weights.assign(w.data(), w.data() + dx + 1);
  m.bias = w(static_cast<Eigen::Index>(dx + 1));
  return m;
}

double propensity_weight(const std::vector<double>& probs, double floor) {
  if (probs.empty()) throw ContractError("propensity_weight: no probabilities");
  double prod = 1.0;
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("propensity_weight: probability outside [0, 1]");
    prod *= std::max(p, floor);
  }
  return 1.0 / prod;
}

double propensity_weight(const PropensityModel& model, const UnitRecord& unit) {
  const Trajectory& f = unit.factual;
  const std::size_t T = f.length();
  if (T < model.history) {
    std::ostringstream msg;
    msg << "propensity_weight: unit " << unit.id << " has " << T << " points, history " << model.history;
    throw ContractError(msg.str());
  }
  const Eigen::MatrixXd x = carry_forward(f);
  std::vector<double> probs;
  for (std::size_t t = T - model.history; t < T; ++t) {
    probs.push_back(model.prob_observed(row(x, t), a_prev_at(f, t), f.a[t]));
  }
  return propensity_weight(probs, model.floor);
}

}  // namespace odeguide
