#include "odeguide/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "odeguide/errors.hpp"
#include "odeguide/metrics.hpp"

namespace odeguide {

using ad::Matrix;
using ad::Var;

CorrelationTarget parse_correlation_target(const std::string& name) {
  if (name == "expert") return CorrelationTarget::Expert;
  if (name == "difference") return CorrelationTarget::Difference;
  throw ConfigError("unknown correlation target '" + name + "' (expert, difference)");
}

std::string correlation_target_name(CorrelationTarget t) {
  return t == CorrelationTarget::Expert ? "expert" : "difference";
}

void GuidanceConfig::validate() const {
  if (!(eta >= 0.0) || !(nu >= 0.0) || !(direction_ratio >= 0.0)) {
    throw ContractError("GuidanceConfig: strengths must be nonnegative");
  }
  if (!(kappa > 0.0)) throw ContractError("GuidanceConfig: kappa must be positive");
  for (double e : eta_candidates) {
    if (!(e >= 0.0)) throw ContractError("GuidanceConfig: eta candidates must be nonnegative");
  }
}

GuidanceConfig GuidanceConfig::dex_preset() {
  GuidanceConfig c;
  c.eta = 1000.0;
  c.direction_ratio = 0.2;
  return c;
}

GuidanceConfig GuidanceConfig::covid_preset() {
  GuidanceConfig c;
  c.eta = 2000.0;
  c.direction_ratio = 1.0;
  return c;
}

namespace {

void require_same_grid(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    std::ostringstream msg;
    msg << what << ": trajectory lengths " << a << " and " << b << " differ";
    throw ContractError(msg.str());
  }
}

std::vector<double> difference(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return d;
}

// Rows of D give the per-step difference used by relation_direction.
Matrix direction_operator(std::size_t T) {
  const auto n = static_cast<Eigen::Index>(T);
  Matrix D = Matrix::Zero(n, n);
  if (T < 2) return D;
  for (Eigen::Index t = 0; t + 1 < n; ++t) {
    D(t, t) = -1.0;
    D(t, t + 1) = 1.0;
  }
  D(n - 1, n - 2) = -1.0;
  D(n - 1, n - 1) = 1.0;
  return D;
}

Matrix row_of(const std::vector<double>& v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

}  // namespace

double relation_value(const std::vector<double>& y1, const std::vector<double>& y2, std::size_t t) {
  require_same_grid(y1.size(), y2.size(), "relation_value");
  if (t >= y1.size()) throw RangeError("relation_value: index outside the grid");
  return y1[t] - y2[t];
}

double relation_direction(const std::vector<double>& y1, const std::vector<double>& y2, std::size_t t) {
  require_same_grid(y1.size(), y2.size(), "relation_direction");
  const std::size_t T = y1.size();
  if (t >= T) throw RangeError("relation_direction: index outside the grid");
  if (T < 2) return 0.0;
  const std::size_t lo = t + 1 < T ? t : t - 1;
  return (y1[lo + 1] - y2[lo + 1]) - (y1[lo] - y2[lo]);
}

FactualWindow FactualWindow::before(std::size_t divergence) {
  FactualWindow w;
  for (std::size_t t = 0; t < divergence; ++t) w.indices.push_back(t);
  return w;
}

double loss_cf(const std::vector<double>& y0_hat, const std::vector<double>& y0, const ExpertGuidanceSignals& s,
               const GuidanceConfig& cfg) {
  require_same_grid(y0_hat.size(), y0.size(), "loss_cf");
  require_same_grid(y0_hat.size(), s.f_cf.size(), "loss_cf");
  require_same_grid(y0_hat.size(), s.f_f.size(), "loss_cf");
  double value = 0.0, direction = 0.0;
  for (std::size_t t = 0; t < y0_hat.size(); ++t) {
    const double dv = relation_value(y0_hat, y0, t) - relation_value(s.f_cf, s.f_f, t);
    const double dd = relation_direction(y0_hat, y0, t) - relation_direction(s.f_cf, s.f_f, t);
    value += dv * dv;
    direction += dd * dd;
  }
  return (cfg.use_value ? value : 0.0) + (cfg.use_direction ? cfg.direction_ratio * direction : 0.0);
}

FactualLoss loss_f(const std::vector<double>& y0_hat, const std::vector<double>& y0, const FactualWindow& w) {
  require_same_grid(y0_hat.size(), y0.size(), "loss_f");
  FactualLoss out;
  out.empty_window = w.indices.empty();
  for (std::size_t t : w.indices) {
    if (t >= y0.size()) throw RangeError("loss_f: window index outside the grid");
    out.value += (y0[t] - y0_hat[t]) * (y0[t] - y0_hat[t]);
  }
  return out;
}

Var loss_cf(const Var& y0_hat, const std::vector<double>& y0, const ExpertGuidanceSignals& s,
            const GuidanceConfig& cfg) {
  const std::size_t T = static_cast<std::size_t>(y0_hat.value().cols());
  require_same_grid(T, y0.size(), "loss_cf");
  require_same_grid(T, s.f_cf.size(), "loss_cf");
  require_same_grid(T, s.f_f.size(), "loss_cf");
  ad::Tape& tape = y0_hat.tape();
  // Residual of the value relation; the direction residual is its image under D.
  const Var r = y0_hat - tape.constant(row_of(y0)) - tape.constant(row_of(difference(s.f_cf, s.f_f)));
  Var total = tape.constant(Matrix::Zero(1, 1));
  if (cfg.use_value) total = total + ad::sum(ad::square(r));
  if (cfg.use_direction && T >= 2) {
    const Var dr = ad::matmul(r, tape.constant(direction_operator(T).transpose()));
    total = total + cfg.direction_ratio * ad::sum(ad::square(dr));
  }
  return total;
}

Var loss_f(const Var& y0_hat, const std::vector<double>& y0, const FactualWindow& w) {
  const std::size_t T = static_cast<std::size_t>(y0_hat.value().cols());
  require_same_grid(T, y0.size(), "loss_f");
  Matrix sel = Matrix::Zero(1, static_cast<Eigen::Index>(T));
  for (std::size_t t : w.indices) {
    if (t >= T) throw RangeError("loss_f: window index outside the grid");
    sel(0, static_cast<Eigen::Index>(t)) = 1.0;
  }
  ad::Tape& tape = y0_hat.tape();
  return ad::sum(ad::square(y0_hat - tape.constant(row_of(y0))) * tape.constant(sel));
}

GuidanceGradients guidance_gradients(const Matrix& y0_hat, const std::vector<double>& y0,
                                     const ExpertGuidanceSignals& s, const FactualWindow& w,
                                     const GuidanceConfig& cfg) {
  GuidanceGradients g;
  {
    ad::Tape tape;
    const Var x = tape.variable(y0_hat);
    tape.backward(loss_cf(x, y0, s, cfg));
    g.cf = tape.grad(x);
  }
  {
    ad::Tape tape;
    const Var x = tape.variable(y0_hat);
    tape.backward(loss_f(x, y0, w));
    g.f = tape.grad(x);
  }
  return g;
}

Matrix guided_update(const Matrix& y0_hat, const Matrix& grad_cf, const Matrix& grad_f, double eta, double nu) {
  if (grad_cf.rows() != y0_hat.rows() || grad_cf.cols() != y0_hat.cols() || grad_f.rows() != y0_hat.rows() ||
      grad_f.cols() != y0_hat.cols()) {
    throw ContractError("guided_update: gradient shape differs from the prediction");
  }
  return y0_hat - eta * grad_cf - nu * grad_f;
}

GuidanceHook make_guidance_hook(const std::vector<double>& y0, const ExpertGuidanceSignals& s, const FactualWindow& w,
                                const GuidanceConfig& cfg) {
  cfg.validate();
  require_same_grid(y0.size(), s.f_cf.size(), "guidance");
  require_same_grid(y0.size(), s.f_f.size(), "guidance");
  return [y0, s, w, cfg](const Matrix& y0_hat, int) {
    const GuidanceGradients g = guidance_gradients(y0_hat, y0, s, w, cfg);
    return guided_update(y0_hat, g.cf, g.f, cfg.kappa * cfg.eta, cfg.kappa * cfg.nu);
  };
}

namespace {

std::vector<double> znorm(const std::vector<double>& v) {
  double mean = 0.0, ss = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size()));
  std::vector<double> out(v.size(), 0.0);
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) / sd;
  return out;
}

}  // namespace

Alignment align_factual(const std::vector<double>& expert_f, const std::vector<double>& observed_f) {
  if (expert_f.empty() || observed_f.empty()) throw ContractError("align_factual: empty sequence");
  Alignment a;
  a.path = dtw(znorm(expert_f), znorm(observed_f)).path;
  const double n = static_cast<double>(a.path.size());
  double me = 0.0, mo = 0.0;
  for (const auto& [i, j] : a.path) {
    me += expert_f[i];
    mo += observed_f[j];
  }
  me /= n;
  mo /= n;
  double sxy = 0.0, sxx = 0.0;
  for (const auto& [i, j] : a.path) {
    sxy += (expert_f[i] - me) * (observed_f[j] - mo);
    sxx += (expert_f[i] - me) * (expert_f[i] - me);
  }
  const double scale_ref = std::max(1.0, me * me);
  if (sxx <= 1e-24 * scale_ref * n) {
    a.scale = 1.0;
    a.shift = mo - me;
  } else {
    a.scale = sxy / sxx;
    a.shift = mo - a.scale * me;
  }
  return a;
}

ExpertGuidanceSignals aligned_signals(const std::vector<double>& expert_f, const std::vector<double>& expert_cf,
                                      const std::vector<double>& observed_f) {
  require_same_grid(expert_f.size(), expert_cf.size(), "aligned_signals");
  const Alignment a = align_factual(expert_f, observed_f);
  ExpertGuidanceSignals s;
  s.scale = a.scale;
  s.shift = a.shift;
  s.path = a.path;
  for (double v : expert_f) s.f_f.push_back(a.scale * v + a.shift);
  for (double v : expert_cf) s.f_cf.push_back(a.scale * v + a.shift);
  return s;
}

EtaSelection select_eta(const std::vector<double>& candidates, const std::function<double(double)>& correlation_of) {
  if (candidates.empty()) throw SelectionError("select_eta: no candidates");
  EtaSelection sel;
  bool any = false;
  double best = -std::numeric_limits<double>::infinity();
  for (double eta : candidates) {
    EtaCandidate c;
    c.eta = eta;
    c.correlation = correlation_of(eta);
    c.defined = std::isfinite(c.correlation);
    sel.sweep.push_back(c);
    if (!c.defined) continue;
    if (!any || c.correlation > best || (c.correlation == best && eta < sel.eta_star)) {
      best = c.correlation;
      sel.eta_star = eta;
      any = true;
    }
  }
  if (!any) throw SelectionError("select_eta: every candidate correlation is undefined");
  return sel;
}

double selection_correlation(const std::vector<double>& mean_cf, const std::vector<double>& observed_f,
                             const ExpertGuidanceSignals& s, CorrelationTarget target) {
  require_same_grid(mean_cf.size(), s.f_cf.size(), "selection_correlation");
  std::vector<double> a = mean_cf, b = s.f_cf;
  if (target == CorrelationTarget::Difference) {
    require_same_grid(mean_cf.size(), observed_f.size(), "selection_correlation");
    a = difference(mean_cf, observed_f);
    b = difference(s.f_cf, s.f_f);
  }
  try {
    return pearson(a, b);
  } catch (const ContractError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace odeguide
