#include "odeguide/expert_models.hpp"

#include <algorithm>
#include <cmath>

#include "odeguide/errors.hpp"

namespace odeguide {

namespace {

void require_dim(const StateVector& state, std::size_t dim, const char* who) {
  if (state.size() != dim) {
    throw ContractError(std::string(who) + ": expected state of dimension " + std::to_string(dim) + ", got " +
                        std::to_string(state.size()));
  }
}

void require_nonneg(double v, const char* name) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError(std::string(name) + " must be finite and >= 0");
}

void require_fraction(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw ParameterError(std::string(name) + " must lie in [0, 1]");
}

double hill(double c, const PkpdParams& p) {
  const double ch = std::pow(c, p.h_P);
  return p.E_max * ch / (std::pow(p.EC_50, p.h_P) + ch);
}

double hill_slope(double c, const PkpdParams& p) {
  const double kh = std::pow(p.EC_50, p.h_P);
  const double denom = kh + std::pow(c, p.h_P);
  return p.E_max * p.h_P * std::pow(c, p.h_P - 1.0) * kh / (denom * denom);
}

}  // namespace

void SeirmParams::validate() const {
  if (!(N > 0.0)) throw ParameterError("SEIRM: N must be positive");
  require_nonneg(beta, "beta");
  require_nonneg(alpha, "alpha");
  require_nonneg(gamma, "gamma");
  require_nonneg(mu, "mu");
}

void SeirhdParams::validate() const {
  if (!(N > 0.0)) throw ParameterError("SEIR-HD: N must be positive");
  require_nonneg(beta, "beta");
  require_nonneg(alpha, "alpha");
  require_fraction(delta, "delta");
  require_fraction(asymptomatic_fraction, "asymptomatic_fraction");
  require_fraction(hospital_death_fraction, "hospital_death_fraction");
  require_nonneg(presymptomatic_exit, "presymptomatic_exit");
  require_nonneg(severe_exit, "severe_exit");
  require_nonneg(gamma, "gamma");
  require_nonneg(hospital_death_rate, "hospital_death_rate");
}

void PkpdParams::validate() const {
  if (!(EC_50 > 0.0)) throw ParameterError("PKPD: EC_50 must be positive");
  if (!(h_P >= 1.0)) throw ParameterError("PKPD: h_P must be >= 1");
  for (double v : {k_IR, k_PF, k_O, E_max, k_Dex, k_2, k_3, k_DP, k_IIR, k_DC, h_C, k_1}) {
    if (!std::isfinite(v)) throw ParameterError("PKPD: non-finite rate");
  }
}

StateVector seirm_rhs(const StateVector& z, double /*t*/, const SeirmParams& p, double beta_t) {
  require_dim(z, 5, "seirm_rhs");
  if (!(p.N > 0.0)) throw ParameterError("SEIRM: N must be positive");
  const double inf = beta_t * z[0] * z[2] / p.N;
  return {-inf, inf - p.alpha * z[1], p.alpha * z[1] - (p.gamma + p.mu) * z[2], p.gamma * z[2], p.mu * z[2]};
}

StateVector seirhd_rhs(const StateVector& z, double /*t*/, const SeirhdParams& p, double beta_t) {
  require_dim(z, kSeirhdDim, "seirhd_rhs");
  if (!(p.N > 0.0)) throw ParameterError("SEIR-HD: N must be positive");
  const double inf = beta_t * z[kS] * (z[kIA] + z[kIP] + z[kIM] + z[kIS]) / p.N;
  const double e_out = p.alpha * z[kE];
  const double ip_out = p.presymptomatic_exit * z[kIP];
  const double is_out = p.severe_exit * z[kIS];
  StateVector d(kSeirhdDim);
  d[kS] = -inf;
  d[kE] = inf - e_out;
  d[kIA] = p.asymptomatic_fraction * e_out - p.gamma * z[kIA];
  d[kIP] = (1.0 - p.asymptomatic_fraction) * e_out - ip_out;
  d[kIM] = (1.0 - p.delta) * ip_out - p.gamma * z[kIM];
  d[kIS] = p.delta * ip_out - is_out;
  d[kHR] = (1.0 - p.hospital_death_fraction) * is_out - p.gamma * z[kHR];
  d[kHD] = p.hospital_death_fraction * is_out - p.hospital_death_rate * z[kHD];
  d[kR] = p.gamma * (z[kIA] + z[kIM] + z[kHR]);
  d[kD] = p.hospital_death_rate * z[kHD];
  return d;
}

StateVector pkpd_rhs(const StateVector& z, double /*t*/, const PkpdParams& p, double z3_t) {
  require_dim(z, p.dim(), "pkpd_rhs");
  if (!(p.EC_50 > 0.0)) throw ParameterError("PKPD: EC_50 must be positive");
  const double c = std::max(z[0], 0.0);
  const double immune_drag = p.full_model ? std::pow(std::max(z[4], 0.0), p.h_C) : 1.0;
  StateVector d(p.dim());
  d[0] = p.k_IR * z[3] + p.k_PF * z[3] * c - p.k_O * z[0] + hill(c, p) - p.k_Dex * c * z[1];
  d[1] = -p.k_2 * z[1] + p.k_3 * (z[2] + z3_t);
  d[2] = -p.k_3 * z[2];
  d[3] = p.k_DP * z[3] - p.k_IIR * z[3] * c - p.k_DC * z[3] * immune_drag;
  if (p.full_model) d[4] = p.k_1 * z[0];
  return d;
}

TreatmentSchedule TreatmentSchedule::policy(std::optional<double> mandate_start, double beta_decay) {
  TreatmentSchedule s;
  s.kind = Kind::BinaryPolicy;
  s.mandate_start = mandate_start;
  s.beta_decay = beta_decay;
  return s;
}

TreatmentSchedule TreatmentSchedule::dosing(std::vector<DoseEvent> doses, double k_d) {
  TreatmentSchedule s;
  s.kind = Kind::Dosing;
  s.doses = std::move(doses);
  s.k_d = k_d;
  s.validate();
  return s;
}

double TreatmentSchedule::indicator(double t) const {
  if (kind == Kind::BinaryPolicy) return (mandate_start && t >= *mandate_start) ? 1.0 : 0.0;
  for (const auto& d : doses) {
    if (t >= d.time) return 1.0;
  }
  return 0.0;
}

void TreatmentSchedule::validate() const {
  if (kind == Kind::BinaryPolicy) {
    require_nonneg(beta_decay, "beta_decay");
    return;
  }
  require_nonneg(k_d, "k_d");
  for (const auto& d : doses) {
    if (!(d.amount >= 0.0 && d.amount <= 1.0)) throw ContractError("dose amount must lie in [0, 1]");
    if (!std::isfinite(d.time)) throw ContractError("dose time must be finite");
  }
}

double dex_plasma(double t, const TreatmentSchedule& schedule, double k3) {
  if (schedule.kind != TreatmentSchedule::Kind::Dosing) throw ContractError("dex_plasma: schedule is not dosing");
  double total = 0.0;
  for (const auto& d : schedule.doses) {
    if (t > d.time) total += schedule.k_d * d.amount * std::exp(k3 * (d.time - t));
  }
  return total;
}

double beta_schedule(double t, double initial_beta, double lambda, std::optional<double> mandate_start) {
  if (!mandate_start || t < *mandate_start) return initial_beta;
  return initial_beta * std::exp(-lambda * (t - *mandate_start));
}

ExpertFamily parse_family(const std::string& name) {
  if (name == "seirm") return ExpertFamily::Seirm;
  if (name == "seirhd") return ExpertFamily::Seirhd;
  if (name == "pkpd") return ExpertFamily::Pkpd;
  throw ContractError("unknown expert family '" + name + "'");
}

std::string family_name(ExpertFamily family) {
  switch (family) {
    case ExpertFamily::Seirm: return "seirm";
    case ExpertFamily::Seirhd: return "seirhd";
    case ExpertFamily::Pkpd: return "pkpd";
  }
  return "?";
}

std::size_t ExpertModel::dim() const {
  switch (family) {
    case ExpertFamily::Seirm: return 5;
    case ExpertFamily::Seirhd: return kSeirhdDim;
    case ExpertFamily::Pkpd: return pkpd.dim();
  }
  return 0;
}

void ExpertModel::validate() const {
  switch (family) {
    case ExpertFamily::Seirm: seirm.validate(); break;
    case ExpertFamily::Seirhd: seirhd.validate(); break;
    case ExpertFamily::Pkpd: pkpd.validate(); break;
  }
}

StateVector ExpertModel::derivative(const StateVector& z, double drive) const {
  switch (family) {
    case ExpertFamily::Seirm: return seirm_rhs(z, 0.0, seirm, drive);
    case ExpertFamily::Seirhd: return seirhd_rhs(z, 0.0, seirhd, drive);
    case ExpertFamily::Pkpd: return pkpd_rhs(z, 0.0, pkpd, drive);
  }
  return {};
}

Eigen::MatrixXd ExpertModel::jacobian(const StateVector& z, double drive) const {
  const std::size_t n = dim();
  require_dim(z, n, "jacobian");
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  switch (family) {
    case ExpertFamily::Seirm: {
      const SeirmParams& p = seirm;
      const double ds = drive * z[2] / p.N;
      const double di = drive * z[0] / p.N;
      J(0, 0) = -ds;
      J(0, 2) = -di;
      J(1, 0) = ds;
      J(1, 2) = di;
      J(1, 1) = -p.alpha;
      J(2, 1) = p.alpha;
      J(2, 2) = -(p.gamma + p.mu);
      J(3, 2) = p.gamma;
      J(4, 2) = p.mu;
      break;
    }
    case ExpertFamily::Seirhd: {
      const SeirhdParams& p = seirhd;
      const double pressure = drive * (z[kIA] + z[kIP] + z[kIM] + z[kIS]) / p.N;
      const double ds = drive * z[kS] / p.N;
      J(kS, kS) = -pressure;
      J(kE, kS) = pressure;
      for (std::size_t c : {kIA, kIP, kIM, kIS}) {
        J(kS, c) = -ds;
        J(kE, c) = ds;
      }
      J(kE, kE) = -p.alpha;
      J(kIA, kE) = p.asymptomatic_fraction * p.alpha;
      J(kIA, kIA) = -p.gamma;
      J(kIP, kE) = (1.0 - p.asymptomatic_fraction) * p.alpha;
      J(kIP, kIP) = -p.presymptomatic_exit;
      J(kIM, kIP) = (1.0 - p.delta) * p.presymptomatic_exit;
      J(kIM, kIM) = -p.gamma;
      J(kIS, kIP) = p.delta * p.presymptomatic_exit;
      J(kIS, kIS) = -p.severe_exit;
      J(kHR, kIS) = (1.0 - p.hospital_death_fraction) * p.severe_exit;
      J(kHR, kHR) = -p.gamma;
      J(kHD, kIS) = p.hospital_death_fraction * p.severe_exit;
      J(kHD, kHD) = -p.hospital_death_rate;
      J(kR, kIA) = p.gamma;
      J(kR, kIM) = p.gamma;
      J(kR, kHR) = p.gamma;
      J(kD, kHD) = p.hospital_death_rate;
      break;
    }
    case ExpertFamily::Pkpd: {
      const PkpdParams& p = pkpd;
      const double c = std::max(z[0], 0.0);
      const double dc = z[0] > 0.0 ? 1.0 : 0.0;
      double drag = 1.0;
      double drag_slope = 0.0;
      if (p.full_model) {
        const double z5 = std::max(z[4], 0.0);
        drag = std::pow(z5, p.h_C);
        drag_slope = z[4] > 0.0 ? p.h_C * std::pow(z5, p.h_C - 1.0) : 0.0;
      }
      J(0, 0) = (p.k_PF * z[3] + hill_slope(c, p) - p.k_Dex * z[1]) * dc - p.k_O;
      J(0, 1) = -p.k_Dex * c;
      J(0, 3) = p.k_IR + p.k_PF * c;
      J(1, 1) = -p.k_2;
      J(1, 2) = p.k_3;
      J(2, 2) = -p.k_3;
      J(3, 0) = -p.k_IIR * z[3] * dc;
      J(3, 3) = p.k_DP - p.k_IIR * c - p.k_DC * drag;
      if (p.full_model) {
        J(3, 4) = -p.k_DC * z[3] * drag_slope;
        J(4, 0) = p.k_1;
      }
      break;
    }
  }
  return J;
}

double ExpertModel::drive(double t, const TreatmentSchedule& schedule) const {
  if (family == ExpertFamily::Pkpd) return dex_plasma(t, schedule, pkpd.k_3);
  if (schedule.kind != TreatmentSchedule::Kind::BinaryPolicy) {
    throw ContractError("epidemic expert requires a binary policy schedule");
  }
  const double beta0 = family == ExpertFamily::Seirm ? seirm.beta : seirhd.beta;
  return beta_schedule(t, beta0, schedule.beta_decay, schedule.mandate_start);
}

void ExpertOdeSpec::validate() const {
  model.validate();
  treatment.validate();
  require_dim(initial, model.dim(), "ExpertOdeSpec");
  const bool dosing = treatment.kind == TreatmentSchedule::Kind::Dosing;
  if (dosing != (model.family == ExpertFamily::Pkpd)) {
    throw ContractError("treatment kind does not match expert family " + family_name(model.family));
  }
}

OdeTrajectory simulate_expert(const ExpertOdeSpec& spec, const TimeGrid& grid) {
  spec.validate();
  const RhsFn rhs = [&spec](double t, const StateVector& z) {
    return spec.model.derivative(z, spec.model.drive(t, spec.treatment));
  };
  return integrate(rhs, spec.initial, grid);
}

}  // namespace odeguide
