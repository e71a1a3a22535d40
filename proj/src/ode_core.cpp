#include "odeguide/ode_core.hpp"

#include <cmath>
#include <sstream>

#include "odeguide/errors.hpp"

namespace odeguide {

namespace {

void require_finite(const StateVector& v, double t, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      std::ostringstream msg;
      msg << "non-finite " << what << " at t=" << t;
      throw IntegrationError(msg.str(), t);
    }
  }
}

StateVector axpy(const StateVector& y, double a, const StateVector& k) {
  StateVector out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] + a * k[i];
  return out;
}

}  // namespace

TimeGrid TimeGrid::spanning(double t0, double t1, double dt) {
  if (!(dt > 0.0)) throw ContractError("TimeGrid: dt must be positive");
  if (t1 < t0) throw ContractError("TimeGrid: t1 < t0");
  const double steps = (t1 - t0) / dt;
  const double rounded = std::round(steps);
  if (std::abs(steps - rounded) > 1e-6) {
    throw ContractError("TimeGrid: span is not a multiple of dt");
  }
  return TimeGrid{t0, dt, static_cast<std::size_t>(rounded)};
}

std::vector<double> OdeTrajectory::component(std::size_t index) const {
  std::vector<double> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(s.at(index));
  return out;
}

StateVector rk4_step(const RhsFn& rhs, const StateVector& state, double t, double dt) {
  if (dt < 0.0) throw ContractError("rk4_step: dt must be nonnegative");
  auto eval = [&](double tt, const StateVector& y) {
    StateVector d = rhs(tt, y);
    if (d.size() != y.size()) throw ContractError("rk4_step: rhs dimension mismatch");
    require_finite(d, tt, "derivative");
    return d;
  };
  const StateVector k1 = eval(t, state);
  const StateVector k2 = eval(t + 0.5 * dt, axpy(state, 0.5 * dt, k1));
  const StateVector k3 = eval(t + 0.5 * dt, axpy(state, 0.5 * dt, k2));
  const StateVector k4 = eval(t + dt, axpy(state, dt, k3));
  StateVector out(state.size());
  for (std::size_t i = 0; i < state.size(); ++i) {
    out[i] = state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
  return out;
}

OdeTrajectory integrate(const RhsFn& rhs, const StateVector& init, const TimeGrid& grid) {
  if (!(grid.dt > 0.0)) throw ContractError("integrate: dt must be positive");
  require_finite(init, grid.t0, "initial state");
  OdeTrajectory traj{grid, {}};
  traj.states.reserve(grid.size());
  traj.states.push_back(init);
  for (std::size_t k = 0; k < grid.n_steps; ++k) {
    try {
      traj.states.push_back(rk4_step(rhs, traj.states.back(), grid.time(k), grid.dt));
    } catch (const IntegrationError& e) {
      std::ostringstream msg;
      msg << e.what() << " (step " << k << ")";
      throw IntegrationError(msg.str(), e.time(), k);
    }
  }
  return traj;
}

StateVector interpolate(const OdeTrajectory& traj, double t) {
  const TimeGrid& g = traj.grid;
  if (traj.states.empty()) throw RangeError("interpolate: empty trajectory");
  const double t_end = g.t_end();
  if (t < g.t0 || t > t_end) {
    std::ostringstream msg;
    msg << "interpolate: t=" << t << " outside [" << g.t0 << ", " << t_end << "]";
    throw RangeError(msg.str());
  }
  const double pos = (t - g.t0) / g.dt;
  const auto nearest = static_cast<std::size_t>(std::llround(pos));
  if (nearest < traj.states.size() && g.time(nearest) == t) return traj.states[nearest];
  std::size_t k = static_cast<std::size_t>(std::floor(pos));
  if (k >= g.n_steps) return traj.states.back();
  const double w = pos - static_cast<double>(k);
  if (w == 0.0) return traj.states[k];
  const StateVector& a = traj.states[k];
  const StateVector& b = traj.states[k + 1];
  StateVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + w * (b[i] - a[i]);
  return out;
}

}  // namespace odeguide
