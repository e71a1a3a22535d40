#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace odeguide {

using StateVector = std::vector<double>;

/// Right-hand side of an autonomous or driven system: returns dz/dt at (t, z).
using RhsFn = std::function<StateVector(double t, const StateVector& state)>;

/// Uniform grid t0, t0 + dt, ..., t0 + n_steps * dt.
struct TimeGrid {
  double t0 = 0.0;
  double dt = 1.0;
  std::size_t n_steps = 0;

  double time(std::size_t k) const { return t0 + static_cast<double>(k) * dt; }
  double t_end() const { return time(n_steps); }
  std::size_t size() const { return n_steps + 1; }

  // Grid spanning [t0, t1] with step dt; t1 - t0 must be a multiple of dt.
  static TimeGrid spanning(double t0, double t1, double dt);
};

struct OdeTrajectory {
  TimeGrid grid;
  std::vector<StateVector> states;

  /// Component `index` of every state, in grid order.
  std::vector<double> component(std::size_t index) const;
};

StateVector rk4_step(const RhsFn& rhs, const StateVector& state, double t, double dt);

OdeTrajectory integrate(const RhsFn& rhs, const StateVector& init, const TimeGrid& grid);

/// Piecewise-linear interpolation; exact at grid points.
StateVector interpolate(const OdeTrajectory& traj, double t);

}  // namespace odeguide
