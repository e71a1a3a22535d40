#pragma once

#include <cstddef>
#include <cstdint>
#include <json.hpp>
#include <vector>

#include "odeguide/datagen.hpp"

namespace odeguide {

/// Logistic model of P(a_t = 1 | x_t, a_{t-1}) with a history length d.
struct PropensityModel {
  std::vector<double> weights;  // one per covariate, then a_{t-1}
  double bias = 0.0;
  std::vector<double> x_mean;
  std::vector<double> x_sd;
  std::size_t history = 3;
  double floor = 0.01;

  double prob_treated(const std::vector<double>& x_t, double a_prev) const;
  /// Probability of the treatment value actually received.
  double prob_observed(const std::vector<double>& x_t, double a_prev, double a_t) const;
  nlohmann::ordered_json to_json() const;
  static PropensityModel from_json(const nlohmann::ordered_json& j);
};

struct PropensityConfig {
  std::size_t history = 3;
  std::size_t iterations = 500;
  double lr = 0.05;
  double l2 = 1e-3;
  double floor = 0.01;
};

/// Maximum-likelihood fit on every factual transition; unobserved covariates carry the last observation forward.
PropensityModel fit_propensity(const Dataset& ds, const PropensityConfig& config = {});

/// 1 / prod of max(p, floor) over the given probabilities.
double propensity_weight(const std::vector<double>& probs, double floor = 0.01);
/// Uses the last d transitions of the unit's factual arm.
double propensity_weight(const PropensityModel& model, const UnitRecord& unit);

/// Covariates with unobserved rows replaced by the last observed row (the first row is always used as is).
Eigen::MatrixXd carry_forward(const Trajectory& traj);

}  // namespace odeguide
