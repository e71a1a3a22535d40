#pragma once

#include <cstddef>
#include <cstdint>
#include <json.hpp>
#include <vector>

#include "odeguide/datagen.hpp"
#include "odeguide/diff_engine/mlp.hpp"
#include "odeguide/diff_engine/optim.hpp"
#include "odeguide/expert_models.hpp"

namespace odeguide {

/// Tape op: rows of z are expert states, drive is B x 1. Gradients use the analytic Jacobian.
ad::Var expert_rhs_op(const ExpertModel& model, const ad::Var& z, const ad::Matrix& drive);

struct HybridConfig {
  ExpertModel expert;
  int latent_y = 8;
  int latent_x = 8;
  int hidden = 32;
  int hidden_layers = 2;
  ad::Activation activation = ad::Activation::Tanh;
  double dt = 0.05;
  double expert_scale = 1.0;  // expert states are multiplied by this before entering a network
};

/// Column means and standard deviations of observed factual y and x.
struct Standardizer {
  double y_mean = 0.0;
  double y_sd = 1.0;
  std::vector<double> x_mean;
  std::vector<double> x_sd;

  static Standardizer fit(const Dataset& ds);
  double y(double v) const { return (v - y_mean) / y_sd; }
  double y_inv(double v) const { return v * y_sd + y_mean; }
  double x(double v, std::size_t i) const { return (v - x_mean[i]) / x_sd[i]; }
  double x_inv(double v, std::size_t i) const { return v * x_sd[i] + x_mean[i]; }
  nlohmann::ordered_json to_json() const;
  static Standardizer from_json(const nlohmann::ordered_json& j);
};

struct HybridCpModel {
  HybridConfig config;
  std::size_t x_dim = 0;
  Standardizer stats;
  ad::ParamSet params;
  ad::Mlp f_y, f_x, enc_x, enc_y, enc_e, read_y, read_x;

  static HybridCpModel create(const HybridConfig& config, std::size_t x_dim, const Standardizer& stats,
                              std::uint64_t seed);
  std::size_t expert_dim() const { return config.expert.dim(); }
  std::size_t state_dim() const;
  /// Re-resolves network handles after params were replaced.
  void rebind();
  nlohmann::ordered_json manifest() const;
};

/// The family constraint: rescale to sum N for SEIRM, identity for PKPD. Idempotent.
ad::Var normalize_expert(const HybridConfig& config, const ad::Var& positive);
std::vector<double> normalize_expert(const HybridConfig& config, const std::vector<double>& positive);

struct LatentState {
  std::vector<double> z_y;
  std::vector<double> z_x;
  std::vector<double> z_e;
};

/// Observation at the first time point in raw units.
struct InitObservation {
  std::vector<double> x0;
  double a0 = 0.0;
  double y0 = 0.0;
};

LatentState encode_init(const HybridCpModel& model, const InitObservation& obs);

/// Time derivative of all latents; z_y_lag is the previous solver step's z^y.
LatentState hybrid_rhs(const HybridCpModel& model, const LatentState& latents, const std::vector<double>& z_y_lag,
                       double a, double drive);

/// Raw-unit readout (y, x).
std::pair<double, std::vector<double>> readout(const HybridCpModel& model, const LatentState& latents, double a);

struct HybridPrediction {
  std::vector<double> t;
  std::vector<double> y;
  Eigen::MatrixXd x;
  std::vector<std::vector<double>> expert;  // z^e at each measurement time
};

/// Measurement times must lie on the solver grid that starts at times.front().
HybridPrediction predict(const HybridCpModel& model, const InitObservation& obs, const TreatmentSchedule& schedule,
                         const std::vector<double>& times);

InitObservation initial_observation(const Trajectory& traj);

/// Tape program pieces, exposed for gradient checks.
struct HybridBatch {
  ad::Matrix init;  // B x (d_x + 2), standardized [x0, a0, y0]
  std::vector<TreatmentSchedule> schedules;
  std::vector<double> times;
  ad::Matrix y;       // B x T standardized targets
  ad::Matrix y_mask;  // B x T
  ad::Matrix x;       // B x (T * d_x), time-major blocks
  ad::Matrix x_mask;
};

HybridBatch make_batch(const HybridCpModel& model, const Dataset& ds, const std::vector<std::size_t>& units);

struct HybridOutputs {
  ad::Var y;  // B x T, standardized
  ad::Var x;  // B x (T * d_x), standardized
  std::vector<ad::Var> expert;
};

HybridOutputs hybrid_forward(const HybridCpModel& model, const ad::BoundParams& bound, const ad::Matrix& init,
                             const std::vector<TreatmentSchedule>& schedules, const std::vector<double>& times);
ad::Var hybrid_loss(const HybridCpModel& model, const ad::BoundParams& bound, const HybridBatch& batch);
ad::Program hybrid_loss_program(const HybridCpModel& model, const HybridBatch& batch);

struct HybridTrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 10;
  double lr = 3e-3;
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;  // full-data loss, before training then after each epoch
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

TrainResult train_hybrid(HybridCpModel& model, const Dataset& ds, const HybridTrainConfig& config);

}  // namespace odeguide
