#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <json.hpp>
#include <string>
#include <vector>

#include "odeguide/diff_engine/mlp.hpp"
#include "odeguide/diff_engine/optim.hpp"
#include "odeguide/hybrid_cp.hpp"
#include "odeguide/propensity.hpp"

namespace odeguide {

/// Index 0 holds the convention alpha_bar = 1; steps are 1..T_d.
struct DiffusionSchedule {
  int T_d = 0;
  double lambda_const = 1.0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> loss_weights;

  void check_step(int tau) const;
};

DiffusionSchedule make_schedule(int T_d, double beta_start, double beta_end, double lambda_const = 1.0);

/// Rows are independent trajectories.
ad::Matrix forward_sample(const ad::Matrix& y0, int tau, const DiffusionSchedule& s, const ad::Matrix& noise);

/// Multiplier applied to z in the reverse step.
enum class NoiseScale {
  Variance,       // (1 - abar_{t-1}) / (1 - abar_t) * beta_t, used as printed
  PosteriorStd,   // square root of the above
  BetaStd,        // sqrt(beta_t)
};
NoiseScale parse_noise_scale(const std::string& name);
std::string noise_scale_name(NoiseScale s);

double reverse_noise_coefficient(int tau, const DiffusionSchedule& s, NoiseScale mode);

ad::Matrix reverse_step(const ad::Matrix& y_tau, int tau, const ad::Matrix& y0_hat, const DiffusionSchedule& s,
                        const ad::Matrix& noise, NoiseScale mode = NoiseScale::BetaStd);

/// sin and cos of tau / T_d at `freqs` geometric frequencies, 2 * freqs features.
std::vector<double> timestep_embedding(int tau, int T_d, int freqs = 8);

struct DenoiserConfig {
  int hidden = 64;
  int hidden_layers = 3;
  ad::Activation activation = ad::Activation::Relu;
  int freqs = 8;
};

struct DenoiserModel {
  DenoiserConfig config;
  std::size_t horizon = 0;
  std::size_t cond_dim = 0;
  int T_d = 0;
  ad::ParamSet params;
  ad::Mlp net;

  static DenoiserModel create(const DenoiserConfig& config, std::size_t horizon, std::size_t cond_dim, int T_d,
                              std::uint64_t seed);
  void rebind();
  std::size_t input_width() const;
  /// cond is either 1 x cond_dim (broadcast) or rows(y_tau) x cond_dim.
  ad::Matrix predict(const ad::Matrix& y_tau, int tau, const ad::Matrix& cond) const;
  ad::Var forward(const ad::BoundParams& bound, const ad::Var& y_tau, const std::vector<int>& taus,
                  const ad::Matrix& cond) const;
  nlohmann::ordered_json manifest() const;
};

/// Rows are training examples in standardized outcome units.
struct DiffusionData {
  ad::Matrix y0;
  ad::Matrix mask;
  ad::Matrix cond;
  std::vector<double> weights;

  std::size_t size() const { return static_cast<std::size_t>(y0.rows()); }
  void validate() const;
};

/// Mean over rows of w_pi * w_tau * sum_t mask * (y0 - y0_hat)^2.
ad::Var diffusion_loss(const DenoiserModel& model, const ad::BoundParams& bound, const DiffusionSchedule& s,
                       const DiffusionData& data, const std::vector<std::size_t>& rows, const std::vector<int>& taus,
                       const ad::Matrix& noise);

struct DiffusionDraw {
  std::vector<std::size_t> rows;
  std::vector<int> taus;
  ad::Matrix noise;
};
DiffusionDraw draw_diffusion_batch(const DiffusionData& data, const DiffusionSchedule& s,
                                   const std::vector<std::size_t>& rows, Rng& rng);

struct DiffusionTrainConfig {
  std::size_t epochs = 3000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  bool cosine_decay = true;  // anneal lr to zero over all steps
  double clip_norm = 0.0;
  std::uint64_t seed = 0;
};

/// Loss curve entries are evaluated on one fixed batch of (tau, noise) draws over all rows.
TrainResult train_diffusion(DenoiserModel& model, const DiffusionSchedule& s, const DiffusionData& data,
                            const DiffusionTrainConfig& config);

/// Maps (y_tau, tau) to a predicted clean signal; rows are samples.
using Denoiser = std::function<ad::Matrix(const ad::Matrix& y_tau, int tau)>;
/// Maps (y0_hat, tau) to the guided prediction.
using GuidanceHook = std::function<ad::Matrix(const ad::Matrix& y0_hat, int tau)>;

Denoiser conditioned(const DenoiserModel& model, const ad::Matrix& cond);

struct SampleEnsemble {
  ad::Matrix samples;  // n_samples x T
  std::uint64_t seed = 0;
};

/// Sample i draws all of its noise from mix_seed(seed, i).
SampleEnsemble sample(const Denoiser& denoiser, std::size_t horizon, const DiffusionSchedule& s,
                      const GuidanceHook& guidance, std::size_t n_samples, std::uint64_t seed,
                      NoiseScale mode = NoiseScale::BetaStd);

/// Denoiser condition for one arm: standardized hybrid y', hybrid x (flattened), and a.
std::vector<double> condition_vector(const HybridCpModel& hybrid, const HybridPrediction& pred,
                                     const std::vector<double>& a);
std::size_t condition_width(std::size_t horizon, std::size_t x_dim);

/// Factual training rows. Missing outcomes are filled with the hybrid prediction and masked out.
DiffusionData build_diffusion_data(const Dataset& ds, const HybridCpModel& hybrid,
                                   const PropensityModel* propensity);

}  // namespace odeguide
