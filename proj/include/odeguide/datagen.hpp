#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "odeguide/expert_models.hpp"
#include "odeguide/random.hpp"

namespace odeguide {

/// One arm of a unit on the measurement grid. x is T x d_x.
struct Trajectory {
  std::vector<double> t;
  std::vector<double> y;
  std::vector<double> y_latent;  // noise-free outcome, kept for evaluation
  Eigen::MatrixXd x;
  std::vector<double> a;
  std::vector<std::uint8_t> observed;

  std::size_t length() const { return t.size(); }
  std::size_t covariate_dim() const { return static_cast<std::size_t>(x.cols()); }
  std::size_t observed_count() const;
  void validate() const;
};

struct UnitRecord {
  std::string id;
  std::string group;        // "strict"/"relaxed" or "treated"/"control"
  double population = 0.0;  // 0 for patients
  bool treated = false;     // factual arm is the intervention arm
  StateVector latent0;      // initial state of the generating system
  TreatmentSchedule factual_treatment;
  TreatmentSchedule counterfactual_treatment;
  Trajectory factual;
  Trajectory counterfactual;
};

inline constexpr const char* kDatasetSchema = "odeguide.dataset/1";

struct Dataset {
  std::string kind;  // "covid" or "dex"
  std::string schema = kDatasetSchema;
  std::uint64_t seed = 0;
  nlohmann::ordered_json config;
  std::vector<UnitRecord> units;

  std::size_t horizon() const { return units.empty() ? 0 : units.front().factual.length(); }
  std::size_t covariate_dim() const { return units.empty() ? 0 : units.front().factual.covariate_dim(); }
  void validate() const;
};

struct CovariateMixer {
  Eigen::MatrixXd W3;  // X x (latent dim)
  Eigen::MatrixXd W4;  // X x 1

  /// Entries N(0, 1) times an independent Bernoulli(0.5) mask.
  static CovariateMixer draw(std::size_t x_dim, std::size_t latent_dim, Rng& rng);
};

Eigen::VectorXd gen_covariates(const Eigen::VectorXd& z, double a, const CovariateMixer& mixer);

/// Drops each point with probability p; the first point is always kept.
std::vector<std::uint8_t> irregular_mask(std::size_t length, double p, std::uint64_t seed);
Trajectory irregular_mask(Trajectory traj, double p, std::uint64_t seed);

struct CovidConfig {
  std::size_t weeks = 52;
  double dt = 0.1;
  std::size_t strict_count = 61;  // remaining cities are relaxed
  double strict_delta = 0.15;
  double strict_alpha = 0.3;
  double strict_mandate = 15.0;
  double relaxed_delta = 0.1;
  double relaxed_alpha = 0.5;
  double relaxed_mandate = 40.0;
  double initial_beta = 0.5;
  double beta_decay = 0.005;
  double noise_sd = 0.0;
  double drop_prob = 0.0;
  SeirhdParams rates;  // beta, alpha, delta, N are overridden per city
};

struct DexConfig {
  std::size_t n_patients = 50;
  std::size_t days = 14;
  double dt = 0.05;
  double dose_time = 3.0;
  double dose_amount = 1.0;
  double k_d = 5.0;
  double noise_sd = 0.01;
  double drop_prob = 0.5;
  double small_rate = 100.0;  // z2(0), z3(0)
  double large_rate = 0.1;    // z1(0), z4(0), z5(0)
  PkpdParams pkpd;            // full_model forced on
};

/// Initial fractions of N for E, IA, IP, IM, IS, HR, HD, R, D; S takes the remainder.
StateVector covid_initial_state(double N);

std::vector<std::pair<std::string, double>> synthetic_census(std::size_t n_cities, std::uint64_t seed);
/// CSV with header and columns (city, population).
std::vector<std::pair<std::string, double>> load_census_csv(const std::string& path);

Dataset gen_covid_dataset(const std::vector<std::pair<std::string, double>>& populations, std::uint64_t seed,
                          const CovidConfig& config = {});
Dataset gen_dex_dataset(std::size_t n_patients, std::uint64_t seed, const DexConfig& config = {});

nlohmann::ordered_json to_json(const CovidConfig& c);
nlohmann::ordered_json to_json(const DexConfig& c);

/// Index of the first measurement where the two arms' treatments differ, or length if never.
std::size_t divergence_index(const UnitRecord& unit);

/// Expert-family initial state for a unit: per-1000 SEIRM aggregate for COVID, z1..z4 for dex.
StateVector expert_initial_state(const Dataset& dataset, const UnitRecord& unit);

}  // namespace odeguide
