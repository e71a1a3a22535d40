#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "odeguide/ode_core.hpp"

namespace odeguide {

struct SeirmParams {
  double beta = 0.5;  // baseline transmission; the per-time value comes from beta_schedule
  double alpha = 0.4;
  double gamma = 0.25;
  double mu = 0.002;
  double N = 1000.0;

  void validate() const;
};

/// Ten compartments in the order S, E, IA, IP, IM, IS, HR, HD, R, D.
struct SeirhdParams {
  double beta = 0.5;
  double alpha = 0.3;
  double delta = 0.15;
  double N = 1.0e6;
  double asymptomatic_fraction = 0.4;  // share of E exits going to IA
  double presymptomatic_exit = 0.5;    // IP -> {IM, IS}
  double severe_exit = 0.3;            // IS -> {HR, HD}
  double hospital_death_fraction = 0.1;
  double gamma = 0.25;                 // IA, IM, HR -> R
  double hospital_death_rate = 0.2;    // HD -> D

  void validate() const;
};

enum SeirhdIndex : std::size_t { kS = 0, kE, kIA, kIP, kIM, kIS, kHR, kHD, kR, kD, kSeirhdDim };

struct PkpdParams {
  double k_IR = 0.1;
  double k_PF = 0.05;
  double k_O = 0.2;
  double E_max = 1.0;
  double EC_50 = 0.5;
  double h_P = 2.0;
  double k_Dex = 1.0;
  double k_2 = 0.5;
  double k_3 = 1.0;
  double k_DP = 0.4;
  double k_IIR = 0.2;
  double k_DC = 0.1;
  double h_C = 1.0;
  double k_1 = 0.01;
  bool full_model = true;

  std::size_t dim() const { return full_model ? 5 : 4; }
  void validate() const;
};

StateVector seirm_rhs(const StateVector& state, double t, const SeirmParams& params, double beta_t);
StateVector seirhd_rhs(const StateVector& state, double t, const SeirhdParams& params, double beta_t);
/// z3_t is the dose-driven plasma concentration added to the z3 state inside the z2 equation.
StateVector pkpd_rhs(const StateVector& state, double t, const PkpdParams& params, double z3_t);

struct DoseEvent {
  double time = 0.0;
  double amount = 1.0;
};

struct TreatmentSchedule {
  enum class Kind { BinaryPolicy, Dosing };
  Kind kind = Kind::BinaryPolicy;

  std::optional<double> mandate_start;  // binary policy
  double beta_decay = 0.005;

  std::vector<DoseEvent> doses;  // dosing
  double k_d = 5.0;

  static TreatmentSchedule policy(std::optional<double> mandate_start, double beta_decay = 0.005);
  static TreatmentSchedule dosing(std::vector<DoseEvent> doses, double k_d = 5.0);

  /// Treatment indicator a(t): 1 once the mandate or the first dose has started.
  double indicator(double t) const;
  void validate() const;
};

double dex_plasma(double t, const TreatmentSchedule& schedule, double k3);
double beta_schedule(double t, double initial_beta, double lambda, std::optional<double> mandate_start);

enum class ExpertFamily { Seirm, Seirhd, Pkpd };

ExpertFamily parse_family(const std::string& name);
std::string family_name(ExpertFamily family);

/// A right-hand side family with parameters. `drive` is beta_t for the epidemic
/// families and the dose plasma concentration for PKPD.
struct ExpertModel {
  ExpertFamily family = ExpertFamily::Seirm;
  SeirmParams seirm;
  SeirhdParams seirhd;
  PkpdParams pkpd;

  std::size_t dim() const;
  void validate() const;
  StateVector derivative(const StateVector& z, double drive) const;
  /// d(derivative)/dz, dim x dim.
  Eigen::MatrixXd jacobian(const StateVector& z, double drive) const;
  /// Drive signal at time t under a treatment schedule.
  double drive(double t, const TreatmentSchedule& schedule) const;
};

struct ExpertOdeSpec {
  ExpertModel model;
  StateVector initial;
  TreatmentSchedule treatment;

  void validate() const;
};

OdeTrajectory simulate_expert(const ExpertOdeSpec& spec, const TimeGrid& grid);

}  // namespace odeguide
