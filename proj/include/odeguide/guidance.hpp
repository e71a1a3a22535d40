#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "odeguide/diff_engine/tape.hpp"
#include "odeguide/diffusion.hpp"

namespace odeguide {

/// What select_eta correlates the guided ensemble mean against.
enum class CorrelationTarget {
  Expert,      // aligned expert counterfactual
  Difference,  // (generated cf - observed factual) vs (expert cf - expert factual)
};
CorrelationTarget parse_correlation_target(const std::string& name);
std::string correlation_target_name(CorrelationTarget t);

struct GuidanceConfig {
  double eta = 0.0;              // value-term strength
  double direction_ratio = 1.0;  // direction-term strength as a multiple of eta
  double nu = 100.0;             // factual-consistency strength
  double kappa = 1e-4;           // strengths are multiplied by this before the update
  bool use_value = true;
  bool use_direction = true;
  std::vector<double> eta_candidates{0, 10, 50, 100, 200, 500, 1000, 2000, 5000};
  CorrelationTarget target = CorrelationTarget::Expert;

  void validate() const;
  static GuidanceConfig dex_preset();
  static GuidanceConfig covid_preset();
};

/// g(y1, y2, t) = y1(t) - y2(t).
double relation_value(const std::vector<double>& y1, const std::vector<double>& y2, std::size_t t);
/// Forward difference of y1 - y2 per grid step; backward at the last point, 0 for a single point.
double relation_direction(const std::vector<double>& y1, const std::vector<double>& y2, std::size_t t);

/// Expert trajectories on the data grid, in the same units as the outcome they guide.
struct ExpertGuidanceSignals {
  std::vector<double> f_cf;
  std::vector<double> f_f;
  double scale = 1.0;
  double shift = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> path;

  std::size_t length() const { return f_f.size(); }
};

/// Indices strictly before the point where factual and counterfactual treatments diverge.
struct FactualWindow {
  std::vector<std::size_t> indices;
  static FactualWindow before(std::size_t divergence);
};

double loss_cf(const std::vector<double>& y0_hat, const std::vector<double>& y0_factual,
               const ExpertGuidanceSignals& signals, const GuidanceConfig& config);

struct FactualLoss {
  double value = 0.0;
  bool empty_window = false;
};
FactualLoss loss_f(const std::vector<double>& y0_hat, const std::vector<double>& y0_factual,
                   const FactualWindow& window);

/// Tape versions summed over the rows of y0_hat; y0_factual and the signals are shared by all rows.
ad::Var loss_cf(const ad::Var& y0_hat, const std::vector<double>& y0_factual, const ExpertGuidanceSignals& signals,
                const GuidanceConfig& config);
ad::Var loss_f(const ad::Var& y0_hat, const std::vector<double>& y0_factual, const FactualWindow& window);

struct GuidanceGradients {
  ad::Matrix cf;
  ad::Matrix f;
};
GuidanceGradients guidance_gradients(const ad::Matrix& y0_hat, const std::vector<double>& y0_factual,
                                     const ExpertGuidanceSignals& signals, const FactualWindow& window,
                                     const GuidanceConfig& config);

/// y0_hat - eta * grad_cf - nu * grad_f.
ad::Matrix guided_update(const ad::Matrix& y0_hat, const ad::Matrix& grad_cf, const ad::Matrix& grad_f, double eta,
                         double nu);

/// Sampling hook applying guided_update with strengths kappa*eta and kappa*nu at every step.
GuidanceHook make_guidance_hook(const std::vector<double>& y0_factual, const ExpertGuidanceSignals& signals,
                                const FactualWindow& window, const GuidanceConfig& config);

struct Alignment {
  double scale = 1.0;
  double shift = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> path;  // (expert index, observed index)
};

/// DTW on z-normalized sequences, then least squares s * expert + b ~ observed over the path pairs.
Alignment align_factual(const std::vector<double>& expert_f, const std::vector<double>& observed_f);
/// Aligns and applies the same (s, b) to both expert simulations.
ExpertGuidanceSignals aligned_signals(const std::vector<double>& expert_f, const std::vector<double>& expert_cf,
                                      const std::vector<double>& observed_f);

struct EtaCandidate {
  double eta = 0.0;
  double correlation = 0.0;
  bool defined = false;
};

struct EtaSelection {
  double eta_star = 0.0;
  std::vector<EtaCandidate> sweep;  // in candidate order
};

/// correlation_of returns NaN when the correlation is undefined. Ties go to the smallest eta.
EtaSelection select_eta(const std::vector<double>& candidates,
                        const std::function<double(double eta)>& correlation_of);

/// Correlation of a guided ensemble mean with the configured target; NaN if either series is constant.
double selection_correlation(const std::vector<double>& ensemble_mean_cf, const std::vector<double>& observed_f,
                             const ExpertGuidanceSignals& signals, CorrelationTarget target);

}  // namespace odeguide
