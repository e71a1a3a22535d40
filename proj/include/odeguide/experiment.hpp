#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "odeguide/config.hpp"
#include "odeguide/metrics.hpp"

namespace odeguide {

/// Everything the guided sampler needs for one unit's counterfactual arm.
struct UnitGuidance {
  ad::Matrix cond_cf;                  // 1 x C
  ad::Matrix cond_f;                   // 1 x C
  std::vector<double> factual_raw;     // observed factual outcome, gaps filled by the hybrid prediction
  std::vector<double> factual_std;
  ExpertGuidanceSignals signals_raw;   // aligned expert simulations, outcome units
  ExpertGuidanceSignals signals_std;   // same, standardized
  FactualWindow window;
};

struct UnitEvaluation {
  std::string id;
  double wasserstein1 = 0.0;
  double rmse = 0.0;
  double pearson_corr = 0.0;  // NaN when a series is constant
  double pi_coverage_75 = 0.0;
  double pi_coverage_90 = 0.0;
  double pi_coverage_95 = 0.0;
  double calibration_score = 0.0;
  double cate_rmse = 0.0;
};

struct EtaSweepRow {
  double eta = 0.0;
  double correlation = 0.0;  // mean over selection units; NaN if undefined everywhere
  double wasserstein = 0.0;
  double rmse = 0.0;
};

/// Raw-unit ensembles per test unit (n_samples x T).
struct EnsembleSet {
  std::vector<std::string> unit_ids;
  std::vector<ad::Matrix> counterfactual;
  std::vector<ad::Matrix> unguided;
  std::vector<ad::Matrix> factual;
};

struct ExperimentReport {
  MetricReport guided;
  MetricReport unguided;
  double eta_star = 0.0;
  std::vector<UnitEvaluation> units;
  std::vector<UnitEvaluation> units_unguided;

  nlohmann::ordered_json to_json() const;
};

/// Expert outcome (D per 1000 for SEIRM, z1 for PKPD) at the unit's measurement times.
std::vector<double> expert_outcome(const Dataset& ds, const ExpertModel& model, const UnitRecord& unit,
                                   const TreatmentSchedule& schedule);

/// In-memory pipeline; each stage can also be persisted to and restored from a run directory.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig config);

  const ExperimentConfig& config() const { return cfg_; }

  void load_or_generate_data();
  /// Installs an externally built dataset with a fixed split instead of the seeded one.
  void use_data(Dataset data, std::vector<std::size_t> train, std::vector<std::size_t> test);
  void train_hybrid();
  void train_diffusion();
  void select_eta();
  void sample();
  ExperimentReport evaluate();

  /// Stage artifacts inside a run directory.
  void save_data(const std::filesystem::path& dir) const;
  void load_data(const std::filesystem::path& dir);
  void save_hybrid(const std::filesystem::path& dir) const;
  void load_hybrid(const std::filesystem::path& dir);
  void save_diffusion(const std::filesystem::path& dir) const;
  void load_diffusion(const std::filesystem::path& dir);
  void save_selection(const std::filesystem::path& dir) const;
  void load_selection(const std::filesystem::path& dir);
  void save_ensembles(const std::filesystem::path& dir) const;
  void load_ensembles(const std::filesystem::path& dir);

  const Dataset& data() const { return data_; }
  const std::vector<std::size_t>& train_units() const { return train_; }
  const std::vector<std::size_t>& test_units() const { return test_; }
  const HybridCpModel& hybrid() const;
  const DenoiserModel& denoiser() const;
  const DiffusionSchedule& schedule() const { return schedule_; }
  double eta() const { return eta_star_; }
  const std::vector<EtaSweepRow>& eta_sweep() const { return sweep_; }
  const EnsembleSet& ensembles() const { return ensembles_; }
  const TrainResult& hybrid_training() const { return hybrid_fit_; }
  const TrainResult& diffusion_training() const { return diffusion_fit_; }

  UnitGuidance unit_guidance(std::size_t unit) const;
  /// Guidance context for a unit record that need not be part of the dataset (e.g. a forced policy arm).
  UnitGuidance unit_guidance(const UnitRecord& unit) const;
  /// Standardized counterfactual samples for one unit; guided when eta or nu is nonzero.
  ad::Matrix sample_counterfactual(std::size_t unit, const UnitGuidance& ctx, const GuidanceConfig* guidance,
                                   std::size_t n_samples) const;
  UnitEvaluation evaluate_unit(std::size_t unit, const ad::Matrix& cf_raw, const ad::Matrix& factual_raw) const;

 private:
  void split_units();
  Dataset subset(const std::vector<std::size_t>& idx) const;
  std::uint64_t unit_seed(std::size_t unit, std::uint64_t stream) const;

  ExperimentConfig cfg_;
  Dataset data_;
  std::vector<std::size_t> train_;
  std::vector<std::size_t> test_;
  std::optional<HybridCpModel> hybrid_;
  std::optional<PropensityModel> propensity_;
  std::optional<DenoiserModel> denoiser_;
  DiffusionSchedule schedule_;
  TrainResult hybrid_fit_;
  TrainResult diffusion_fit_;
  double eta_star_ = 0.0;
  std::vector<EtaSweepRow> sweep_;
  EnsembleSet ensembles_;
};

/// Lowercase hex SHA-1 of "blob <size>\0<content>", as git computes blob ids.
std::string git_blob_sha1(const std::string& content);

/// Runs body as a named stage, appending start/done/failed lines to dir/run.log.
/// Any exception is rethrown as StageError.
void run_stage(const std::string& name, const std::filesystem::path& dir, const std::function<void()>& body);

/// Runs every stage and persists all artifacts under config.out_dir.
ExperimentReport run_experiment(const ExperimentConfig& config);

/// report.json and report.csv (one row per variant).
void write_report(const ExperimentReport& report, const ExperimentConfig& config, const std::filesystem::path& dir);

/// Writes config.yaml, seed and inputs.sha1 into dir.
void write_run_metadata(const ExperimentConfig& config, const std::filesystem::path& dir);

/// Ensemble CSV with columns sample_id,t,y.
void write_ensemble_csv(const std::filesystem::path& path, const ad::Matrix& samples, const std::vector<double>& t);
ad::Matrix read_ensemble_csv(const std::filesystem::path& path, std::size_t horizon);

}  // namespace odeguide
