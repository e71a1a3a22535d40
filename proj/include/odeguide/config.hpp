#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "odeguide/datagen.hpp"
#include "odeguide/diffusion.hpp"
#include "odeguide/guidance.hpp"
#include "odeguide/hybrid_cp.hpp"
#include "odeguide/propensity.hpp"

namespace odeguide {

struct DatasetSpec {
  std::string kind = "dex";  // "dex" or "covid"
  std::string path;          // directory written by write_dataset; generated when empty
  std::string census;        // COVID population CSV; synthetic when empty
  std::size_t n_units = 50;
  CovidConfig covid;
  DexConfig dex;
};

struct CaseStudyConfig {
  std::string regions;  // region CSV; synthetic regions when empty
  std::size_t n_regions = 52;
  std::size_t weeks = 52;
  std::size_t train_weeks = 25;
  std::size_t k_neighbors = 5;
  std::string test_regions = "random:10";  // "random:n" or comma-separated region names
  bool fit_model = true;

  void validate() const;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  DatasetSpec dataset;
  double test_fraction = 0.2;
  HybridConfig hybrid;
  HybridTrainConfig hybrid_train;
  bool use_iptw = true;
  PropensityConfig propensity;
  int T_d = 50;
  double beta_start = 1e-4;
  double beta_end = 0.1;
  double lambda_const = 1.0;
  NoiseScale noise_scale = NoiseScale::BetaStd;
  DenoiserConfig denoiser;
  DiffusionTrainConfig diffusion_train;
  bool guidance_enabled = true;
  GuidanceConfig guidance;
  bool select_eta = true;
  std::size_t selection_samples = 30;
  std::size_t n_samples = 100;
  CaseStudyConfig case_study;

  /// Defaults for a dataset kind; YAML keys override these.
  static ExperimentConfig preset(const std::string& kind);
  void validate() const;
};

/// Reads a YAML file. Nested maps flatten to dotted keys; unknown keys are rejected.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config(const std::string& yaml_text, const std::string& origin = "<string>");
/// Full effective configuration as YAML; parse_config(snapshot(c)) reproduces c.
std::string config_snapshot(const ExperimentConfig& config);
/// Every accepted dotted key, in snapshot order.
std::vector<std::string> config_keys();

}  // namespace odeguide
