#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "odeguide/config.hpp"
#include "odeguide/datagen.hpp"

namespace odeguide {

/// Weekly series for one region. deaths_per_capita is read as deaths per 1000 residents.
struct RegionSeries {
  std::string name;
  std::vector<double> week;
  std::vector<double> deaths;
  std::vector<double> hospitalizations;
  std::vector<int> policy;  // 1 = strong mandate in force

  std::size_t length() const { return week.size(); }
};

struct RegionPanel {
  std::vector<RegionSeries> regions;

  std::size_t weeks() const { return regions.empty() ? 0 : regions.front().length(); }
  std::size_t index_of(const std::string& name) const;
  /// Equal week grids, policy in {0, 1}, unique names.
  void validate() const;
};

/// CSV with header region,week,deaths_per_capita,hospitalizations,policy. Rows may come in any order.
RegionPanel read_regions_csv(const std::filesystem::path& path);
void write_regions_csv(const RegionPanel& panel, const std::filesystem::path& path);

/// One arm per city of a simulated COVID cohort, chosen at random.
RegionPanel synthetic_regions(std::size_t n_regions, std::size_t weeks, std::uint64_t seed, const CovidConfig& covid = {});

/// Clustered panel with a known answer. Pre-period curves are separated by cluster so DTW neighbors stay
/// within a cluster; every post-period curve equals a shared baseline, plus `shift` for strong-policy regions.
/// Clusters alternate strong/weak members except the last, whose members are all weak.
RegionPanel planted_shift_panel(std::size_t clusters, std::size_t cluster_size, std::size_t weeks,
                                std::size_t train_weeks, double shift, std::uint64_t seed);

/// "random:n" draws n regions with the seed; anything else is a comma-separated list of names.
std::vector<std::size_t> pick_test_regions(const RegionPanel& panel, const std::string& spec, std::uint64_t seed);

struct Neighbor {
  std::size_t region = 0;
  double distance = 0.0;
  bool strong = false;
};

/// k nearest regions by DTW over the first train_weeks of deaths; ties go to the earlier region.
std::vector<Neighbor> nearest_neighbors(const RegionPanel& panel, std::size_t target, std::size_t train_weeks,
                                        std::size_t k);

/// Majority policy over weeks >= train_weeks; an even split counts as weak.
bool dominant_post_policy(const RegionSeries& region, std::size_t train_weeks);

/// W1 between the strong-group and weak-group mean post-period death curves.
double proxy_wd(const RegionPanel& panel, const std::vector<Neighbor>& neighbors, std::size_t train_weeks);

/// Regions as a factual-only covid dataset. The counterfactual arm copies the factual one as a placeholder.
Dataset regions_to_dataset(const RegionPanel& panel, const CovidConfig& covid);

struct RegionResult {
  std::string region;
  bool skipped = false;
  std::string reason;
  std::vector<Neighbor> neighbors;
  std::size_t n_strong = 0;
  std::size_t n_weak = 0;
  double proxy_wd = 0.0;
  double model_delta = 0.0;  // NaN when no model was fitted
};

struct CaseStudyResult {
  std::vector<RegionResult> rows;

  std::size_t evaluated() const;
  /// region,status,reason,neighbors,n_strong,n_weak,proxy_wd,model_delta
  std::string to_csv(const RegionPanel& panel) const;
};

/// Neighbor protocol on every selected region; with case_study.fit_model, also trains on the non-test
/// regions and compares strong-forced against weak-forced counterfactual ensembles.
CaseStudyResult run_case_study(const ExperimentConfig& config, const RegionPanel& panel);

/// Loads or synthesizes the panel (synthetic strong mandates start at train_weeks), runs the protocol and writes regions.csv and case_study.csv to out_dir.
CaseStudyResult run_case_study(const ExperimentConfig& config);

}  // namespace odeguide
