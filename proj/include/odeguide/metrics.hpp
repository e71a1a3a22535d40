#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

namespace odeguide {

/// W1 between two empirical distributions.
double wasserstein1(std::vector<double> a, std::vector<double> b);

/// Type-7 empirical quantile of unsorted data, q in [0, 1].
double quantile(std::vector<double> values, double q);

/// Ensembles are n_samples x T. Returns the fraction of time points whose truth value lies in
/// the central `level` interval of the per-time empirical distribution (bounds inclusive).
double pi_coverage(const Eigen::MatrixXd& ensemble, const std::vector<double>& truth, double level);

/// Mean over levels 0.0, 0.1, ..., 1.0 of |coverage - level|.
double calibration_score(const Eigen::MatrixXd& ensemble, const std::vector<double>& truth);
std::vector<double> calibration_levels();

std::vector<double> ensemble_mean(const Eigen::MatrixXd& ensemble);
std::vector<double> cate_estimate(const Eigen::MatrixXd& treated, const Eigen::MatrixXd& control);
double cate_rmse(const std::vector<double>& estimate, const std::vector<double>& truth);

double rmse(const std::vector<double>& pred, const std::vector<double>& truth);
/// Throws ContractError when either sequence is constant.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

struct BasicStats {
  double rmse = 0.0;
  double pearson_corr = 0.0;
};
BasicStats basic_stats(const std::vector<double>& pred, const std::vector<double>& truth);

struct DtwResult {
  double distance = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> path;  // from (0, 0) to (n-1, m-1)
};
DtwResult dtw(const std::vector<double>& a, const std::vector<double>& b);

struct MetricReport {
  double wasserstein1 = 0.0;
  double rmse = 0.0;
  double pi_coverage_75 = 0.0;
  double pi_coverage_90 = 0.0;
  double pi_coverage_95 = 0.0;
  double cate_rmse = 0.0;
  double calibration_score = 0.0;
  double pearson_corr = 0.0;
  std::size_t n_samples = 0;
  std::size_t n_units = 0;
  std::string aggregation = "per-time W1 vs truth draws, averaged over time then units";

  nlohmann::ordered_json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

}  // namespace odeguide
