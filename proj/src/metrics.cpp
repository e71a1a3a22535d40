#include "odeguide/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "odeguide/errors.hpp"

namespace odeguide {

double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ContractError("wasserstein1: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
  }
  // Walk the merged breakpoints of both quantile functions.
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double u = 0.0;
  double total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / na;
    const double next_b = static_cast<double>(j + 1) / nb;
    const double next = std::min(next_a, next_b);
    total += (next - u) * std::abs(a[i] - b[j]);
    u = next;
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return total;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("quantile: empty input");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace {

void check_ensemble(const Eigen::MatrixXd& ensemble, const std::vector<double>& truth) {
  if (ensemble.rows() < 1 || ensemble.cols() < 1) throw ContractError("empty ensemble");
  if (static_cast<std::size_t>(ensemble.cols()) != truth.size()) {
    throw ContractError("ensemble length does not match truth length");
  }
}

std::vector<double> column(const Eigen::MatrixXd& m, Eigen::Index c) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) out[static_cast<std::size_t>(r)] = m(r, c);
  return out;
}

}  // namespace

double pi_coverage(const Eigen::MatrixXd& ensemble, const std::vector<double>& truth, double level) {
  check_ensemble(ensemble, truth);
  if (!(level >= 0.0 && level <= 1.0)) throw ContractError("pi_coverage: level must lie in [0, 1]");
  const double lo_q = (1.0 - level) / 2.0;
  const double hi_q = 1.0 - lo_q;
  std::size_t hits = 0;
  for (Eigen::Index c = 0; c < ensemble.cols(); ++c) {
    std::vector<double> col = column(ensemble, c);
    const double lo = quantile(col, lo_q);
    const double hi = quantile(std::move(col), hi_q);
    const double y = truth[static_cast<std::size_t>(c)];
    if (y >= lo && y <= hi) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

std::vector<double> calibration_levels() {
  std::vector<double> levels;
  for (int k = 0; k <= 10; ++k) levels.push_back(k / 10.0);
  return levels;
}

double calibration_score(const Eigen::MatrixXd& ensemble, const std::vector<double>& truth) {
  check_ensemble(ensemble, truth);
  const auto levels = calibration_levels();
  double s = 0.0;
  for (double level : levels) s += std::abs(pi_coverage(ensemble, truth, level) - level);
  return s / static_cast<double>(levels.size());
}

std::vector<double> ensemble_mean(const Eigen::MatrixXd& ensemble) {
  if (ensemble.rows() < 1) throw ContractError("ensemble_mean: empty ensemble");
  const Eigen::RowVectorXd m = ensemble.colwise().mean();
  return {m.data(), m.data() + m.size()};
}

std::vector<double> cate_estimate(const Eigen::MatrixXd& treated, const Eigen::MatrixXd& control) {
  if (treated.cols() != control.cols()) throw ContractError("cate_estimate: grid mismatch");
  const auto mt = ensemble_mean(treated);
  const auto mc = ensemble_mean(control);
  std::vector<double> out(mt.size());
  for (std::size_t i = 0; i < mt.size(); ++i) out[i] = mt[i] - mc[i];
  return out;
}

double cate_rmse(const std::vector<double>& estimate, const std::vector<double>& truth) {
  return rmse(estimate, truth);
}

double rmse(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ContractError("rmse: length mismatch or empty");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("pearson: need equal lengths >= 2");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw ContractError("pearson: correlation undefined for a constant sequence");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

BasicStats basic_stats(const std::vector<double>& pred, const std::vector<double>& truth) {
  return {rmse(pred, truth), pearson(pred, truth)};
}

DtwResult dtw(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw ContractError("dtw: empty sequence");
  const std::size_t n = a.size(), m = b.size();
  const double inf = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd D = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m), inf);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double cost = std::abs(a[i] - b[j]);
      double best = 0.0;
      if (i > 0 || j > 0) {
        best = inf;
        if (i > 0 && j > 0) best = std::min(best, D(i - 1, j - 1));
        if (i > 0) best = std::min(best, D(i - 1, j));
        if (j > 0) best = std::min(best, D(i, j - 1));
      }
      D(i, j) = cost + best;
    }
  }
  DtwResult out;
  out.distance = D(n - 1, m - 1);
  std::size_t i = n - 1, j = m - 1;
  out.path.emplace_back(i, j);
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const double diag = D(i - 1, j - 1), up = D(i - 1, j), left = D(i, j - 1);
      if (diag <= up && diag <= left) {
        --i;
        --j;
      } else if (up <= left) {
        --i;
      } else {
        --j;
      }
    } else if (i > 0) {
      --i;
    } else {
      --j;
    }
    out.path.emplace_back(i, j);
  }
  std::reverse(out.path.begin(), out.path.end());
  return out;
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["wasserstein1"] = wasserstein1;
  j["rmse"] = rmse;
  j["pi_coverage_75"] = pi_coverage_75;
  j["pi_coverage_90"] = pi_coverage_90;
  j["pi_coverage_95"] = pi_coverage_95;
  j["cate_rmse"] = cate_rmse;
  j["calibration_score"] = calibration_score;
  j["pearson_corr"] = pearson_corr;
  j["n_samples"] = n_samples;
  j["n_units"] = n_units;
  j["aggregation"] = aggregation;
  return j;
}

std::string MetricReport::csv_header() {
  return "wasserstein1,rmse,pi_coverage_75,pi_coverage_90,pi_coverage_95,cate_rmse,calibration_score,"
         "pearson_corr,n_samples,n_units";
}

std::string MetricReport::csv_row() const {
  std::ostringstream os;
  os << std::setprecision(17) << wasserstein1 << ',' << rmse << ',' << pi_coverage_75 << ',' << pi_coverage_90
     << ',' << pi_coverage_95 << ',' << cate_rmse << ',' << calibration_score << ',' << pearson_corr << ','
     << n_samples << ',' << n_units;
  return os.str();
}

}  // namespace odeguide
