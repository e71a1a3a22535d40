#include "odeguide/case_study.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "odeguide/dataset_io.hpp"
#include "odeguide/errors.hpp"
#include "odeguide/experiment.hpp"
#include "odeguide/metrics.hpp"

namespace odeguide {

namespace fs = std::filesystem;

std::size_t RegionPanel::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (regions[i].name == name) return i;
  }
  throw ConfigError("unknown region '" + name + "'");
}

void RegionPanel::validate() const {
  if (regions.size() < 2) throw ContractError("region panel: need at least two regions");
  std::vector<std::string> names;
  for (const auto& r : regions) {
    const std::size_t n = r.length();
    if (n == 0) throw ContractError("region " + r.name + ": empty series");
    if (r.deaths.size() != n || r.hospitalizations.size() != n || r.policy.size() != n) {
      throw ContractError("region " + r.name + ": column lengths disagree");
    }
    if (r.week != regions.front().week) throw ContractError("region " + r.name + ": week grid differs");
    for (std::size_t k = 1; k < n; ++k) {
      if (!(r.week[k] > r.week[k - 1])) throw ContractError("region " + r.name + ": weeks must increase");
    }
    for (int p : r.policy) {
      if (p != 0 && p != 1) throw ContractError("region " + r.name + ": policy must be 0 or 1");
    }
    names.push_back(r.name);
  }
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end()) {
    throw ContractError("region panel: duplicate region name");
  }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && s[b] == ' ') ++b;
  return s.substr(b);
}

}  // namespace

RegionPanel read_regions_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open region CSV " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": missing header");
  const auto header = split_csv(trim(line));
  const std::vector<std::string> want = {"region", "week", "deaths_per_capita", "hospitalizations", "policy"};
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[trim(header[i])] = i;
  for (const auto& w : want) {
    if (!col.count(w)) throw ConfigError(path.string() + ": missing column '" + w + "'");
  }

  struct Row {
    double week, deaths, hosp;
    int policy;
  };
  std::map<std::string, std::vector<Row>> rows;
  std::vector<std::string> order;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " cells");
    }
    const std::string name = trim(cells[col["region"]]);
    Row r{};
    try {
      r.week = parse_double(trim(cells[col["week"]]));
      r.deaths = parse_double(trim(cells[col["deaths_per_capita"]]));
      r.hosp = parse_double(trim(cells[col["hospitalizations"]]));
      const double p = parse_double(trim(cells[col["policy"]]));
      if (p != 0.0 && p != 1.0) throw ConfigError("policy must be 0 or 1");
      r.policy = static_cast<int>(p);
    } catch (const std::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!rows.count(name)) order.push_back(name);
    rows[name].push_back(r);
  }

  RegionPanel panel;
  for (const auto& name : order) {
    auto& rs = rows[name];
    std::sort(rs.begin(), rs.end(), [](const Row& a, const Row& b) { return a.week < b.week; });
    RegionSeries s;
    s.name = name;
    for (const Row& r : rs) {
      s.week.push_back(r.week);
      s.deaths.push_back(r.deaths);
      s.hospitalizations.push_back(r.hosp);
      s.policy.push_back(r.policy);
    }
    panel.regions.push_back(std::move(s));
  }
  panel.validate();
  return panel;
}

void write_regions_csv(const RegionPanel& panel, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "region,week,deaths_per_capita,hospitalizations,policy\n";
  for (const auto& r : panel.regions) {
    for (std::size_t k = 0; k < r.length(); ++k) {
      out << r.name << ',' << format_double(r.week[k]) << ',' << format_double(r.deaths[k]) << ','
          << format_double(r.hospitalizations[k]) << ',' << r.policy[k] << '\n';
    }
  }
}

RegionPanel synthetic_regions(std::size_t n_regions, std::size_t weeks, std::uint64_t seed, const CovidConfig& covid) {
  CovidConfig c = covid;
  c.weeks = weeks;
  c.drop_prob = 0.0;
  c.strict_count = n_regions / 2;
  const Dataset ds = gen_covid_dataset(synthetic_census(n_regions, seed), seed, c);
  // Either arm may be the observed one, so the policy is not a function of the epidemic parameters.
  Rng rng(mix_seed(seed, 0xA3B));
  RegionPanel panel;
  for (const auto& u : ds.units) {
    const Trajectory& f = uniform01(rng) < 0.5 ? u.factual : u.counterfactual;
    RegionSeries r;
    r.name = u.id;
    r.week = f.t;
    r.deaths = f.y;
    for (std::size_t k = 0; k < f.length(); ++k) {
      r.hospitalizations.push_back(f.x(static_cast<Eigen::Index>(k), 0));
      r.policy.push_back(f.a[k] > 0.5 ? 1 : 0);
    }
    panel.regions.push_back(std::move(r));
  }
  panel.validate();
  return panel;
}

RegionPanel planted_shift_panel(std::size_t clusters, std::size_t cluster_size, std::size_t weeks,
                                std::size_t train_weeks, double shift, std::uint64_t seed) {
  if (clusters < 1 || cluster_size < 2) throw ContractError("planted_shift_panel: need clusters of two or more");
  if (train_weeks < 1 || train_weeks >= weeks) throw ContractError("planted_shift_panel: train_weeks out of range");
  Rng rng(seed);
  RegionPanel panel;
  for (std::size_t c = 0; c < clusters; ++c) {
    const double level = 100.0 * static_cast<double>(c + 1);
    const bool mixed = c + 1 < clusters;
    for (std::size_t j = 0; j < cluster_size; ++j) {
      RegionSeries r;
      r.name = "c" + std::to_string(c) + "_r" + std::to_string(j);
      const bool strong = mixed && j % 2 == 0;
      for (std::size_t k = 0; k < weeks; ++k) {
        const double t = static_cast<double>(k);
        r.week.push_back(t);
        double d = level + 0.5 * t;
        if (k < train_weeks) {
          d += uniform01(rng);
        } else if (strong) {
          d += shift;
        }
        r.deaths.push_back(d);
        r.hospitalizations.push_back(0.1 * d);
        r.policy.push_back(strong && k >= train_weeks ? 1 : 0);
      }
      panel.regions.push_back(std::move(r));
    }
  }
  panel.validate();
  return panel;
}

std::vector<std::size_t> pick_test_regions(const RegionPanel& panel, const std::string& spec, std::uint64_t seed) {
  const std::size_t n = panel.regions.size();
  std::vector<std::size_t> out;
  const std::string prefix = "random:";
  if (spec.rfind(prefix, 0) == 0) {
    std::size_t count = 0;
    try {
      count = static_cast<std::size_t>(std::stoul(spec.substr(prefix.size())));
    } catch (const std::exception&) {
      throw ConfigError("test_regions: bad count in '" + spec + "'");
    }
    if (count < 1 || count > n) throw ConfigError("test_regions: count must be in [1, " + std::to_string(n) + "]");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, 0xC45E));
    std::shuffle(order.begin(), order.end(), rng);
    out.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  } else {
    std::stringstream ss(spec);
    std::string name;
    while (std::getline(ss, name, ',')) {
      name = trim(name);
      if (!name.empty()) out.push_back(panel.index_of(name));
    }
    if (out.empty()) throw ConfigError("test_regions: no regions listed");
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) throw ConfigError("test_regions: duplicate region");
  return out;
}

bool dominant_post_policy(const RegionSeries& region, std::size_t train_weeks) {
  std::size_t on = 0, total = 0;
  for (std::size_t k = train_weeks; k < region.policy.size(); ++k, ++total) on += region.policy[k] == 1 ? 1 : 0;
  return 2 * on > total;
}

std::vector<Neighbor> nearest_neighbors(const RegionPanel& panel, std::size_t target, std::size_t train_weeks,
                                        std::size_t k) {
  if (target >= panel.regions.size()) throw ContractError("nearest_neighbors: target out of range");
  if (train_weeks < 1 || train_weeks > panel.weeks()) throw ContractError("nearest_neighbors: bad train_weeks");
  auto pre = [&](std::size_t i) {
    const auto& d = panel.regions[i].deaths;
    return std::vector<double>(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(train_weeks));
  };
  const auto a = pre(target);
  std::vector<Neighbor> all;
  for (std::size_t i = 0; i < panel.regions.size(); ++i) {
    if (i == target) continue;
    all.push_back({i, dtw(a, pre(i)).distance, dominant_post_policy(panel.regions[i], train_weeks)});
  }
  std::stable_sort(all.begin(), all.end(), [](const Neighbor& x, const Neighbor& y) { return x.distance < y.distance; });
  if (all.size() > k) all.resize(k);
  return all;
}

double proxy_wd(const RegionPanel& panel, const std::vector<Neighbor>& neighbors, std::size_t train_weeks) {
  const std::size_t T = panel.weeks();
  if (train_weeks >= T) throw ContractError("proxy_wd: no post-period weeks");
  std::vector<double> strong(T - train_weeks, 0.0), weak(T - train_weeks, 0.0);
  std::size_t ns = 0, nw = 0;
  for (const auto& nb : neighbors) {
    auto& acc = nb.strong ? strong : weak;
    (nb.strong ? ns : nw) += 1;
    const auto& d = panel.regions.at(nb.region).deaths;
    for (std::size_t k = train_weeks; k < T; ++k) acc[k - train_weeks] += d[k];
  }
  if (ns == 0 || nw == 0) throw ContractError("proxy_wd: both policy groups must be present");
  for (auto& v : strong) v /= static_cast<double>(ns);
  for (auto& v : weak) v /= static_cast<double>(nw);
  return wasserstein1(strong, weak);
}

Dataset regions_to_dataset(const RegionPanel& panel, const CovidConfig& covid) {
  panel.validate();
  Dataset ds;
  ds.kind = "covid";
  ds.config = to_json(covid);
  const double t0 = panel.regions.front().week.front();
  for (const auto& r : panel.regions) {
    const std::size_t T = r.length();
    Trajectory f;
    for (double w : r.week) f.t.push_back(w - t0);
    f.y = r.deaths;
    f.y_latent = r.deaths;
    f.x.resize(static_cast<Eigen::Index>(T), 1);
    std::optional<double> start;
    for (std::size_t k = 0; k < T; ++k) {
      f.x(static_cast<Eigen::Index>(k), 0) = r.hospitalizations[k];
      f.a.push_back(static_cast<double>(r.policy[k]));
      if (!start && r.policy[k] == 1) start = f.t[k];
    }
    f.observed.assign(T, 1);

    UnitRecord u;
    u.id = r.name;
    u.group = start ? "strict" : "relaxed";
    u.population = 1000.0;
    u.treated = start.has_value();
    u.latent0 = covid_initial_state(u.population);
    u.latent0[kS] -= r.deaths.front();
    u.latent0[kD] = r.deaths.front();
    u.factual_treatment = TreatmentSchedule::policy(start, covid.beta_decay);
    u.counterfactual_treatment = u.factual_treatment;
    u.factual = f;
    u.counterfactual = std::move(f);
    ds.units.push_back(std::move(u));
  }
  ds.validate();
  return ds;
}

std::size_t CaseStudyResult::evaluated() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const RegionResult& r) { return !r.skipped; }));
}

std::string CaseStudyResult::to_csv(const RegionPanel& panel) const {
  std::ostringstream out;
  out << "region,status,reason,neighbors,n_strong,n_weak,proxy_wd,model_delta\n";
  for (const auto& r : rows) {
    std::string names;
    for (const auto& nb : r.neighbors) {
      if (!names.empty()) names += ';';
      names += panel.regions.at(nb.region).name;
    }
    out << r.region << ',' << (r.skipped ? "skipped" : "ok") << ',' << r.reason << ',' << names << ','
        << r.n_strong << ',' << r.n_weak << ',';
    if (r.skipped) {
      out << ",\n";
    } else {
      out << format_double(r.proxy_wd) << ',' << (std::isnan(r.model_delta) ? "" : format_double(r.model_delta))
          << '\n';
    }
  }
  return out.str();
}

namespace {

// Copy of a region's unit whose counterfactual arm follows a forced policy.
UnitRecord forced_arm(const UnitRecord& u, std::optional<double> mandate, double beta_decay) {
  UnitRecord r = u;
  r.counterfactual_treatment = TreatmentSchedule::policy(mandate, beta_decay);
  for (std::size_t k = 0; k < r.counterfactual.length(); ++k) {
    r.counterfactual.a[k] = r.counterfactual_treatment.indicator(r.counterfactual.t[k]);
  }
  return r;
}

std::vector<double> post_mean(const ad::Matrix& std_samples, const Standardizer& s, std::size_t from) {
  std::vector<double> out;
  for (Eigen::Index k = static_cast<Eigen::Index>(from); k < std_samples.cols(); ++k) {
    out.push_back(s.y_inv(std_samples.col(k).mean()));
  }
  return out;
}

}  // namespace

CaseStudyResult run_case_study(const ExperimentConfig& config, const RegionPanel& panel) {
  const CaseStudyConfig& cs = config.case_study;
  cs.validate();
  panel.validate();
  const std::size_t T = panel.weeks();
  if (cs.train_weeks >= T) throw ConfigError("case_study.train_weeks must be below the series length");
  const std::vector<std::size_t> test = pick_test_regions(panel, cs.test_regions, config.seed);

  CaseStudyResult result;
  for (std::size_t i : test) {
    RegionResult row;
    row.region = panel.regions[i].name;
    row.model_delta = std::numeric_limits<double>::quiet_NaN();
    row.neighbors = nearest_neighbors(panel, i, cs.train_weeks, cs.k_neighbors);
    for (const auto& nb : row.neighbors) (nb.strong ? row.n_strong : row.n_weak) += 1;
    if (row.neighbors.size() < cs.k_neighbors) {
      row.skipped = true;
      row.reason = "fewer than " + std::to_string(cs.k_neighbors) + " neighbors";
    } else if (row.n_strong == 0 || row.n_weak == 0) {
      row.skipped = true;
      row.reason = std::string("all neighbors ") + (row.n_strong == 0 ? "weak" : "strong");
    } else {
      row.proxy_wd = proxy_wd(panel, row.neighbors, cs.train_weeks);
    }
    result.rows.push_back(std::move(row));
  }
  if (!cs.fit_model || result.evaluated() == 0) return result;

  if (config.dataset.kind != "covid") throw ConfigError("case study model fit needs dataset.kind: covid");
  const ExperimentConfig& mc = config;
  Dataset ds = regions_to_dataset(panel, mc.dataset.covid);
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < panel.regions.size(); ++i) {
    if (!std::binary_search(test.begin(), test.end(), i)) train.push_back(i);
  }
  Pipeline p(mc);
  p.use_data(ds, train, test);
  p.train_hybrid();
  p.train_diffusion();

  const double start = p.data().units.front().factual.t.at(cs.train_weeks);
  const double decay = mc.dataset.covid.beta_decay;
  const GuidanceConfig* g = mc.guidance_enabled ? &mc.guidance : nullptr;
  const Standardizer& st = p.hybrid().stats;
  for (std::size_t r = 0; r < test.size(); ++r) {
    RegionResult& row = result.rows[r];
    if (row.skipped) continue;
    const UnitRecord& u = p.data().units[test[r]];
    const UnitRecord strong = forced_arm(u, start, decay);
    const UnitRecord weak = forced_arm(u, std::nullopt, decay);
    const auto ms = post_mean(p.sample_counterfactual(test[r], p.unit_guidance(strong), g, mc.n_samples), st,
                              cs.train_weeks);
    const auto mw = post_mean(p.sample_counterfactual(test[r], p.unit_guidance(weak), g, mc.n_samples), st,
                              cs.train_weeks);
    row.model_delta = wasserstein1(ms, mw);
  }
  return result;
}

CaseStudyResult run_case_study(const ExperimentConfig& config) {
  const CaseStudyConfig& cs = config.case_study;
  RegionPanel panel;
  if (cs.regions.empty()) {
    CovidConfig covid = config.dataset.covid;
    covid.strict_mandate = static_cast<double>(cs.train_weeks);
    panel = synthetic_regions(cs.n_regions, cs.weeks, config.seed, covid);
  } else {
    panel = read_regions_csv(cs.regions);
  }
  const fs::path dir = config.out_dir;
  fs::create_directories(dir);
  write_regions_csv(panel, dir / "regions.csv");
  const CaseStudyResult result = run_case_study(config, panel);
  std::ofstream(dir / "case_study.csv") << result.to_csv(panel);
  return result;
}

}  // namespace odeguide
