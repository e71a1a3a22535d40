#include "odeguide/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "odeguide/errors.hpp"

namespace odeguide {

std::size_t Trajectory::observed_count() const {
  return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), std::uint8_t{1}));
}

void Trajectory::validate() const {
  const std::size_t n = t.size();
  if (y.size() != n || y_latent.size() != n || a.size() != n || observed.size() != n ||
      static_cast<std::size_t>(x.rows()) != n) {
    throw ContractError("Trajectory: field lengths disagree");
  }
  for (std::size_t k = 1; k < n; ++k) {
    if (!(t[k] > t[k - 1])) throw ContractError("Trajectory: times must increase");
  }
}

void Dataset::validate() const {
  if (units.empty()) throw ContractError("Dataset: no units");
  std::vector<std::string> ids;
  for (const auto& u : units) {
    u.factual.validate();
    u.counterfactual.validate();
    if (u.factual.t != units.front().factual.t || u.counterfactual.t != u.factual.t) {
      throw ContractError("Dataset: grids differ across units or arms");
    }
    ids.push_back(u.id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ContractError("Dataset: duplicate unit id");
}

CovariateMixer CovariateMixer::draw(std::size_t x_dim, std::size_t latent_dim, Rng& rng) {
  std::bernoulli_distribution keep(0.5);
  auto entry = [&]() {
    const double v = standard_normal(rng);
    return keep(rng) ? v : 0.0;
  };
  CovariateMixer m;
  m.W3.resize(static_cast<Eigen::Index>(x_dim), static_cast<Eigen::Index>(latent_dim));
  m.W4.resize(static_cast<Eigen::Index>(x_dim), 1);
  for (Eigen::Index i = 0; i < m.W3.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.W3.cols(); ++j) m.W3(i, j) = entry();
  }
  for (Eigen::Index i = 0; i < m.W4.rows(); ++i) m.W4(i, 0) = entry();
  return m;
}

Eigen::VectorXd gen_covariates(const Eigen::VectorXd& z, double a, const CovariateMixer& mixer) {
  if (mixer.W3.cols() != z.size() || mixer.W4.rows() != mixer.W3.rows() || mixer.W4.cols() != 1) {
    throw ContractError("gen_covariates: mixer shape does not match latent dimension");
  }
  return mixer.W3 * z + mixer.W4.col(0) * a;
}

std::vector<std::uint8_t> irregular_mask(std::size_t length, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("irregular_mask: p must lie in [0, 1)");
  std::vector<std::uint8_t> mask(length, 1);
  Rng rng(seed);
  for (std::size_t k = 0; k < length; ++k) {
    const bool drop = uniform01(rng) < p;
    if (k > 0 && drop) mask[k] = 0;
  }
  return mask;
}

Trajectory irregular_mask(Trajectory traj, double p, std::uint64_t seed) {
  const auto mask = irregular_mask(traj.length(), p, seed);
  for (std::size_t k = 0; k < mask.size(); ++k) traj.observed[k] = static_cast<std::uint8_t>(traj.observed[k] & mask[k]);
  return traj;
}

StateVector covid_initial_state(double N) {
  if (!(N > 0.0)) throw ContractError("covid_initial_state: N must be positive");
  static constexpr double kFractions[] = {0.0015, 0.001, 0.0007, 0.0005, 0.0002, 0.00001, 0.000005, 0.0000005,
                                          0.0000001};
  StateVector z(kSeirhdDim, 0.0);
  double assigned = 0.0;
  for (std::size_t k = 0; k < 9; ++k) {
    z[k + 1] = kFractions[k] * N;
    assigned += z[k + 1];
  }
  z[kS] = N - assigned;
  return z;
}

std::vector<std::pair<std::string, double>> synthetic_census(std::size_t n_cities, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xC0FFEE));
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < n_cities; ++i) {
    std::ostringstream name;
    name << "city_" << std::setw(3) << std::setfill('0') << i;
    const double log_n = 5.0 + 2.0 * uniform01(rng);
    out.emplace_back(name.str(), std::round(std::pow(10.0, log_n)));
  }
  return out;
}

std::vector<std::pair<std::string, double>> load_census_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open census file " + path);
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<std::string, double>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ContractError("census row without comma: " + line);
    out.emplace_back(line.substr(0, comma), std::stod(line.substr(comma + 1)));
  }
  return out;
}

namespace {

std::vector<double> measurement_times(double t0, std::size_t count) {
  std::vector<double> t(count);
  for (std::size_t k = 0; k < count; ++k) t[k] = t0 + static_cast<double>(k);
  return t;
}

// Grid index of each measurement time on a solver grid starting at 0.
std::size_t grid_index(double t, double dt) { return static_cast<std::size_t>(std::llround(t / dt)); }

struct CovidArm {
  Trajectory traj;
  TreatmentSchedule schedule;
};

CovidArm simulate_covid_arm(const SeirhdParams& params, double mandate, const CovidConfig& c) {
  ExpertOdeSpec spec;
  spec.model.family = ExpertFamily::Seirhd;
  spec.model.seirhd = params;
  spec.initial = covid_initial_state(params.N);
  spec.treatment = TreatmentSchedule::policy(mandate, c.beta_decay);
  const double horizon = static_cast<double>(c.weeks - 1);
  const OdeTrajectory sim = simulate_expert(spec, TimeGrid::spanning(0.0, horizon, c.dt));
  const double per1000 = 1000.0 / params.N;
  CovidArm arm{{}, spec.treatment};
  Trajectory& tr = arm.traj;
  tr.t = measurement_times(0.0, c.weeks);
  tr.x.resize(static_cast<Eigen::Index>(c.weeks), 2);
  for (std::size_t k = 0; k < c.weeks; ++k) {
    const StateVector& z = sim.states[grid_index(tr.t[k], c.dt)];
    tr.y_latent.push_back(z[kD] * per1000);
    tr.x(static_cast<Eigen::Index>(k), 0) = params.severe_exit * z[kIS] * per1000;
    tr.x(static_cast<Eigen::Index>(k), 1) = (z[kIM] + z[kIS]) * per1000;
    tr.a.push_back(spec.treatment.indicator(tr.t[k]));
  }
  tr.observed.assign(c.weeks, 1);
  return arm;
}

void add_noise(Trajectory& tr, const std::vector<double>& draws, double sd) {
  tr.y.resize(tr.y_latent.size());
  for (std::size_t k = 0; k < tr.y.size(); ++k) tr.y[k] = tr.y_latent[k] + sd * draws[k];
}

std::vector<double> normal_draws(std::size_t n, Rng& rng) {
  std::vector<double> d(n);
  for (auto& v : d) v = standard_normal(rng);
  return d;
}

double exponential(Rng& rng, double rate) {
  std::exponential_distribution<double> dist(rate);
  return dist(rng);
}

}  // namespace

Dataset gen_covid_dataset(const std::vector<std::pair<std::string, double>>& populations, std::uint64_t seed,
                          const CovidConfig& c) {
  if (populations.empty()) throw ContractError("gen_covid_dataset: no populations");
  if (c.weeks < 2) throw ContractError("gen_covid_dataset: need at least two weeks");
  for (const auto& [name, n] : populations) {
    if (!(n > 0.0)) throw ContractError("gen_covid_dataset: population of " + name + " must be positive");
  }
  std::vector<std::size_t> order(populations.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(mix_seed(seed, 0x5EED));
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  std::vector<bool> strict(populations.size(), false);
  for (std::size_t k = 0; k < std::min(c.strict_count, order.size()); ++k) strict[order[k]] = true;

  Dataset ds;
  ds.kind = "covid";
  ds.seed = seed;
  ds.config = to_json(c);
  for (std::size_t i = 0; i < populations.size(); ++i) {
    SeirhdParams p = c.rates;
    p.N = populations[i].second;
    p.beta = c.initial_beta;
    p.alpha = strict[i] ? c.strict_alpha : c.relaxed_alpha;
    p.delta = strict[i] ? c.strict_delta : c.relaxed_delta;
    const double own = strict[i] ? c.strict_mandate : c.relaxed_mandate;
    const double other = strict[i] ? c.relaxed_mandate : c.strict_mandate;
    CovidArm f = simulate_covid_arm(p, own, c);
    CovidArm cf = simulate_covid_arm(p, other, c);
    Rng rng(mix_seed(seed, i));
    const auto draws = normal_draws(c.weeks, rng);
    add_noise(f.traj, draws, c.noise_sd);
    add_noise(cf.traj, draws, c.noise_sd);
    f.traj = irregular_mask(std::move(f.traj), c.drop_prob, mix_seed(seed ^ 0xA5A5A5A5ULL, i));

    UnitRecord u;
    u.id = populations[i].first;
    u.group = strict[i] ? "strict" : "relaxed";
    u.population = p.N;
    u.treated = strict[i];
    u.latent0 = covid_initial_state(p.N);
    u.factual_treatment = f.schedule;
    u.counterfactual_treatment = cf.schedule;
    u.factual = std::move(f.traj);
    u.counterfactual = std::move(cf.traj);
    ds.units.push_back(std::move(u));
  }
  ds.validate();
  return ds;
}

Dataset gen_dex_dataset(std::size_t n_patients, std::uint64_t seed, const DexConfig& c) {
  if (n_patients < 1) throw ContractError("gen_dex_dataset: need at least one patient");
  if (c.days < 1) throw ContractError("gen_dex_dataset: need at least one day");
  PkpdParams params = c.pkpd;
  params.full_model = true;

  Rng master(mix_seed(seed, 0xDE5));
  const CovariateMixer mixer = CovariateMixer::draw(1, 5, master);
  std::vector<std::size_t> order(n_patients);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), master);
  std::vector<bool> treated(n_patients, false);
  for (std::size_t k = 0; k < n_patients / 2; ++k) treated[order[k]] = true;

  const double horizon = static_cast<double>(c.days);
  const TimeGrid grid = TimeGrid::spanning(0.0, horizon, c.dt);
  const std::vector<double> times = measurement_times(1.0, c.days);
  const TreatmentSchedule dosed = TreatmentSchedule::dosing({{c.dose_time, c.dose_amount}}, c.k_d);
  const TreatmentSchedule undosed = TreatmentSchedule::dosing({}, c.k_d);

  Dataset ds;
  ds.kind = "dex";
  ds.seed = seed;
  ds.config = to_json(c);
  ds.config["n_patients"] = n_patients;
  for (std::size_t i = 0; i < n_patients; ++i) {
    Rng rng(mix_seed(seed, i));
    StateVector z0(5);
    z0[1] = exponential(rng, c.small_rate);
    z0[2] = exponential(rng, c.small_rate);
    z0[0] = exponential(rng, c.large_rate);
    z0[3] = exponential(rng, c.large_rate);
    z0[4] = exponential(rng, c.large_rate);
    const auto draws = normal_draws(c.days, rng);

    auto arm = [&](const TreatmentSchedule& schedule) {
      ExpertOdeSpec spec;
      spec.model.family = ExpertFamily::Pkpd;
      spec.model.pkpd = params;
      spec.initial = z0;
      spec.treatment = schedule;
      const OdeTrajectory sim = simulate_expert(spec, grid);
      Trajectory tr;
      tr.t = times;
      tr.x.resize(static_cast<Eigen::Index>(c.days), 1);
      for (std::size_t k = 0; k < c.days; ++k) {
        Eigen::VectorXd z = Eigen::Map<const Eigen::VectorXd>(sim.states[grid_index(times[k], c.dt)].data(), 5);
        z[2] += dex_plasma(times[k], schedule, params.k_3);
        const double a = schedule.indicator(times[k]);
        tr.y_latent.push_back(z[0]);
        tr.x(static_cast<Eigen::Index>(k), 0) = gen_covariates(z, a, mixer)[0];
        tr.a.push_back(a);
      }
      tr.observed.assign(c.days, 1);
      add_noise(tr, draws, c.noise_sd);
      return tr;
    };
    Trajectory with = arm(dosed);
    Trajectory without = arm(undosed);

    UnitRecord u;
    std::ostringstream name;
    name << "patient_" << std::setw(3) << std::setfill('0') << i;
    u.id = name.str();
    u.treated = treated[i];
    u.group = treated[i] ? "treated" : "control";
    u.latent0 = z0;
    u.factual_treatment = treated[i] ? dosed : undosed;
    u.counterfactual_treatment = treated[i] ? undosed : dosed;
    u.factual = irregular_mask(treated[i] ? with : without, c.drop_prob, mix_seed(seed ^ 0xA5A5A5A5ULL, i));
    u.counterfactual = treated[i] ? std::move(without) : std::move(with);
    ds.units.push_back(std::move(u));
  }
  ds.validate();
  return ds;
}

nlohmann::ordered_json to_json(const CovidConfig& c) {
  nlohmann::ordered_json j;
  j["weeks"] = c.weeks;
  j["dt"] = c.dt;
  j["strict_count"] = c.strict_count;
  j["strict_delta"] = c.strict_delta;
  j["strict_alpha"] = c.strict_alpha;
  j["strict_mandate"] = c.strict_mandate;
  j["relaxed_delta"] = c.relaxed_delta;
  j["relaxed_alpha"] = c.relaxed_alpha;
  j["relaxed_mandate"] = c.relaxed_mandate;
  j["initial_beta"] = c.initial_beta;
  j["beta_decay"] = c.beta_decay;
  j["noise_sd"] = c.noise_sd;
  j["drop_prob"] = c.drop_prob;
  j["asymptomatic_fraction"] = c.rates.asymptomatic_fraction;
  j["presymptomatic_exit"] = c.rates.presymptomatic_exit;
  j["severe_exit"] = c.rates.severe_exit;
  j["hospital_death_fraction"] = c.rates.hospital_death_fraction;
  j["gamma"] = c.rates.gamma;
  j["hospital_death_rate"] = c.rates.hospital_death_rate;
  return j;
}

nlohmann::ordered_json to_json(const DexConfig& c) {
  nlohmann::ordered_json j;
  j["days"] = c.days;
  j["dt"] = c.dt;
  j["dose_time"] = c.dose_time;
  j["dose_amount"] = c.dose_amount;
  j["k_d"] = c.k_d;
  j["noise_sd"] = c.noise_sd;
  j["drop_prob"] = c.drop_prob;
  j["small_rate"] = c.small_rate;
  j["large_rate"] = c.large_rate;
  const PkpdParams& p = c.pkpd;
  j["pkpd"] = {{"k_IR", p.k_IR}, {"k_PF", p.k_PF},   {"k_O", p.k_O},     {"E_max", p.E_max}, {"EC_50", p.EC_50},
               {"h_P", p.h_P},   {"k_Dex", p.k_Dex}, {"k_2", p.k_2},     {"k_3", p.k_3},     {"k_DP", p.k_DP},
               {"k_IIR", p.k_IIR}, {"k_DC", p.k_DC}, {"h_C", p.h_C},     {"k_1", p.k_1}};
  return j;
}

std::size_t divergence_index(const UnitRecord& unit) {
  const auto& fa = unit.factual.a;
  const auto& ca = unit.counterfactual.a;
  for (std::size_t k = 0; k < std::min(fa.size(), ca.size()); ++k) {
    if (fa[k] != ca[k]) return k;
  }
  return fa.size();
}

StateVector expert_initial_state(const Dataset& dataset, const UnitRecord& unit) {
  if (dataset.kind == "covid") {
    const StateVector& z = unit.latent0;
    const double s = 1000.0 / unit.population;
    const double infected = z[kIA] + z[kIP] + z[kIM] + z[kIS] + z[kHR] + z[kHD];
    return {z[kS] * s, z[kE] * s, infected * s, z[kR] * s, z[kD] * s};
  }
  if (dataset.kind == "dex") return {unit.latent0[0], unit.latent0[1], unit.latent0[2], unit.latent0[3]};
  throw ContractError("expert_initial_state: unknown dataset kind '" + dataset.kind + "'");
}

}  // namespace odeguide
