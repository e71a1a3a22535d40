#include "odeguide/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "odeguide/dataset_io.hpp"
#include "odeguide/errors.hpp"

namespace odeguide {

namespace fs = std::filesystem;
using ad::Matrix;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::size_t outcome_index(ExpertFamily f) {
  switch (f) {
    case ExpertFamily::Seirm: return 4;
    case ExpertFamily::Seirhd: return kD;
    case ExpertFamily::Pkpd: return 0;
  }
  return 0;
}

std::vector<double> column(const Matrix& m, Eigen::Index c) {
  std::vector<double> v(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) v[static_cast<std::size_t>(r)] = m(r, c);
  return v;
}

Matrix row_matrix(const std::vector<double>& v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::ordered_json to_ordered(const nlohmann::json& j) { return nlohmann::ordered_json::parse(j.dump()); }

std::string loss_csv(const TrainResult& r) {
  std::ostringstream os;
  os << "epoch,loss\n";
  for (std::size_t i = 0; i < r.loss_curve.size(); ++i) os << i << ',' << format_double(r.loss_curve[i]) << '\n';
  return os.str();
}

double mean_defined(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  }
  return n == 0 ? kNaN : s / static_cast<double>(n);
}

MetricReport aggregate(const std::vector<UnitEvaluation>& units, std::size_t n_samples) {
  MetricReport r;
  r.n_samples = n_samples;
  r.n_units = units.size();
  if (units.empty()) return r;
  std::vector<double> corr;
  for (const UnitEvaluation& u : units) {
    r.wasserstein1 += u.wasserstein1;
    r.rmse += u.rmse;
    r.pi_coverage_75 += u.pi_coverage_75;
    r.pi_coverage_90 += u.pi_coverage_90;
    r.pi_coverage_95 += u.pi_coverage_95;
    r.calibration_score += u.calibration_score;
    r.cate_rmse += u.cate_rmse;
    corr.push_back(u.pearson_corr);
  }
  const double n = static_cast<double>(units.size());
  r.wasserstein1 /= n;
  r.rmse /= n;
  r.pi_coverage_75 /= n;
  r.pi_coverage_90 /= n;
  r.pi_coverage_95 /= n;
  r.calibration_score /= n;
  r.cate_rmse /= n;
  r.pearson_corr = mean_defined(corr);
  return r;
}

nlohmann::ordered_json unit_json(const UnitEvaluation& u) {
  nlohmann::ordered_json j;
  j["id"] = u.id;
  j["wasserstein1"] = u.wasserstein1;
  j["rmse"] = u.rmse;
  j["pearson_corr"] = u.pearson_corr;
  j["pi_coverage_75"] = u.pi_coverage_75;
  j["pi_coverage_90"] = u.pi_coverage_90;
  j["pi_coverage_95"] = u.pi_coverage_95;
  j["calibration_score"] = u.calibration_score;
  j["cate_rmse"] = u.cate_rmse;
  return j;
}

}  // namespace

nlohmann::ordered_json ExperimentReport::to_json() const {
  nlohmann::ordered_json j;
  j["eta_star"] = eta_star;
  j["guided"] = guided.to_json();
  j["unguided"] = unguided.to_json();
  j["units"] = nlohmann::ordered_json::array();
  for (const auto& u : units) j["units"].push_back(unit_json(u));
  j["units_unguided"] = nlohmann::ordered_json::array();
  for (const auto& u : units_unguided) j["units_unguided"].push_back(unit_json(u));
  return j;
}

std::vector<double> expert_outcome(const Dataset& ds, const ExpertModel& model, const UnitRecord& unit,
                                   const TreatmentSchedule& schedule) {
  const std::vector<double>& t = unit.factual.t;
  if (t.empty()) throw ContractError("expert_outcome: empty trajectory");
  const double dt = ds.config.at("dt").get<double>();
  ExpertOdeSpec spec{model, expert_initial_state(ds, unit), schedule};
  const OdeTrajectory traj = simulate_expert(spec, TimeGrid::spanning(0.0, t.back(), dt));
  const std::size_t idx = outcome_index(model.family);
  std::vector<double> out;
  out.reserve(t.size());
  for (double tt : t) out.push_back(interpolate(traj, tt).at(idx));
  return out;
}

Pipeline::Pipeline(ExperimentConfig config) : cfg_(std::move(config)) {
  cfg_.validate();
  schedule_ = make_schedule(cfg_.T_d, cfg_.beta_start, cfg_.beta_end, cfg_.lambda_const);
}

const HybridCpModel& Pipeline::hybrid() const {
  if (!hybrid_) throw ContractError("pipeline: hybrid model is not trained");
  return *hybrid_;
}

const DenoiserModel& Pipeline::denoiser() const {
  if (!denoiser_) throw ContractError("pipeline: diffusion model is not trained");
  return *denoiser_;
}

std::uint64_t Pipeline::unit_seed(std::size_t unit, std::uint64_t stream) const {
  return mix_seed(mix_seed(cfg_.seed, stream), unit);
}

void Pipeline::load_or_generate_data() {
  const DatasetSpec& d = cfg_.dataset;
  if (!d.path.empty()) {
    data_ = read_dataset(d.path);
  } else if (d.kind == "dex") {
    DexConfig dc = d.dex;
    dc.n_patients = d.n_units;
    data_ = gen_dex_dataset(d.n_units, cfg_.seed, dc);
  } else {
    const auto census = d.census.empty() ? synthetic_census(d.n_units, cfg_.seed) : load_census_csv(d.census);
    data_ = gen_covid_dataset(census, cfg_.seed, d.covid);
  }
  if (data_.kind != d.kind) throw ConfigError("dataset kind '" + data_.kind + "' does not match dataset.kind");
  data_.validate();
  split_units();
}

void Pipeline::use_data(Dataset data, std::vector<std::size_t> train, std::vector<std::size_t> test) {
  data.validate();
  if (data.kind != cfg_.dataset.kind) throw ConfigError("dataset kind '" + data.kind + "' does not match dataset.kind");
  std::vector<bool> seen(data.units.size(), false);
  for (const auto* part : {&train, &test}) {
    for (std::size_t i : *part) {
      if (i >= seen.size() || seen[i]) throw ContractError("use_data: split indices must be distinct and in range");
      seen[i] = true;
    }
  }
  if (train.empty()) throw ContractError("use_data: empty training split");
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  data_ = std::move(data);
  train_ = std::move(train);
  test_ = std::move(test);
}

void Pipeline::split_units() {
  const std::size_t n = data_.units.size();
  if (n < 2) throw ContractError("pipeline: need at least two units");
  const auto n_test = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg_.test_fraction * static_cast<double>(n))), 1, n - 1);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(cfg_.seed, 0x5B11));
  std::shuffle(order.begin(), order.end(), rng);
  test_.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  train_.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test_.begin(), test_.end());
  std::sort(train_.begin(), train_.end());
}

Dataset Pipeline::subset(const std::vector<std::size_t>& idx) const {
  Dataset s = data_;
  s.units.clear();
  for (std::size_t i : idx) s.units.push_back(data_.units.at(i));
  return s;
}

void Pipeline::train_hybrid() {
  const Dataset train = subset(train_);
  hybrid_ = HybridCpModel::create(cfg_.hybrid, train.covariate_dim(), Standardizer::fit(train), mix_seed(cfg_.seed, 1));
  HybridTrainConfig tc = cfg_.hybrid_train;
  tc.seed = mix_seed(cfg_.seed, 2);
  hybrid_fit_ = odeguide::train_hybrid(*hybrid_, train, tc);
}

void Pipeline::train_diffusion() {
  const Dataset train = subset(train_);
  propensity_.reset();
  if (cfg_.use_iptw) propensity_ = fit_propensity(train, cfg_.propensity);
  const DiffusionData d = build_diffusion_data(train, hybrid(), propensity_ ? &*propensity_ : nullptr);
  const std::size_t T = train.horizon();
  denoiser_ = DenoiserModel::create(cfg_.denoiser, T, condition_width(T, train.covariate_dim()), cfg_.T_d,
                                    mix_seed(cfg_.seed, 3));
  DiffusionTrainConfig tc = cfg_.diffusion_train;
  tc.seed = mix_seed(cfg_.seed, 4);
  diffusion_fit_ = odeguide::train_diffusion(*denoiser_, schedule_, d, tc);
}

UnitGuidance Pipeline::unit_guidance(std::size_t unit) const { return unit_guidance(data_.units.at(unit)); }

UnitGuidance Pipeline::unit_guidance(const UnitRecord& u) const {
  const HybridCpModel& h = hybrid();
  const Trajectory& f = u.factual;
  const InitObservation init = initial_observation(f);
  const HybridPrediction pf = predict(h, init, u.factual_treatment, f.t);
  const HybridPrediction pcf = predict(h, init, u.counterfactual_treatment, f.t);

  UnitGuidance g;
  g.cond_f = row_matrix(condition_vector(h, pf, f.a));
  g.cond_cf = row_matrix(condition_vector(h, pcf, u.counterfactual.a));
  const std::size_t T = f.length();
  for (std::size_t t = 0; t < T; ++t) {
    g.factual_raw.push_back(f.observed[t] != 0 ? f.y[t] : pf.y[t]);
    g.factual_std.push_back(h.stats.y(g.factual_raw.back()));
  }

  const ExpertModel& expert = h.config.expert;
  const std::vector<double> ef = expert_outcome(data_, expert, u, u.factual_treatment);
  const std::vector<double> ecf = expert_outcome(data_, expert, u, u.counterfactual_treatment);
  std::vector<double> ef_obs, y_obs;
  for (std::size_t t = 0; t < T; ++t) {
    if (f.observed[t] == 0) continue;
    ef_obs.push_back(ef[t]);
    y_obs.push_back(f.y[t]);
  }
  const Alignment a = align_factual(ef_obs, y_obs);
  g.signals_raw.scale = a.scale;
  g.signals_raw.shift = a.shift;
  g.signals_raw.path = a.path;
  for (std::size_t t = 0; t < T; ++t) {
    g.signals_raw.f_f.push_back(a.scale * ef[t] + a.shift);
    g.signals_raw.f_cf.push_back(a.scale * ecf[t] + a.shift);
  }
  g.signals_std = g.signals_raw;
  for (std::size_t t = 0; t < T; ++t) {
    g.signals_std.f_f[t] = h.stats.y(g.signals_raw.f_f[t]);
    g.signals_std.f_cf[t] = h.stats.y(g.signals_raw.f_cf[t]);
  }
  g.window = FactualWindow::before(divergence_index(u));
  return g;
}

Matrix Pipeline::sample_counterfactual(std::size_t unit, const UnitGuidance& ctx, const GuidanceConfig* guidance,
                                       std::size_t n_samples) const {
  const DenoiserModel& m = denoiser();
  GuidanceHook hook;
  if (guidance != nullptr) hook = make_guidance_hook(ctx.factual_std, ctx.signals_std, ctx.window, *guidance);
  return odeguide::sample(conditioned(m, ctx.cond_cf), m.horizon, schedule_, hook, n_samples, unit_seed(unit, 0xCF),
                cfg_.noise_scale)
      .samples;
}

namespace {

Matrix to_raw(const Matrix& std_samples, const Standardizer& s) {
  return (std_samples.array() * s.y_sd + s.y_mean).matrix();
}

}  // namespace

UnitEvaluation Pipeline::evaluate_unit(std::size_t unit, const Matrix& cf, const Matrix& factual) const {
  const UnitRecord& u = data_.units.at(unit);
  const Trajectory& c = u.counterfactual;
  const auto T = static_cast<Eigen::Index>(c.length());
  if (cf.cols() != T) throw ContractError("evaluate_unit: ensemble horizon mismatch");
  UnitEvaluation e;
  e.id = u.id;
  const double sigma = data_.config.value("noise_sd", 0.0);
  Rng rng(unit_seed(unit, 0x7D));
  double w = 0.0;
  for (Eigen::Index t = 0; t < T; ++t) {
    std::vector<double> truth(static_cast<std::size_t>(cf.rows()));
    for (double& v : truth) v = c.y_latent[static_cast<std::size_t>(t)] + sigma * standard_normal(rng);
    w += wasserstein1(column(cf, t), truth);
  }
  e.wasserstein1 = w / static_cast<double>(T);
  const std::vector<double> mean = ensemble_mean(cf);
  e.rmse = rmse(mean, c.y_latent);
  try {
    e.pearson_corr = pearson(mean, c.y_latent);
  } catch (const ContractError&) {
    e.pearson_corr = kNaN;
  }
  e.pi_coverage_75 = pi_coverage(cf, c.y, 0.75);
  e.pi_coverage_90 = pi_coverage(cf, c.y, 0.90);
  e.pi_coverage_95 = pi_coverage(cf, c.y, 0.95);
  e.calibration_score = calibration_score(cf, c.y);
  if (factual.size() > 0) {
    const Matrix& treated = u.treated ? factual : cf;
    const Matrix& control = u.treated ? cf : factual;
    const std::vector<double>& lt = u.treated ? u.factual.y_latent : c.y_latent;
    const std::vector<double>& lc = u.treated ? c.y_latent : u.factual.y_latent;
    std::vector<double> truth(lt.size());
    for (std::size_t t = 0; t < lt.size(); ++t) truth[t] = lt[t] - lc[t];
    e.cate_rmse = cate_rmse(cate_estimate(treated, control), truth);
  }
  return e;
}

void Pipeline::select_eta() {
  sweep_.clear();
  if (!cfg_.guidance_enabled) {
    eta_star_ = 0.0;
    return;
  }
  if (!cfg_.select_eta) {
    eta_star_ = cfg_.guidance.eta;
    return;
  }
  std::vector<UnitGuidance> ctx;
  for (std::size_t u : test_) ctx.push_back(unit_guidance(u));
  const Standardizer& stats = hybrid().stats;
  const EtaSelection sel = odeguide::select_eta(cfg_.guidance.eta_candidates, [&](double eta) {
    GuidanceConfig g = cfg_.guidance;
    g.eta = eta;
    std::vector<double> corr, wd, rm;
    for (std::size_t k = 0; k < test_.size(); ++k) {
      const Matrix raw = to_raw(sample_counterfactual(test_[k], ctx[k], &g, cfg_.selection_samples), stats);
      corr.push_back(selection_correlation(ensemble_mean(raw), ctx[k].factual_raw, ctx[k].signals_raw, g.target));
      const UnitEvaluation e = evaluate_unit(test_[k], raw, Matrix());
      wd.push_back(e.wasserstein1);
      rm.push_back(e.rmse);
    }
    const double r = mean_defined(corr);
    sweep_.push_back(EtaSweepRow{eta, r, mean_defined(wd), mean_defined(rm)});
    return r;
  });
  eta_star_ = sel.eta_star;
}

void Pipeline::sample() {
  const Standardizer& stats = hybrid().stats;
  const DenoiserModel& m = denoiser();
  ensembles_ = EnsembleSet{};
  GuidanceConfig g = cfg_.guidance;
  g.eta = eta_star_;
  for (std::size_t u : test_) {
    const UnitGuidance ctx = unit_guidance(u);
    const Matrix unguided = sample_counterfactual(u, ctx, nullptr, cfg_.n_samples);
    const Matrix guided = cfg_.guidance_enabled ? sample_counterfactual(u, ctx, &g, cfg_.n_samples) : unguided;
    const Matrix factual = odeguide::sample(conditioned(m, ctx.cond_f), m.horizon, schedule_, nullptr, cfg_.n_samples,
                                            unit_seed(u, 0xFA), cfg_.noise_scale)
                               .samples;
    ensembles_.unit_ids.push_back(data_.units[u].id);
    ensembles_.counterfactual.push_back(to_raw(guided, stats));
    ensembles_.unguided.push_back(to_raw(unguided, stats));
    ensembles_.factual.push_back(to_raw(factual, stats));
  }
}

ExperimentReport Pipeline::evaluate() {
  if (ensembles_.unit_ids.size() != test_.size()) throw ContractError("pipeline: ensembles are missing");
  ExperimentReport r;
  r.eta_star = eta_star_;
  for (std::size_t k = 0; k < test_.size(); ++k) {
    r.units.push_back(evaluate_unit(test_[k], ensembles_.counterfactual[k], ensembles_.factual[k]));
    r.units_unguided.push_back(evaluate_unit(test_[k], ensembles_.unguided[k], ensembles_.factual[k]));
  }
  r.guided = aggregate(r.units, cfg_.n_samples);
  r.unguided = aggregate(r.units_unguided, cfg_.n_samples);
  return r;
}

void Pipeline::save_data(const fs::path& dir) const {
  write_dataset(data_, dir / "data");
  nlohmann::ordered_json j;
  j["train"] = nlohmann::ordered_json::array();
  j["test"] = nlohmann::ordered_json::array();
  for (std::size_t i : train_) j["train"].push_back(data_.units[i].id);
  for (std::size_t i : test_) j["test"].push_back(data_.units[i].id);
  write_text(dir / "split.json", j.dump(2) + "\n");
}

void Pipeline::load_data(const fs::path& dir) {
  data_ = read_dataset(dir / "data");
  const auto j = nlohmann::ordered_json::parse(read_text(dir / "split.json"));
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data_.units.size(); ++i) index[data_.units[i].id] = i;
  auto ids = [&](const char* key) {
    std::vector<std::size_t> out;
    for (const auto& id : j.at(key)) {
      auto it = index.find(id.get<std::string>());
      if (it == index.end()) throw ContractError("split.json names an unknown unit " + id.get<std::string>());
      out.push_back(it->second);
    }
    return out;
  };
  train_ = ids("train");
  test_ = ids("test");
}

void Pipeline::save_hybrid(const fs::path& dir) const {
  nlohmann::ordered_json j;
  j["manifest"] = hybrid().manifest();
  j["params"] = to_ordered(hybrid().params.to_json());
  write_text(dir / "checkpoints" / "hybrid.json", j.dump() + "\n");
  write_text(dir / "hybrid_loss.csv", loss_csv(hybrid_fit_));
}

void Pipeline::load_hybrid(const fs::path& dir) {
  const auto j = nlohmann::json::parse(read_text(dir / "checkpoints" / "hybrid.json"));
  const auto manifest = nlohmann::ordered_json::parse(j.at("manifest").dump());
  HybridCpModel m = HybridCpModel::create(cfg_.hybrid, manifest.at("x_dim").get<std::size_t>(),
                                          Standardizer::from_json(manifest.at("stats")), 0);
  ad::ParamSet p = ad::ParamSet::from_json(j.at("params"));
  if (!p.same_shape(m.params)) throw ContractError("hybrid checkpoint does not match the configured architecture");
  m.params = std::move(p);
  m.rebind();
  hybrid_ = std::move(m);
}

void Pipeline::save_diffusion(const fs::path& dir) const {
  nlohmann::ordered_json j;
  j["manifest"] = denoiser().manifest();
  j["params"] = to_ordered(denoiser().params.to_json());
  write_text(dir / "checkpoints" / "denoiser.json", j.dump() + "\n");
  if (propensity_) write_text(dir / "checkpoints" / "propensity.json", propensity_->to_json().dump(2) + "\n");
  write_text(dir / "diffusion_loss.csv", loss_csv(diffusion_fit_));
}

void Pipeline::load_diffusion(const fs::path& dir) {
  const auto j = nlohmann::json::parse(read_text(dir / "checkpoints" / "denoiser.json"));
  const auto& man = j.at("manifest");
  DenoiserModel m = DenoiserModel::create(cfg_.denoiser, man.at("horizon").get<std::size_t>(),
                                          man.at("cond_dim").get<std::size_t>(), man.at("T_d").get<int>(), 0);
  ad::ParamSet p = ad::ParamSet::from_json(j.at("params"));
  if (!p.same_shape(m.params)) throw ContractError("denoiser checkpoint does not match the configured architecture");
  m.params = std::move(p);
  m.rebind();
  denoiser_ = std::move(m);
  if (fs::exists(dir / "checkpoints" / "propensity.json")) {
    propensity_ = PropensityModel::from_json(
        nlohmann::ordered_json::parse(read_text(dir / "checkpoints" / "propensity.json")));
  }
}

void Pipeline::save_selection(const fs::path& dir) const {
  nlohmann::ordered_json j;
  j["eta_star"] = eta_star_;
  j["selected"] = !sweep_.empty();
  write_text(dir / "eta.json", j.dump(2) + "\n");
  std::ostringstream os;
  os << "eta,correlation,wasserstein,rmse\n";
  for (const EtaSweepRow& r : sweep_) {
    os << format_double(r.eta) << ',' << format_double(r.correlation) << ',' << format_double(r.wasserstein) << ','
       << format_double(r.rmse) << '\n';
  }
  write_text(dir / "eta_sweep.csv", os.str());
}

void Pipeline::load_selection(const fs::path& dir) {
  if (!fs::exists(dir / "eta.json")) {
    eta_star_ = cfg_.guidance_enabled ? cfg_.guidance.eta : 0.0;
    return;
  }
  eta_star_ = nlohmann::ordered_json::parse(read_text(dir / "eta.json")).at("eta_star").get<double>();
}

void Pipeline::save_ensembles(const fs::path& dir) const {
  for (std::size_t k = 0; k < ensembles_.unit_ids.size(); ++k) {
    const std::vector<double>& t = data_.units[test_[k]].counterfactual.t;
    const fs::path base = dir / "ensembles";
    write_ensemble_csv(base / (ensembles_.unit_ids[k] + "_cf.csv"), ensembles_.counterfactual[k], t);
    write_ensemble_csv(base / (ensembles_.unit_ids[k] + "_cf_unguided.csv"), ensembles_.unguided[k], t);
    write_ensemble_csv(base / (ensembles_.unit_ids[k] + "_factual.csv"), ensembles_.factual[k], t);
  }
}

void Pipeline::load_ensembles(const fs::path& dir) {
  ensembles_ = EnsembleSet{};
  for (std::size_t u : test_) {
    const std::string& id = data_.units[u].id;
    const std::size_t T = data_.units[u].counterfactual.length();
    const fs::path base = dir / "ensembles";
    ensembles_.unit_ids.push_back(id);
    ensembles_.counterfactual.push_back(read_ensemble_csv(base / (id + "_cf.csv"), T));
    ensembles_.unguided.push_back(read_ensemble_csv(base / (id + "_cf_unguided.csv"), T));
    ensembles_.factual.push_back(read_ensemble_csv(base / (id + "_factual.csv"), T));
  }
}

void write_ensemble_csv(const fs::path& path, const Matrix& samples, const std::vector<double>& t) {
  if (static_cast<std::size_t>(samples.cols()) != t.size()) throw ContractError("ensemble CSV: time grid mismatch");
  std::ostringstream os;
  os << "sample_id,t,y\n";
  for (Eigen::Index r = 0; r < samples.rows(); ++r) {
    for (Eigen::Index c = 0; c < samples.cols(); ++c) {
      os << r << ',' << format_double(t[static_cast<std::size_t>(c)]) << ',' << format_double(samples(r, c)) << '\n';
    }
  }
  write_text(path, os.str());
}

Matrix read_ensemble_csv(const fs::path& path, std::size_t horizon) {
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  if (line != "sample_id,t,y") throw ContractError(path.string() + ": unexpected header");
  std::vector<double> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto last = line.rfind(',');
    if (last == std::string::npos) throw ContractError(path.string() + ": malformed row");
    values.push_back(parse_double(line.substr(last + 1)));
  }
  if (horizon == 0 || values.size() % horizon != 0) throw ContractError(path.string() + ": ragged ensemble");
  const auto n = static_cast<Eigen::Index>(values.size() / horizon);
  Matrix m(n, static_cast<Eigen::Index>(horizon));
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = values[static_cast<std::size_t>(r * m.cols() + c)];
  }
  return m;
}

std::string git_blob_sha1(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + std::string(1, '\0') + content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw ContractError("SHA-1 digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

void write_run_metadata(const ExperimentConfig& cfg, const fs::path& dir) {
  const std::string snapshot = config_snapshot(cfg);
  write_text(dir / "config.yaml", snapshot);
  write_text(dir / "seed", std::to_string(cfg.seed) + "\n");
  std::vector<std::pair<std::string, std::string>> inputs{{"config.yaml", git_blob_sha1(snapshot)}};
  auto add_file = [&](const fs::path& p) { inputs.emplace_back(p.string(), git_blob_sha1(read_text(p))); };
  if (!cfg.dataset.path.empty()) {
    for (const char* f : {"factual.csv", "counterfactual.csv", "manifest.json"}) add_file(fs::path(cfg.dataset.path) / f);
  }
  if (!cfg.dataset.census.empty()) add_file(cfg.dataset.census);
  if (!cfg.case_study.regions.empty()) add_file(cfg.case_study.regions);
  std::ostringstream os;
  for (const auto& [name, sha] : inputs) os << sha << "  " << name << '\n';
  const std::string listing = os.str();
  write_text(dir / "inputs.sha1", listing + git_blob_sha1(listing) + "  (combined)\n");
}

void write_report(const ExperimentReport& report, const ExperimentConfig& cfg, const fs::path& dir) {
  nlohmann::ordered_json j;
  j["dataset"] = cfg.dataset.kind;
  j["seed"] = cfg.seed;
  j["config_sha1"] = git_blob_sha1(config_snapshot(cfg));
  j["guidance_enabled"] = cfg.guidance_enabled;
  const nlohmann::ordered_json body = report.to_json();
  for (const auto& [k, v] : body.items()) j[k] = v;
  write_text(dir / "report.json", j.dump(2) + "\n");
  std::ostringstream os;
  os << "variant," << MetricReport::csv_header() << '\n';
  os << "guided," << report.guided.csv_row() << '\n';
  os << "unguided," << report.unguided.csv_row() << '\n';
  write_text(dir / "report.csv", os.str());
}

void run_stage(const std::string& name, const fs::path& dir, const std::function<void()>& body) {
  fs::create_directories(dir);
  std::ofstream log(dir / "run.log", std::ios::binary | std::ios::app);
  log << "stage " << name << " start\n" << std::flush;
  try {
    body();
  } catch (const std::exception& e) {
    log << "stage " << name << " failed: " << e.what() << '\n' << std::flush;
    throw StageError(name, e.what());
  }
  log << "stage " << name << " done\n" << std::flush;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  const fs::path dir = config.out_dir;
  fs::create_directories(dir);
  std::ofstream(dir / "run.log", std::ios::binary | std::ios::trunc);
  Pipeline p(config);
  auto stage = [&](const std::string& name, const std::function<void()>& body) { run_stage(name, dir, body); };
  stage("metadata", [&] { write_run_metadata(config, dir); });
  stage("datagen", [&] {
    p.load_or_generate_data();
    p.save_data(dir);
  });
  stage("train-hybrid", [&] {
    p.train_hybrid();
    p.save_hybrid(dir);
  });
  stage("train-diff", [&] {
    p.train_diffusion();
    p.save_diffusion(dir);
  });
  stage("select-eta", [&] {
    p.select_eta();
    p.save_selection(dir);
  });
  stage("sample", [&] {
    p.sample();
    p.save_ensembles(dir);
  });
  ExperimentReport report;
  stage("evaluate", [&] {
    report = p.evaluate();
    write_report(report, config, dir);
  });
  return report;
}

}  // namespace odeguide
