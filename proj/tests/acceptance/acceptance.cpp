// Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero if any fails.
// Usage: acceptance [criterion numbers...]   (all twelve by default)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "odeguide/case_study.hpp"
#include "odeguide/diffusion.hpp"
#include "odeguide/experiment.hpp"
#include "odeguide/guidance.hpp"
#include "odeguide/metrics.hpp"
#include "odeguide/ode_core.hpp"
#include "odeguide/propensity.hpp"

using namespace odeguide;
using ad::Matrix;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// 1. RK4 terminal error on y' = -y over [0, 1] shrinks by a factor in [12, 20] when dt halves.
Outcome solver_order() {
  const RhsFn f = [](double, const StateVector& y) { return StateVector{-y[0]}; };
  auto err = [&](double dt, std::size_t steps) {
    return std::abs(integrate(f, {1.0}, TimeGrid{0.0, dt, steps}).states.back()[0] - std::exp(-1.0));
  };
  const double ratio = err(0.1, 10) / err(0.05, 20);
  return {ratio >= 12.0 && ratio <= 20.0, fmt("error ratio %.4f", ratio)};
}

// 2. Population conservation for SEIRM and SEIR-HD over 52 weeks.
Outcome conservation() {
  double worst = 0.0;
  auto check = [&](const ExpertOdeSpec& spec, double N) {
    const auto tr = simulate_expert(spec, TimeGrid::spanning(0.0, 52.0, 0.1));
    for (const auto& s : tr.states) {
      const double sum = std::accumulate(s.begin(), s.end(), 0.0);
      worst = std::max(worst, std::abs(sum - N) / N);
    }
  };
  ExpertOdeSpec seirm;
  seirm.model.family = ExpertFamily::Seirm;
  seirm.model.seirm.N = 1000.0;
  seirm.initial = {990.0, 5.0, 4.0, 1.0, 0.0};
  seirm.treatment = TreatmentSchedule::policy(15.0);
  check(seirm, 1000.0);
  for (double N : {5.0e4, 8.3e6}) {
    ExpertOdeSpec hd;
    hd.model.family = ExpertFamily::Seirhd;
    hd.model.seirhd.N = N;
    hd.initial = covid_initial_state(N);
    hd.treatment = TreatmentSchedule::policy(40.0);
    check(hd, N);
  }
  return {worst <= 1e-9, fmt("max relative drift %.3e", worst)};
}

// 3. grad_check on the hybrid loss, the diffusion loss, loss_cf and loss_f.
Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> errs;

  DexConfig dc;
  dc.days = 6;
  const Dataset ds = gen_dex_dataset(2, 9, dc);
  HybridConfig hc;
  hc.expert.family = ExpertFamily::Pkpd;
  hc.expert.pkpd.full_model = false;
  hc.expert_scale = 0.1;
  hc.dt = 0.1;
  hc.hidden = 12;
  hc.latent_x = 4;
  hc.latent_y = 4;
  HybridCpModel hm = HybridCpModel::create(hc, 1, Standardizer::fit(ds), 10);
  const HybridBatch batch = make_batch(hm, ds, {0, 1});
  errs.push_back(ad::grad_check(hybrid_loss_program(hm, batch), hm.params, {}, {1e-5, 400, 3}));

  const DiffusionSchedule s = make_schedule(50, 1e-4, 0.1);
  DenoiserConfig dcfg;
  dcfg.hidden = 10;
  dcfg.activation = ad::Activation::Tanh;
  const DenoiserModel dm = DenoiserModel::create(dcfg, 5, 3, 50, 4);
  Rng rng(8);
  DiffusionData d;
  d.y0 = random_matrix(4, 5, rng);
  d.mask = Matrix::Ones(4, 5);
  d.mask(0, 0) = 0.0;
  d.cond = random_matrix(4, 3, rng);
  d.weights = {0.5, 1.0, 1.5, 8.0};
  const DiffusionDraw draw = draw_diffusion_batch(d, s, {0, 1, 2, 3}, rng);
  const ad::Program fd = [&](ad::Tape&, const ad::BoundParams& bp, std::span<const ad::Var>) {
    return diffusion_loss(dm, bp, s, d, draw.rows, draw.taus, draw.noise);
  };
  errs.push_back(ad::grad_check(fd, dm.params, {}, {1e-5, 300, 1}));

  const std::size_t T = 9;
  std::vector<double> y0(T), fcf(T), ff(T);
  for (std::size_t t = 0; t < T; ++t) {
    y0[t] = standard_normal(rng);
    fcf[t] = standard_normal(rng);
    ff[t] = standard_normal(rng);
  }
  ExpertGuidanceSignals sig;
  sig.f_cf = fcf;
  sig.f_f = ff;
  GuidanceConfig gc;
  gc.direction_ratio = 0.4;
  const FactualWindow w = FactualWindow::before(5);
  ad::ParamSet p;
  p.add("y0_hat", random_matrix(3, static_cast<Eigen::Index>(T), rng));
  const ad::Program lcf = [&](ad::Tape&, const ad::BoundParams& bp, std::span<const ad::Var>) {
    return loss_cf(bp[0], y0, sig, gc);
  };
  const ad::Program lf = [&](ad::Tape&, const ad::BoundParams& bp, std::span<const ad::Var>) {
    return loss_f(bp[0], y0, w);
  };
  errs.push_back(ad::grad_check(lcf, p, {}, {1e-5, 0, 0}));
  errs.push_back(ad::grad_check(lf, p, {}, {1e-5, 0, 0}));

  const double worst = *std::max_element(errs.begin(), errs.end());
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && secs < 30.0,
          fmt("relative errors hybrid %.2e diffusion %.2e cf %.2e f %.2e; %.1f s", errs[0], errs[1], errs[2], errs[3],
              secs)};
}

// 4. reverse_step at tau = 1 returns y0_hat exactly; an oracle denoiser reproduces y0 exactly.
Outcome diffusion_identities() {
  const DiffusionSchedule s = make_schedule(50, 1e-4, 0.1);
  Rng rng(4);
  bool ok = true;
  for (auto mode : {NoiseScale::Variance, NoiseScale::PosteriorStd, NoiseScale::BetaStd}) {
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix yt = random_matrix(3, 7, rng), y0 = random_matrix(3, 7, rng), z = random_matrix(3, 7, rng);
      ok = ok && bit_equal(reverse_step(yt, 1, y0, s, z, mode), y0);
    }
    const Matrix target = random_matrix(1, 7, rng);
    const Denoiser oracle = [&](const Matrix& y, int) -> Matrix { return target.replicate(y.rows(), 1); };
    const SampleEnsemble e = sample(oracle, 7, s, nullptr, 25, 11, mode);
    for (Eigen::Index r = 0; r < e.samples.rows(); ++r) ok = ok && bit_equal(e.samples.row(r), target);
  }
  return {ok, ok ? "exact in all three noise scales" : "mismatch"};
}

// 5. 1-D Gaussian: ensemble mean and std within 3 standard errors, 90% PI coverage within 0.10.
Outcome gaussian_sanity() {
  const auto t0 = std::chrono::steady_clock::now();
  const double mu = 2.0, sigma = 0.5;
  const int n = 500, draws = 2000;
  Rng rng(7);
  Matrix y(n, 1);
  for (int i = 0; i < n; ++i) y(i, 0) = mu + sigma * standard_normal(rng);
  const double m = y.mean();
  const double sd = std::sqrt((y.array() - m).square().sum() / (n - 1));
  DiffusionData d;
  d.y0 = ((y.array() - m) / sd).matrix();
  d.mask = Matrix::Ones(n, 1);
  d.cond = Matrix(n, 0);
  d.weights.assign(n, 1.0);
  const DiffusionSchedule s = make_schedule(50, 1e-4, 0.1);
  DenoiserModel model = DenoiserModel::create({}, 1, 0, 50, 11);
  DiffusionTrainConfig tc;
  tc.epochs = 400;
  tc.seed = 3;
  train_diffusion(model, s, d, tc);
  const SampleEnsemble e = sample(conditioned(model, Matrix(1, 0)), 1, s, nullptr, draws, 99);
  std::vector<double> v(static_cast<std::size_t>(draws));
  for (int i = 0; i < draws; ++i) v[static_cast<std::size_t>(i)] = e.samples(i, 0) * sd + m;
  const double em = std::accumulate(v.begin(), v.end(), 0.0) / draws;
  double ss = 0.0;
  for (double x : v) ss += (x - em) * (x - em);
  const double es = std::sqrt(ss / (draws - 1));
  const double se_mean = sigma / std::sqrt(static_cast<double>(draws));
  const double se_sd = sigma / std::sqrt(2.0 * draws);
  const double lo = quantile(v, 0.05), hi = quantile(v, 0.95);
  Rng held(123);
  int inside = 0;
  for (int i = 0; i < draws; ++i) {
    const double q = mu + sigma * standard_normal(held);
    inside += (q >= lo && q <= hi) ? 1 : 0;
  }
  const double cov = static_cast<double>(inside) / draws;
  const double secs = seconds_since(t0);
  const bool ok = std::abs(em - mu) <= 3 * se_mean && std::abs(es - sigma) <= 3 * se_sd &&
                  std::abs(cov - 0.9) <= 0.10 && secs < 300.0;
  return {ok, fmt("mean %.4f (|z| %.2f) std %.4f (|z| %.2f) coverage90 %.3f; %.1f s", em,
                  std::abs(em - mu) / se_mean, es, std::abs(es - sigma) / se_sd, cov, secs)};
}

// 6. wasserstein1 vs an assignment oracle, dtw vs exhaustive path enumeration.
Outcome metric_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(21);
  std::uniform_int_distribution<int> small(-40, 40);
  int w_ok = 0, d_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial) % 8;
    // Integer samples keep every partial sum exact, so equality is exact too.
    std::vector<double> a(n), b(n);
    for (auto& x : a) x = small(rng);
    for (auto& x : b) x = small(rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) sum += std::abs(a[i] - b[perm[i]]);
      best = std::min(best, sum);
    } while (std::next_permutation(perm.begin(), perm.end()));
    w_ok += wasserstein1(a, b) == best / static_cast<double>(n) ? 1 : 0;
  }
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(1 + static_cast<std::size_t>(trial) % 6), b(1 + static_cast<std::size_t>(trial / 6) % 6);
    for (auto& x : a) x = standard_normal(rng);
    for (auto& x : b) x = standard_normal(rng);
    double best = std::numeric_limits<double>::infinity();
    std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double acc) {
      acc += std::abs(a[i] - b[j]);
      if (i + 1 == a.size() && j + 1 == b.size()) {
        best = std::min(best, acc);
        return;
      }
      if (i + 1 < a.size()) walk(i + 1, j, acc);
      if (j + 1 < b.size()) walk(i, j + 1, acc);
      if (i + 1 < a.size() && j + 1 < b.size()) walk(i + 1, j + 1, acc);
    };
    walk(0, 0, 0.0);
    d_ok += dtw(a, b).distance == best ? 1 : 0;
  }
  const double secs = seconds_since(t0);
  return {w_ok == 100 && d_ok == 100 && secs < 30.0,
          fmt("wasserstein1 %d/100, dtw %d/100 exact; %.2f s", w_ok, d_ok, secs)};
}

// 7. Uniform propensity 0.5 over 3 steps gives weight 8; the loss is linear in the weights.
Outcome iptw_exactness() {
  const double w8 = propensity_weight({0.5, 0.5, 0.5});
  PropensityModel pm;
  pm.weights.assign(2, 0.0);
  pm.x_mean = {0.0};
  pm.x_sd = {1.0};
  pm.history = 3;
  const Dataset ds = gen_dex_dataset(3, 2, DexConfig{});
  bool unit_ok = true;
  for (const auto& u : ds.units) unit_ok = unit_ok && propensity_weight(pm, u) == 8.0;

  const DiffusionSchedule s = make_schedule(50, 1e-4, 0.1);
  const DenoiserModel dm = DenoiserModel::create({}, 6, 2, 50, 5);
  Rng rng(12);
  DiffusionData d;
  d.y0 = random_matrix(5, 6, rng);
  d.mask = Matrix::Ones(5, 6);
  d.cond = random_matrix(5, 2, rng);
  d.weights = {1.0, 2.0, 0.5, 8.0, 3.0};
  const DiffusionDraw draw = draw_diffusion_batch(d, s, {0, 1, 2, 3, 4}, rng);
  auto loss = [&](const std::vector<double>& w) {
    DiffusionData dd = d;
    dd.weights = w;
    ad::Tape tape(false);
    const ad::BoundParams bp = ad::bind(tape, dm.params, false);
    return diffusion_loss(dm, bp, s, dd, draw.rows, draw.taus, draw.noise).value()(0, 0);
  };
  const double base = loss(d.weights);
  std::vector<double> scaled = d.weights, other = {0.3, 0.0, 4.0, 1.0, 2.5}, sum(5);
  for (auto& w : scaled) w *= 2.75;
  for (std::size_t i = 0; i < 5; ++i) sum[i] = d.weights[i] + other[i];
  const double dev_scale = std::abs(loss(scaled) - 2.75 * base) / std::abs(2.75 * base);
  const double dev_add = std::abs(loss(sum) - (base + loss(other))) / std::abs(loss(sum));
  const bool ok = w8 == 8.0 && unit_ok && dev_scale <= 1e-12 && dev_add <= 1e-12;
  return {ok, fmt("weight %.17g, model weights exact %s, linearity deviation %.2e / %.2e", w8, unit_ok ? "yes" : "no",
                  dev_scale, dev_add)};
}

ExperimentConfig small_dex(std::uint64_t seed) {
  ExperimentConfig c = parse_config(
      "dataset: {n_units: 12}\n"
      "hybrid: {epochs: 5, batch_size: 4}\n"
      "diffusion: {epochs: 300}\n"
      "guidance: {eta_candidates: [0, 100, 1000], selection_samples: 5}\n"
      "evaluation: {n_samples: 10}\n");
  c.seed = seed;
  return c;
}

// 8. eta = nu = 0 sampling is bit-identical to unguided sampling at the same seed.
Outcome null_guidance() {
  Pipeline p(small_dex(8));
  p.load_or_generate_data();
  p.train_hybrid();
  p.train_diffusion();
  GuidanceConfig off = p.config().guidance;
  off.eta = 0.0;
  off.nu = 0.0;
  std::size_t same = 0;
  for (std::size_t u : p.test_units()) {
    const UnitGuidance ctx = p.unit_guidance(u);
    same += bit_equal(p.sample_counterfactual(u, ctx, &off, 20), p.sample_counterfactual(u, ctx, nullptr, 20)) ? 1 : 0;
  }
  return {same == p.test_units().size(), fmt("%zu/%zu units bit-identical", same, p.test_units().size())};
}

// 9. Dex preset over seeds 1..5: guided Pearson beats unguided by a median >= 0.01, W1 within 5%.
Outcome guidance_efficacy() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> dp, ratio;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentConfig c = ExperimentConfig::preset("dex");
    c.seed = seed;
    Pipeline p(c);
    p.load_or_generate_data();
    p.train_hybrid();
    p.train_diffusion();
    p.select_eta();
    p.sample();
    const ExperimentReport r = p.evaluate();
    dp.push_back(r.guided.pearson_corr - r.unguided.pearson_corr);
    ratio.push_back(r.guided.wasserstein1 / r.unguided.wasserstein1);
    per_seed += fmt(" [seed %llu eta* %g pearson %.3f/%.3f w1 %.3f/%.3f]", static_cast<unsigned long long>(seed),
                    r.eta_star, r.guided.pearson_corr, r.unguided.pearson_corr, r.guided.wasserstein1,
                    r.unguided.wasserstein1);
  }
  const double secs = seconds_since(t0);
  const double med_dp = median(dp), med_ratio = median(ratio);
  const bool ok = med_dp >= 0.01 && med_ratio <= 1.05 && secs < 1200.0;
  return {ok, fmt("median pearson gain %+.4f, median w1 ratio %.3f; %.0f s;", med_dp, med_ratio, secs) + per_seed};
}

// 10. A sweep where exactly one eta yields correlation 1 selects it every time.
Outcome planted_optimum() {
  const auto t0 = std::chrono::steady_clock::now();
  const DiffusionSchedule s = make_schedule(50, 1e-4, 0.1);
  Rng rng(31);
  int hits = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 8;
    std::vector<double> y_f(T), f_cf(T);
    for (std::size_t t = 0; t < T; ++t) {
      y_f[t] = standard_normal(rng);
      f_cf[t] = standard_normal(rng);
    }
    ExpertGuidanceSignals sig;
    sig.f_f = y_f;
    sig.f_cf = f_cf;
    const Matrix c = random_matrix(1, static_cast<Eigen::Index>(T), rng);
    const Denoiser constant = [&](const Matrix& y, int) -> Matrix { return c.replicate(y.rows(), 1); };
    GuidanceConfig g;
    g.use_direction = false;
    g.nu = 0.0;
    // With a constant prediction c, the last step returns c - 2*kappa*eta*(c - f_cf); kappa*eta = 0.5 lands on f_cf.
    const double planted = 0.5 / g.kappa;
    std::vector<double> cands = {planted};
    while (cands.size() < 9) {
      const double e = std::round(uniform01(rng) * 2.0 * planted);
      if (e != planted && std::find(cands.begin(), cands.end(), e) == cands.end()) cands.push_back(e);
    }
    std::shuffle(cands.begin(), cands.end(), rng);
    const EtaSelection sel = select_eta(cands, [&](double eta) {
      GuidanceConfig ge = g;
      ge.eta = eta;
      const Matrix out =
          sample(constant, T, s, make_guidance_hook(y_f, sig, FactualWindow::before(0), ge), 4, 5).samples;
      const Matrix mean = out.colwise().mean();
      return selection_correlation({mean.data(), mean.data() + mean.size()}, y_f, sig, CorrelationTarget::Expert);
    });
    hits += sel.eta_star == planted ? 1 : 0;
  }
  const double secs = seconds_since(t0);
  return {hits == 100 && secs < 60.0, fmt("%d/100 trials; %.2f s", hits, secs)};
}

// 11. Case-study protocol on a planted unit shift.
Outcome case_study_protocol() {
  const auto t0 = std::chrono::steady_clock::now();
  const RegionPanel panel = planted_shift_panel(5, 6, 52, 25, 1.0, 17);
  ExperimentConfig c = ExperimentConfig::preset("covid");
  c.case_study.fit_model = false;
  std::string names;
  for (const auto& r : panel.regions) names += (names.empty() ? "" : ",") + r.name;
  c.case_study.test_regions = names;
  const CaseStudyResult res = run_case_study(c, panel);
  double worst = 0.0;
  std::size_t skipped_ok = 0, skipped = 0, mixed = 0;
  for (const auto& row : res.rows) {
    const bool uniform = row.region.rfind("c4_", 0) == 0;
    if (row.skipped) ++skipped;
    if (uniform) {
      skipped_ok += row.skipped ? 1 : 0;
    } else if (!row.skipped) {
      ++mixed;
      worst = std::max(worst, std::abs(row.proxy_wd - 1.0));
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = mixed == 24 && skipped_ok == 6 && skipped == 6 && worst <= 1e-9 && secs < 60.0;
  return {ok, fmt("%zu regions with proxy WD max |WD-1| = %.2e; %zu/6 uniform-neighbor regions skipped; %.2f s", mixed,
                  worst, skipped_ok, secs)};
}

// 12. `run` twice from the same config snapshot gives byte-identical reports and ensembles.
Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "odeguide_acceptance_run";
  fs::remove_all(root);
  ExperimentConfig c = ExperimentConfig::preset("dex");
  c.seed = 2024;
  c.dataset.n_units = 20;
  c.hybrid_train.epochs = 10;
  c.diffusion_train.epochs = 500;
  c.n_samples = 30;
  c.out_dir = (root / "run").string();
  run_experiment(c);
  fs::rename(root / "run", root / "first");
  run_experiment(parse_config(slurp(root / "first" / "config.yaml")));
  std::size_t files = 0, same = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "first")) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), root / "first");
    const std::string top = rel.begin()->string();
    if (top != "report.json" && top != "report.csv" && top != "ensembles") continue;
    ++files;
    same += slurp(e.path()) == slurp(root / "run" / rel) ? 1 : 0;
  }
  fs::remove_all(root);
  return {files > 2 && same == files, fmt("%zu/%zu report and ensemble files identical", same, files)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"solver order", solver_order},
      {"conservation", conservation},
      {"gradient suite", gradient_suite},
      {"diffusion identities", diffusion_identities},
      {"distribution learning", gaussian_sanity},
      {"metric oracles", metric_oracles},
      {"IPTW exactness", iptw_exactness},
      {"guidance null test", null_guidance},
      {"guidance efficacy", guidance_efficacy},
      {"planted optimum", planted_optimum},
      {"case-study protocol", case_study_protocol},
      {"end-to-end determinism", determinism},
  };
  std::set<std::size_t> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::stoul(argv[i]));
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (!wanted.empty() && !wanted.count(k + 1)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", k + 1, criteria[k].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
