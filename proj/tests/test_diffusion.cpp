#include <doctest.h>

#include <cmath>

#include "odeguide/diffusion.hpp"
#include "odeguide/errors.hpp"

using namespace odeguide;
using ad::Matrix;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

void zero_params(ad::ParamSet& p) {
  for (std::size_t i = 0; i < p.size(); ++i) p.mutable_values(i).setZero();
}

DiffusionData toy_data(std::size_t n, std::size_t T, std::size_t C, std::uint64_t seed) {
  DiffusionData d;
  d.y0 = random_matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(T), seed);
  d.mask = Matrix::Ones(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(T));
  d.mask(0, 0) = 0.0;
  d.cond = random_matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(C), seed + 1);
  for (std::size_t i = 0; i < n; ++i) d.weights.push_back(0.5 + 0.25 * static_cast<double>(i));
  return d;
}

}  // namespace

TEST_CASE("schedule construction") {
  const DiffusionSchedule one = make_schedule(1, 0.3, 0.3);
  CHECK(one.alpha_bar[1] == doctest::Approx(0.7));
  CHECK(one.alpha_bar[0] == 1.0);

  const DiffusionSchedule s = make_schedule(50, 1e-4, 0.1);
  CHECK(s.beta[1] == doctest::Approx(1e-4));
  CHECK(s.beta[50] == doctest::Approx(0.1));
  for (int t = 1; t <= 50; ++t) {
    CHECK(s.alpha[t] == doctest::Approx(1.0 - s.beta[t]));
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  }
  CHECK(s.alpha_bar[50] < s.alpha_bar[1]);

  // beta = (0.1, 0.2): tau=1 gives 0.9 * 0.1 / 0.01 = 9, tau=2 gives 0.8 * 0.28 / 0.04 = 5.6.
  const DiffusionSchedule two = make_schedule(2, 0.1, 0.2, 2.0);
  CHECK(two.loss_weights[1] == doctest::Approx(18.0));
  CHECK(two.loss_weights[2] == doctest::Approx(11.2));

  CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), ContractError);
  CHECK_THROWS_AS(make_schedule(5, 0.2, 0.1), ContractError);
  CHECK_THROWS_AS(make_schedule(5, 0.0, 0.1), ContractError);
  CHECK_THROWS_AS(make_schedule(5, 0.1, 1.0), ContractError);
}

TEST_CASE("forward_sample") {
  const DiffusionSchedule s = make_schedule(10, 0.01, 0.2);
  const Matrix y0 = random_matrix(3, 4, 1);
  const Matrix eps = random_matrix(3, 4, 2);
  const Matrix zero = Matrix::Zero(3, 4);
  CHECK((forward_sample(y0, 4, s, zero) - std::sqrt(s.alpha_bar[4]) * y0).norm() == 0.0);
  CHECK((forward_sample(zero, 7, s, eps) - std::sqrt(1.0 - s.alpha_bar[7]) * eps).norm() == 0.0);
  const DiffusionSchedule tiny = make_schedule(3, 1e-12, 1e-12);
  CHECK((forward_sample(y0, 3, tiny, eps) - y0).cwiseAbs().maxCoeff() < 1e-5);
  CHECK_THROWS_AS(forward_sample(y0, 0, s, eps), RangeError);
  CHECK_THROWS_AS(forward_sample(y0, 11, s, eps), RangeError);
  CHECK_THROWS_AS(forward_sample(y0, 1, s, random_matrix(2, 4, 3)), ContractError);
}

TEST_CASE("reverse_step at tau=1 returns the prediction exactly") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const DiffusionSchedule s = make_schedule(1 + static_cast<int>(seed % 7), 0.001 + 0.01 * uniform01(rng), 0.3);
    const Matrix y_tau = random_matrix(2, 5, seed + 100);
    const Matrix y0_hat = random_matrix(2, 5, seed + 200);
    const Matrix z = random_matrix(2, 5, seed + 300);
    for (NoiseScale mode : {NoiseScale::Variance, NoiseScale::PosteriorStd, NoiseScale::BetaStd}) {
      CHECK(reverse_step(y_tau, 1, y0_hat, s, z, mode) == y0_hat);
    }
  }
}

TEST_CASE("reverse_step hand values on a two-step schedule") {
  const DiffusionSchedule s = make_schedule(2, 0.1, 0.2);
  // abar_1 = 0.9, abar_2 = 0.72.
  const double c0 = std::sqrt(0.9) * 0.2 / 0.28;
  const double ct = std::sqrt(0.8) * 0.1 / 0.28;
  const Matrix v = Matrix::Constant(1, 3, 3.0);
  const Matrix out = reverse_step(v, 2, v, s, Matrix::Zero(1, 3));
  for (Eigen::Index i = 0; i < 3; ++i) CHECK(out(0, i) == doctest::Approx(3.0 * (c0 + ct)).epsilon(1e-14));

  const double tilde = 0.1 / 0.28 * 0.2;
  CHECK(reverse_noise_coefficient(2, s, NoiseScale::Variance) == doctest::Approx(tilde));
  CHECK(reverse_noise_coefficient(2, s, NoiseScale::PosteriorStd) == doctest::Approx(std::sqrt(tilde)));
  CHECK(reverse_noise_coefficient(2, s, NoiseScale::BetaStd) == doctest::Approx(std::sqrt(0.2)));
  CHECK(reverse_noise_coefficient(1, s, NoiseScale::BetaStd) == 0.0);

  const Matrix z = Matrix::Constant(1, 3, 1.0);
  const Matrix noisy = reverse_step(v, 2, v, s, z, NoiseScale::BetaStd);
  CHECK(noisy(0, 0) - out(0, 0) == doctest::Approx(std::sqrt(0.2)));
  CHECK_THROWS_AS(reverse_step(v, 3, v, s, z), RangeError);
}

TEST_CASE("noise scale names round-trip") {
  for (NoiseScale m : {NoiseScale::Variance, NoiseScale::PosteriorStd, NoiseScale::BetaStd}) {
    CHECK(parse_noise_scale(noise_scale_name(m)) == m);
  }
  CHECK_THROWS_AS(parse_noise_scale("sigma"), ConfigError);
}

TEST_CASE("timestep embedding") {
  const std::vector<double> e = timestep_embedding(10, 50);
  REQUIRE(e.size() == 16);
  CHECK(e[0] == doctest::Approx(std::sin(M_PI * 0.2)));
  CHECK(e[1] == doctest::Approx(std::cos(M_PI * 0.2)));
  CHECK(timestep_embedding(11, 50) != e);
  for (std::size_t k = 0; k < e.size(); k += 2) CHECK(e[k] * e[k] + e[k + 1] * e[k + 1] == doctest::Approx(1.0));
}

TEST_CASE("denoiser evaluation") {
  DenoiserConfig cfg;
  cfg.hidden = 16;
  DenoiserModel m = DenoiserModel::create(cfg, 4, 3, 20, 7);
  CHECK(m.input_width() == 4 + 16 + 3);
  const Matrix y = random_matrix(5, 4, 1);
  const Matrix cond = random_matrix(1, 3, 2);
  const Matrix a = m.predict(y, 6, cond);
  CHECK(a.rows() == 5);
  CHECK(a.cols() == 4);
  CHECK(m.predict(y, 6, cond) == a);

  Matrix cond2 = cond;
  cond2(0, 0) += 0.5;
  CHECK((m.predict(y, 6, cond2) - a).norm() > 0.0);
  CHECK((m.predict(y, 7, cond) - a).norm() > 0.0);

  // Broadcast and per-row conditions agree.
  CHECK((m.predict(y, 6, cond.replicate(5, 1)) - a).norm() == 0.0);

  // Tape and plain evaluation agree.
  ad::Tape tape;
  const ad::BoundParams bp = ad::bind(tape, m.params);
  const ad::Var out = m.forward(bp, tape.constant(y), std::vector<int>(5, 6), cond);
  CHECK((out.value() - a).cwiseAbs().maxCoeff() < 1e-14);

  DenoiserModel z = DenoiserModel::create(cfg, 4, 3, 20, 8);
  zero_params(z.params);
  z.params.mutable_values(z.net.biases.back()) << 1.0, -2.0, 0.5, 3.0;
  const Matrix b = z.predict(random_matrix(2, 4, 9), 3, random_matrix(2, 3, 10));
  for (Eigen::Index r = 0; r < 2; ++r) {
    CHECK(b(r, 0) == 1.0);
    CHECK(b(r, 1) == -2.0);
    CHECK(b(r, 3) == 3.0);
  }

  CHECK_THROWS_AS(m.predict(random_matrix(2, 5, 1), 3, cond), ContractError);
  CHECK_THROWS_AS(m.predict(y, 3, random_matrix(1, 2, 1)), ContractError);
  CHECK_THROWS_AS(m.predict(y, 3, random_matrix(2, 3, 1)), ContractError);
  CHECK_THROWS_AS(m.predict(y, 21, cond), RangeError);
}

TEST_CASE("oracle denoiser sampling returns the target exactly") {
  const DiffusionSchedule s = make_schedule(50, 1e-4, 0.1);
  const Matrix target = random_matrix(1, 6, 4);
  const Denoiser oracle = [&](const Matrix& y, int) { return Matrix(target.replicate(y.rows(), 1)); };
  for (NoiseScale mode : {NoiseScale::Variance, NoiseScale::PosteriorStd, NoiseScale::BetaStd}) {
    const SampleEnsemble e = sample(oracle, 6, s, nullptr, 8, 11, mode);
    for (Eigen::Index r = 0; r < 8; ++r) CHECK(e.samples.row(r) == target);
  }
}

TEST_CASE("sampling determinism and per-sample seeding") {
  const DiffusionSchedule s = make_schedule(20, 1e-3, 0.2);
  DenoiserConfig cfg;
  cfg.hidden = 8;
  const DenoiserModel m = DenoiserModel::create(cfg, 3, 2, 20, 1);
  const Denoiser d = conditioned(m, random_matrix(1, 2, 5));
  const SampleEnsemble a = sample(d, 3, s, nullptr, 4, 99);
  const SampleEnsemble b = sample(d, 3, s, nullptr, 4, 99);
  CHECK(a.samples == b.samples);
  CHECK(a.seed == 99);
  const SampleEnsemble one = sample(d, 3, s, nullptr, 1, 99);
  const SampleEnsemble two = sample(d, 3, s, nullptr, 2, 99);
  CHECK(one.samples.row(0) == two.samples.row(0));
  CHECK(two.samples.row(0) == a.samples.row(0));
  CHECK(sample(d, 3, s, nullptr, 4, 100).samples != a.samples);

  const GuidanceHook identity = [](const Matrix& y0_hat, int) { return y0_hat; };
  CHECK(sample(d, 3, s, identity, 4, 99).samples == a.samples);
  CHECK_THROWS_AS(sample(d, 3, s, nullptr, 0, 1), ContractError);
}

TEST_CASE("diffusion loss is linear in the unit weights") {
  const DiffusionSchedule s = make_schedule(10, 1e-3, 0.2);
  DenoiserConfig cfg;
  cfg.hidden = 8;
  const DenoiserModel m = DenoiserModel::create(cfg, 4, 2, 10, 3);
  DiffusionData d = toy_data(6, 4, 2, 5);
  Rng rng(2);
  const DiffusionDraw draw = draw_diffusion_batch(d, s, {0, 1, 2, 3, 4, 5}, rng);
  auto loss = [&](const DiffusionData& data) {
    ad::Tape tape(false);
    const ad::BoundParams bp = ad::bind(tape, m.params, false);
    return diffusion_loss(m, bp, s, data, draw.rows, draw.taus, draw.noise).value()(0, 0);
  };
  const double base = loss(d);
  DiffusionData doubled = d;
  for (double& w : doubled.weights) w *= 2.0;
  CHECK(std::abs(loss(doubled) - 2.0 * base) <= 1e-12 * std::abs(base));

  // Hand evaluation of the same loss.
  double hand = 0.0;
  for (std::size_t r = 0; r < 6; ++r) {
    const int tau = draw.taus[r];
    const Matrix yt = forward_sample(d.y0.row(static_cast<Eigen::Index>(r)), tau, s,
                                     draw.noise.row(static_cast<Eigen::Index>(r)));
    const Matrix pred = m.predict(yt, tau, d.cond.row(static_cast<Eigen::Index>(r)));
    double sq = 0.0;
    for (Eigen::Index t = 0; t < 4; ++t) {
      const double e = pred(0, t) - d.y0(static_cast<Eigen::Index>(r), t);
      sq += d.mask(static_cast<Eigen::Index>(r), t) * e * e;
    }
    hand += d.weights[r] * s.loss_weights[static_cast<std::size_t>(tau)] * sq;
  }
  CHECK(base == doctest::Approx(hand / 6.0).epsilon(1e-12));
}

TEST_CASE("diffusion loss gradient passes grad_check") {
  const DiffusionSchedule s = make_schedule(50, 1e-4, 0.1);
  DenoiserConfig cfg;
  cfg.hidden = 10;
  cfg.activation = ad::Activation::Tanh;
  const DenoiserModel m = DenoiserModel::create(cfg, 5, 3, 50, 4);
  const DiffusionData d = toy_data(4, 5, 3, 8);
  Rng rng(6);
  const DiffusionDraw draw = draw_diffusion_batch(d, s, {0, 1, 2, 3}, rng);
  const ad::Program f = [&](ad::Tape&, const ad::BoundParams& bp, std::span<const ad::Var>) {
    return diffusion_loss(m, bp, s, d, draw.rows, draw.taus, draw.noise);
  };
  CHECK(ad::grad_check(f, m.params, {}, {1e-5, 300, 1}) <= 1e-4);
}

TEST_CASE("training on a constant outcome collapses the samples") {
  const DiffusionSchedule s = make_schedule(20, 1e-3, 0.2);
  DiffusionData d;
  d.y0 = Matrix::Constant(1, 3, 0.7);
  d.mask = Matrix::Ones(1, 3);
  d.cond = Matrix::Zero(1, 1);
  d.weights = {1.0};
  DenoiserConfig cfg;
  cfg.hidden = 16;
  DenoiserModel m = DenoiserModel::create(cfg, 3, 1, 20, 2);
  DiffusionTrainConfig tc;
  tc.epochs = 600;
  tc.batch_size = 1;
  tc.lr = 3e-3;
  const TrainResult r = train_diffusion(m, s, d, tc);
  CHECK(r.final_loss < 0.01 * r.initial_loss);
  CHECK(r.loss_curve.size() == 601);
  const SampleEnsemble e = sample(conditioned(m, d.cond), 3, s, nullptr, 50, 3);
  CHECK((e.samples.array() - 0.7).abs().maxCoeff() < 0.05);
}

TEST_CASE("train_diffusion rejects inconsistent inputs") {
  const DiffusionSchedule s = make_schedule(10, 1e-3, 0.2);
  DenoiserModel m = DenoiserModel::create({}, 4, 2, 10, 1);
  DiffusionData d = toy_data(3, 4, 2, 1);
  d.weights.pop_back();
  CHECK_THROWS_AS(train_diffusion(m, s, d, {}), ContractError);
  DiffusionData e = toy_data(3, 5, 2, 1);
  CHECK_THROWS_AS(train_diffusion(m, s, e, {}), ContractError);
  DiffusionData g = toy_data(3, 4, 2, 1);
  CHECK_THROWS_AS(train_diffusion(m, make_schedule(12, 1e-3, 0.2), g, {}), ContractError);
}
