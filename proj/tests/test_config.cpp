#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "odeguide/config.hpp"
#include "odeguide/errors.hpp"

using namespace odeguide;

TEST_CASE("presets follow the dataset kind") {
  const ExperimentConfig dex = parse_config("");
  CHECK(dex.dataset.kind == "dex");
  CHECK(dex.hybrid.expert.family == ExpertFamily::Pkpd);
  CHECK_FALSE(dex.hybrid.expert.pkpd.full_model);
  CHECK(dex.guidance.eta == 1000.0);
  CHECK(dex.guidance.direction_ratio == 0.2);

  const ExperimentConfig covid = parse_config("dataset:\n  kind: covid\n");
  CHECK(covid.hybrid.expert.family == ExpertFamily::Seirm);
  CHECK(covid.guidance.eta == 2000.0);
  CHECK(covid.guidance.direction_ratio == 1.0);
  CHECK(covid.dataset.n_units == 121);
  CHECK_THROWS_AS(parse_config("dataset: {kind: flu}"), ConfigError);
}

TEST_CASE("nested and dotted keys override defaults") {
  const ExperimentConfig c = parse_config(
      "seed: 42\n"
      "diffusion:\n  T_d: 20\n  noise_scale: posterior_std\n  activation: tanh\n"
      "guidance: {eta_candidates: [0, 5, 7.5], target: difference, use_direction: false}\n"
      "hybrid: {epochs: 3}\n"
      "case_study: {test_regions: 'a,b'}\n");
  CHECK(c.seed == 42);
  CHECK(c.T_d == 20);
  CHECK(c.noise_scale == NoiseScale::PosteriorStd);
  CHECK(c.denoiser.activation == ad::Activation::Tanh);
  CHECK(c.guidance.eta_candidates == std::vector<double>{0.0, 5.0, 7.5});
  CHECK(c.guidance.target == CorrelationTarget::Difference);
  CHECK_FALSE(c.guidance.use_direction);
  CHECK(c.hybrid_train.epochs == 3);
  CHECK(c.case_study.test_regions == "a,b");
}

TEST_CASE("bad keys and values are rejected") {
  CHECK_THROWS_AS(parse_config("sed: 1"), ConfigError);
  CHECK_THROWS_AS(parse_config("diffusion: {T_d: 10, depth: 3}"), ConfigError);
  CHECK_THROWS_AS(parse_config("diffusion: {T_d: ten}"), ConfigError);
  CHECK_THROWS_AS(parse_config("diffusion: {noise_scale: loud}"), ConfigError);
  CHECK_THROWS_AS(parse_config("diffusion: {activation: swish}"), ConfigError);
  CHECK_THROWS_AS(parse_config("guidance: {eta_candidates: 5}"), ConfigError);
  CHECK_THROWS_AS(parse_config("guidance: {eta: [1, 2]}"), ConfigError);
  CHECK_THROWS_AS(parse_config("guidance: {eta: -1}"), ConfigError);
  CHECK_THROWS_AS(parse_config("guidance: {target: model}"), ConfigError);
  CHECK_THROWS_AS(parse_config("split: {test_fraction: 1.0}"), ConfigError);
  CHECK_THROWS_AS(parse_config("diffusion: {beta_start: 0.2, beta_end: 0.1}"), ConfigError);
  CHECK_THROWS_AS(parse_config("evaluation: {n_samples: 1}"), ConfigError);
  CHECK_THROWS_AS(parse_config("case_study: {train_weeks: 60}"), ConfigError);
  CHECK_THROWS_AS(parse_config("dataset: {path: /nonexistent/odeguide}"), ConfigError);
  CHECK_THROWS_AS(parse_config("- a\n- b\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("seed: [unclosed"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/odeguide.yaml"), ConfigError);
}

TEST_CASE("snapshot round trip is exact") {
  ExperimentConfig c = ExperimentConfig::preset("covid");
  c.seed = 18446744073709551615ULL;
  c.out_dir = "runs/with space";
  c.beta_start = 0.1 + 0.2;
  c.beta_end = 0.5;
  c.guidance.kappa = 1.0 / 3.0;
  c.guidance.eta_candidates = {0.0, 1e-7, 12345.678};
  c.hybrid.expert_scale = 2.5e-300;
  c.noise_scale = NoiseScale::Variance;
  c.guidance.target = CorrelationTarget::Difference;
  c.case_study.test_regions = "random:3";

  const std::string snap = config_snapshot(c);
  const ExperimentConfig back = parse_config(snap);
  CHECK(config_snapshot(back) == snap);
  CHECK(back.seed == c.seed);
  CHECK(back.out_dir == c.out_dir);
  CHECK(back.beta_start == c.beta_start);
  CHECK(back.guidance.kappa == c.guidance.kappa);
  CHECK(back.guidance.eta_candidates == c.guidance.eta_candidates);
  CHECK(back.hybrid.expert_scale == c.hybrid.expert_scale);
  CHECK(back.noise_scale == NoiseScale::Variance);
  CHECK(back.dataset.path.empty());
  CHECK(back.dataset.kind == "covid");

  const ExperimentConfig dex = ExperimentConfig::preset("dex");
  CHECK(config_snapshot(parse_config(config_snapshot(dex))) == config_snapshot(dex));
}

TEST_CASE("every registered key appears in the snapshot") {
  const std::string snap = config_snapshot(ExperimentConfig::preset("dex"));
  const auto keys = config_keys();
  CHECK(keys.size() > 60);
  for (const auto& k : keys) {
    const std::string leaf = k.substr(k.rfind('.') + 1);
    CHECK_MESSAGE(snap.find(leaf + ":") != std::string::npos, k);
  }
}

TEST_CASE("load_config reads a file") {
  const auto path = std::filesystem::temp_directory_path() / "odeguide_config_test.yaml";
  std::ofstream(path) << "seed: 9\nevaluation:\n  n_samples: 12\n";
  const ExperimentConfig c = load_config(path.string());
  CHECK(c.seed == 9);
  CHECK(c.n_samples == 12);
}
