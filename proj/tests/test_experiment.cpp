#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "odeguide/errors.hpp"
#include "odeguide/experiment.hpp"

using namespace odeguide;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(const std::string& out) {
  ExperimentConfig c = parse_config(
      "seed: 3\n"
      "dataset: {n_units: 10}\n"
      "hybrid: {epochs: 2, batch_size: 4}\n"
      "diffusion: {epochs: 40, T_d: 10}\n"
      "propensity: {iterations: 20}\n"
      "guidance: {eta_candidates: [0, 100, 1000], selection_samples: 3}\n"
      "evaluation: {n_samples: 4}\n");
  c.out_dir = out;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("odeguide_exp_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool bit_equal(const ad::Matrix& a, const ad::Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("git blob ids") {
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("ensemble CSV round trip") {
  const fs::path dir = scratch("csv");
  fs::create_directories(dir);
  ad::Matrix m(2, 3);
  m << 0.1, -2.5, 1.0 / 3.0, 4e-12, 7.0, 1e300;
  write_ensemble_csv(dir / "e.csv", m, {1.0, 2.0, 3.0});
  CHECK(bit_equal(read_ensemble_csv(dir / "e.csv", 3), m));
  CHECK_THROWS(read_ensemble_csv(dir / "e.csv", 4));
}

TEST_CASE("pipeline stages, persistence and the null guidance identity") {
  const fs::path dir = scratch("stages");
  Pipeline p(tiny(dir.string()));
  CHECK_THROWS_AS(p.hybrid(), ContractError);
  p.load_or_generate_data();
  CHECK(p.train_units().size() == 8);
  CHECK(p.test_units().size() == 2);
  p.train_hybrid();
  p.train_diffusion();
  p.save_data(dir);
  p.save_hybrid(dir);
  p.save_diffusion(dir);

  const std::size_t u = p.test_units().front();
  const UnitGuidance ctx = p.unit_guidance(u);
  const ad::Matrix unguided = p.sample_counterfactual(u, ctx, nullptr, 5);
  GuidanceConfig off = p.config().guidance;
  off.eta = 0.0;
  off.nu = 0.0;
  CHECK(bit_equal(p.sample_counterfactual(u, ctx, &off, 5), unguided));
  GuidanceConfig on = p.config().guidance;
  CHECK_FALSE(bit_equal(p.sample_counterfactual(u, ctx, &on, 5), unguided));

  Pipeline q(tiny(dir.string()));
  q.load_data(dir);
  q.load_hybrid(dir);
  q.load_diffusion(dir);
  CHECK(q.test_units() == p.test_units());
  CHECK(bit_equal(q.sample_counterfactual(u, q.unit_guidance(u), nullptr, 5), unguided));

  p.select_eta();
  CHECK(p.eta_sweep().size() == 3);
  p.save_selection(dir);
  q.load_selection(dir);
  CHECK(q.eta() == p.eta());

  p.sample();
  p.save_ensembles(dir);
  q.load_ensembles(dir);
  REQUIRE(q.ensembles().unit_ids == p.ensembles().unit_ids);
  for (std::size_t i = 0; i < p.ensembles().unit_ids.size(); ++i) {
    CHECK(bit_equal(q.ensembles().counterfactual[i], p.ensembles().counterfactual[i]));
    CHECK(bit_equal(q.ensembles().unguided[i], p.ensembles().unguided[i]));
  }
  const ExperimentReport a = p.evaluate();
  const ExperimentReport b = q.evaluate();
  CHECK(a.to_json().dump() == b.to_json().dump());
  CHECK(a.units.size() == 2);
}

TEST_CASE("run is reproducible byte for byte") {
  const fs::path dir = scratch("run");
  const fs::path first = scratch("run_first");
  const ExperimentConfig c = tiny(dir.string());
  run_experiment(c);
  fs::copy(dir, first, fs::copy_options::recursive);
  fs::remove_all(dir);
  run_experiment(parse_config(slurp(first / "config.yaml")));

  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(first)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), first);
    CHECK_MESSAGE(slurp(e.path()) == slurp(dir / rel), rel.string());
    ++compared;
  }
  CHECK(compared > 10);
  for (const char* f : {"report.json", "report.csv", "config.yaml", "seed", "inputs.sha1", "run.log",
                        "eta.json", "eta_sweep.csv", "checkpoints/hybrid.json", "checkpoints/denoiser.json"}) {
    CHECK_MESSAGE(fs::exists(dir / f), f);
  }
}

TEST_CASE("stage failures name the stage") {
  const fs::path empty = scratch("empty_data");
  fs::create_directories(empty);
  ExperimentConfig c = tiny(scratch("fail").string());
  c.dataset.path = empty.string();
  try {
    run_experiment(c);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "metadata");  // input files are hashed first
  }

  for (const char* f : {"factual.csv", "counterfactual.csv", "manifest.json"}) std::ofstream(empty / f) << "garbage\n";
  try {
    run_experiment(c);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "datagen");
    CHECK(std::string(e.what()).find("stage 'datagen' failed") == 0);
  }
  CHECK(slurp(fs::path(c.out_dir) / "run.log").find("stage datagen failed") != std::string::npos);
}
