// Command-line front end. Every subcommand works inside one run directory (--out or output.dir);
// later stages read the artifacts written by earlier ones.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "odeguide/case_study.hpp"
#include "odeguide/dataset_io.hpp"
#include "odeguide/errors.hpp"
#include "odeguide/experiment.hpp"

namespace fs = std::filesystem;
using namespace odeguide;

namespace {

struct Options {
  std::string config;
  std::string kind = "dex";
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig c = o.config.empty() ? parse_config("dataset: {kind: " + o.kind + "}", "--kind") : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (const char* env = std::getenv("ODEGUIDE_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      c.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("ODEGUIDE_SEED is not an unsigned integer: ") + env);
    }
  }
  if (!o.out.empty()) c.out_dir = o.out;
  c.validate();
  return c;
}

void print_report(const ExperimentReport& r) {
  auto line = [](const char* name, const MetricReport& m) {
    std::cout << name << ": w1=" << format_double(m.wasserstein1) << " rmse=" << format_double(m.rmse)
              << " pearson=" << format_double(m.pearson_corr) << " cov90=" << format_double(m.pi_coverage_90)
              << '\n';
  };
  std::cout << "eta*=" << format_double(r.eta_star) << '\n';
  line("guided", r.guided);
  line("unguided", r.unguided);
}

void write_expert_csv(const Pipeline& p, const fs::path& path) {
  const Dataset& ds = p.data();
  const ExpertModel& expert = p.config().hybrid.expert;
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "unit,arm,t,y\n";
  for (const UnitRecord& u : ds.units) {
    for (const bool factual : {true, false}) {
      const auto y = expert_outcome(ds, expert, u, factual ? u.factual_treatment : u.counterfactual_treatment);
      for (std::size_t k = 0; k < y.size(); ++k) {
        out << u.id << ',' << (factual ? "factual" : "counterfactual") << ',' << format_double(u.factual.t[k]) << ','
            << format_double(y[k]) << '\n';
      }
    }
  }
}

// Restores the stages a subcommand depends on.
void restore(Pipeline& p, const fs::path& dir, int upto) {
  if (!fs::exists(dir / "split.json")) throw ConfigError("no dataset in " + dir.string() + "; run datagen first");
  p.load_data(dir);
  if (upto >= 1) p.load_hybrid(dir);
  if (upto >= 2) p.load_diffusion(dir);
  if (upto >= 3) p.load_selection(dir);
}

int dispatch(const std::string& cmd, const Options& o) {
  const ExperimentConfig cfg = resolve(o);
  const fs::path dir = cfg.out_dir;
  Pipeline p(cfg);

  if (cmd == "run") {
    print_report(run_experiment(cfg));
    return 0;
  }
  if (cmd == "case-study") {
    run_stage("metadata", dir, [&] { write_run_metadata(cfg, dir); });
    CaseStudyResult res;
    run_stage("case-study", dir, [&] { res = run_case_study(cfg); });
    std::cout << res.evaluated() << " of " << res.rows.size() << " regions evaluated; table in "
              << (dir / "case_study.csv").string() << '\n';
    return 0;
  }
  if (cmd == "datagen") {
    run_stage("metadata", dir, [&] { write_run_metadata(cfg, dir); });
    run_stage("datagen", dir, [&] {
      p.load_or_generate_data();
      p.save_data(dir);
    });
    std::cout << p.data().units.size() << " units written to " << (dir / "data").string() << '\n';
    return 0;
  }
  if (cmd == "simulate") {
    run_stage("simulate", dir, [&] {
      if (fs::exists(dir / "split.json")) {
        p.load_data(dir);
      } else {
        p.load_or_generate_data();
      }
      write_expert_csv(p, dir / "expert.csv");
    });
    std::cout << "expert trajectories written to " << (dir / "expert.csv").string() << '\n';
    return 0;
  }
  if (cmd == "train-hybrid") {
    run_stage("train-hybrid", dir, [&] {
      restore(p, dir, 0);
      p.train_hybrid();
      p.save_hybrid(dir);
    });
    std::cout << "hybrid loss " << format_double(p.hybrid_training().final_loss) << '\n';
    return 0;
  }
  if (cmd == "train-diff") {
    run_stage("train-diff", dir, [&] {
      restore(p, dir, 1);
      p.train_diffusion();
      p.save_diffusion(dir);
    });
    std::cout << "diffusion loss " << format_double(p.diffusion_training().final_loss) << '\n';
    return 0;
  }
  if (cmd == "select-eta") {
    run_stage("select-eta", dir, [&] {
      restore(p, dir, 2);
      p.select_eta();
      p.save_selection(dir);
    });
    std::cout << "eta*=" << format_double(p.eta()) << '\n';
    return 0;
  }
  if (cmd == "sample") {
    run_stage("sample", dir, [&] {
      restore(p, dir, 3);
      p.sample();
      p.save_ensembles(dir);
    });
    std::cout << p.ensembles().unit_ids.size() << " ensembles written to " << (dir / "ensembles").string() << '\n';
    return 0;
  }
  if (cmd == "evaluate") {
    ExperimentReport r;
    run_stage("evaluate", dir, [&] {
      restore(p, dir, 3);
      p.load_ensembles(dir);
      r = p.evaluate();
      write_report(r, cfg, dir);
    });
    print_report(r);
    return 0;
  }
  throw ConfigError("unknown subcommand " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expert-ODE-guided counterfactual diffusion for time series"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"datagen", "generate or load the dataset and fix the train/test split"},
      {"simulate", "write expert ODE outcomes for both arms of every unit"},
      {"train-hybrid", "train the hybrid point predictor"},
      {"train-diff", "train the conditional diffusion model"},
      {"select-eta", "choose the guidance strength"},
      {"sample", "draw counterfactual ensembles for the test units"},
      {"evaluate", "score the ensembles and write the report"},
      {"case-study", "neighbor-based policy comparison on regional data"},
      {"run", "all pipeline stages in order"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "YAML config file")->check(CLI::ExistingFile);
    sub->add_option("--kind", o.kind, "preset when no config is given")->check(CLI::IsMember({"dex", "covid"}));
    sub->add_option("--seed", o.seed, "master seed (ODEGUIDE_SEED overrides)");
    sub->add_option("--out", o.out, "run directory");
  }
  CLI11_PARSE(app, argc, argv);

  try {
    return dispatch(app.get_subcommands().front()->get_name(), o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
  }
  return 1;
}
