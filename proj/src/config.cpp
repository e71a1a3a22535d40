#include "odeguide/config.hpp"

#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "odeguide/dataset_io.hpp"
#include "odeguide/errors.hpp"

namespace odeguide {

namespace {

using Setter = std::function<void(ExperimentConfig&, const YAML::Node&)>;
using Getter = std::function<YAML::Node(const ExperimentConfig&)>;

struct Field {
  std::string key;
  Setter set;
  Getter get;
};

template <typename T>
T scalar_as(const YAML::Node& n, const std::string& key) {
  if (!n.IsScalar()) throw ConfigError("config key '" + key + "' expects a scalar");
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("config key '" + key + "' has an invalid value '" + n.Scalar() + "'");
  }
}

YAML::Node exact(double v) {
  // Shortest round-trip text keeps snapshots exact.
  return YAML::Node(format_double(v));
}

template <typename T, typename Member>
Field number(std::string key, Member member) {
  return Field{key,
               [key, member](ExperimentConfig& c, const YAML::Node& n) { member(c) = scalar_as<T>(n, key); },
               [member](const ExperimentConfig& c) {
                 auto& m = member(const_cast<ExperimentConfig&>(c));
                 if constexpr (std::is_floating_point_v<T>) {
                   return exact(m);
                 } else {
                   return YAML::Node(m);
                 }
               }};
}

template <typename Member>
Field real(std::string key, Member member) {
  return number<double>(std::move(key), member);
}
template <typename Member>
Field count(std::string key, Member member) {
  return number<std::size_t>(std::move(key), member);
}
template <typename Member>
Field integer(std::string key, Member member) {
  return number<int>(std::move(key), member);
}
template <typename Member>
Field flag(std::string key, Member member) {
  return number<bool>(std::move(key), member);
}
template <typename Member>
Field text(std::string key, Member member) {
  return number<std::string>(std::move(key), member);
}

template <typename Member>
Field activation(std::string key, Member member) {
  return Field{key,
               [key, member](ExperimentConfig& c, const YAML::Node& n) {
                 try {
                   member(c) = ad::parse_activation(scalar_as<std::string>(n, key));
                 } catch (const ContractError& e) {
                   throw ConfigError("config key '" + key + "': " + e.what());
                 }
               },
               [member](const ExperimentConfig& c) {
                 return YAML::Node(std::string(ad::activation_name(member(const_cast<ExperimentConfig&>(c)))));
               }};
}

#define M(expr) [](ExperimentConfig& c) -> auto& { return expr; }

const std::vector<Field>& registry() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back(number<std::uint64_t>("seed", M(c.seed)));
    f.push_back(text("output.dir", M(c.out_dir)));

    f.push_back(text("dataset.kind", M(c.dataset.kind)));
    f.push_back(text("dataset.path", M(c.dataset.path)));
    f.push_back(text("dataset.census", M(c.dataset.census)));
    f.push_back(count("dataset.n_units", M(c.dataset.n_units)));
    f.push_back(count("dataset.dex.days", M(c.dataset.dex.days)));
    f.push_back(real("dataset.dex.dt", M(c.dataset.dex.dt)));
    f.push_back(real("dataset.dex.dose_time", M(c.dataset.dex.dose_time)));
    f.push_back(real("dataset.dex.dose_amount", M(c.dataset.dex.dose_amount)));
    f.push_back(real("dataset.dex.noise_sd", M(c.dataset.dex.noise_sd)));
    f.push_back(real("dataset.dex.drop_prob", M(c.dataset.dex.drop_prob)));
    f.push_back(count("dataset.covid.weeks", M(c.dataset.covid.weeks)));
    f.push_back(real("dataset.covid.dt", M(c.dataset.covid.dt)));
    f.push_back(count("dataset.covid.strict_count", M(c.dataset.covid.strict_count)));
    f.push_back(real("dataset.covid.strict_mandate", M(c.dataset.covid.strict_mandate)));
    f.push_back(real("dataset.covid.relaxed_mandate", M(c.dataset.covid.relaxed_mandate)));
    f.push_back(real("dataset.covid.noise_sd", M(c.dataset.covid.noise_sd)));
    f.push_back(real("dataset.covid.drop_prob", M(c.dataset.covid.drop_prob)));
    f.push_back(real("split.test_fraction", M(c.test_fraction)));

    f.push_back(real("expert.seirm.beta", M(c.hybrid.expert.seirm.beta)));
    f.push_back(real("expert.seirm.alpha", M(c.hybrid.expert.seirm.alpha)));
    f.push_back(real("expert.seirm.gamma", M(c.hybrid.expert.seirm.gamma)));
    f.push_back(real("expert.seirm.mu", M(c.hybrid.expert.seirm.mu)));

    f.push_back(integer("hybrid.latent_y", M(c.hybrid.latent_y)));
    f.push_back(integer("hybrid.latent_x", M(c.hybrid.latent_x)));
    f.push_back(integer("hybrid.hidden", M(c.hybrid.hidden)));
    f.push_back(integer("hybrid.hidden_layers", M(c.hybrid.hidden_layers)));
    f.push_back(activation("hybrid.activation", M(c.hybrid.activation)));
    f.push_back(real("hybrid.dt", M(c.hybrid.dt)));
    f.push_back(real("hybrid.expert_scale", M(c.hybrid.expert_scale)));
    f.push_back(count("hybrid.epochs", M(c.hybrid_train.epochs)));
    f.push_back(count("hybrid.batch_size", M(c.hybrid_train.batch_size)));
    f.push_back(real("hybrid.lr", M(c.hybrid_train.lr)));
    f.push_back(real("hybrid.clip_norm", M(c.hybrid_train.clip_norm)));

    f.push_back(flag("propensity.enabled", M(c.use_iptw)));
    f.push_back(count("propensity.history", M(c.propensity.history)));
    f.push_back(count("propensity.iterations", M(c.propensity.iterations)));
    f.push_back(real("propensity.lr", M(c.propensity.lr)));
    f.push_back(real("propensity.l2", M(c.propensity.l2)));
    f.push_back(real("propensity.floor", M(c.propensity.floor)));

    f.push_back(integer("diffusion.T_d", M(c.T_d)));
    f.push_back(real("diffusion.beta_start", M(c.beta_start)));
    f.push_back(real("diffusion.beta_end", M(c.beta_end)));
    f.push_back(real("diffusion.lambda", M(c.lambda_const)));
    f.push_back(Field{"diffusion.noise_scale",
                      [](ExperimentConfig& c, const YAML::Node& n) {
                        c.noise_scale = parse_noise_scale(scalar_as<std::string>(n, "diffusion.noise_scale"));
                      },
                      [](const ExperimentConfig& c) { return YAML::Node(noise_scale_name(c.noise_scale)); }});
    f.push_back(integer("diffusion.hidden", M(c.denoiser.hidden)));
    f.push_back(integer("diffusion.hidden_layers", M(c.denoiser.hidden_layers)));
    f.push_back(activation("diffusion.activation", M(c.denoiser.activation)));
    f.push_back(integer("diffusion.freqs", M(c.denoiser.freqs)));
    f.push_back(count("diffusion.epochs", M(c.diffusion_train.epochs)));
    f.push_back(count("diffusion.batch_size", M(c.diffusion_train.batch_size)));
    f.push_back(real("diffusion.lr", M(c.diffusion_train.lr)));
    f.push_back(flag("diffusion.cosine_decay", M(c.diffusion_train.cosine_decay)));
    f.push_back(real("diffusion.clip_norm", M(c.diffusion_train.clip_norm)));

    f.push_back(flag("guidance.enabled", M(c.guidance_enabled)));
    f.push_back(real("guidance.eta", M(c.guidance.eta)));
    f.push_back(real("guidance.direction_ratio", M(c.guidance.direction_ratio)));
    f.push_back(real("guidance.nu", M(c.guidance.nu)));
    f.push_back(real("guidance.kappa", M(c.guidance.kappa)));
    f.push_back(flag("guidance.use_value", M(c.guidance.use_value)));
    f.push_back(flag("guidance.use_direction", M(c.guidance.use_direction)));
    f.push_back(flag("guidance.select_eta", M(c.select_eta)));
    f.push_back(Field{"guidance.eta_candidates",
                      [](ExperimentConfig& c, const YAML::Node& n) {
                        if (!n.IsSequence()) throw ConfigError("config key 'guidance.eta_candidates' expects a list");
                        c.guidance.eta_candidates.clear();
                        for (const auto& e : n) {
                          c.guidance.eta_candidates.push_back(scalar_as<double>(e, "guidance.eta_candidates"));
                        }
                      },
                      [](const ExperimentConfig& c) {
                        YAML::Node n(YAML::NodeType::Sequence);
                        for (double e : c.guidance.eta_candidates) n.push_back(exact(e));
                        return n;
                      }});
    f.push_back(Field{"guidance.target",
                      [](ExperimentConfig& c, const YAML::Node& n) {
                        c.guidance.target = parse_correlation_target(scalar_as<std::string>(n, "guidance.target"));
                      },
                      [](const ExperimentConfig& c) { return YAML::Node(correlation_target_name(c.guidance.target)); }});
    f.push_back(count("guidance.selection_samples", M(c.selection_samples)));

    f.push_back(count("evaluation.n_samples", M(c.n_samples)));

    f.push_back(text("case_study.regions", M(c.case_study.regions)));
    f.push_back(count("case_study.n_regions", M(c.case_study.n_regions)));
    f.push_back(count("case_study.weeks", M(c.case_study.weeks)));
    f.push_back(count("case_study.train_weeks", M(c.case_study.train_weeks)));
    f.push_back(count("case_study.k_neighbors", M(c.case_study.k_neighbors)));
    f.push_back(text("case_study.test_regions", M(c.case_study.test_regions)));
    f.push_back(flag("case_study.fit_model", M(c.case_study.fit_model)));
    return f;
  }();
  return fields;
}

#undef M

void flatten(const YAML::Node& node, const std::string& prefix, std::map<std::string, YAML::Node>& out) {
  if (node.IsMap()) {
    for (const auto& kv : node) {
      const std::string key = kv.first.as<std::string>();
      flatten(kv.second, prefix.empty() ? key : prefix + "." + key, out);
    }
    return;
  }
  if (prefix.empty()) throw ConfigError("config root must be a mapping");
  out[prefix] = node;
}

void insert_nested(YAML::Node& root, const std::string& key, const YAML::Node& value) {
  const auto dot = key.find('.');
  if (dot == std::string::npos) {
    root[key] = value;
    return;
  }
  YAML::Node child = root[key.substr(0, dot)];
  insert_nested(child, key.substr(dot + 1), value);
}

}  // namespace

void CaseStudyConfig::validate() const {
  if (train_weeks < 1 || train_weeks >= weeks) throw ConfigError("case_study.train_weeks must lie in [1, weeks)");
  if (k_neighbors < 1) throw ConfigError("case_study.k_neighbors must be at least 1");
  if (regions.empty() && n_regions <= k_neighbors) throw ConfigError("case_study.n_regions must exceed k_neighbors");
}

ExperimentConfig ExperimentConfig::preset(const std::string& kind) {
  ExperimentConfig c;
  c.dataset.kind = kind;
  if (kind == "dex") {
    c.dataset.n_units = 50;
    c.hybrid.expert.family = ExpertFamily::Pkpd;
    c.hybrid.expert.pkpd.full_model = false;
    c.hybrid.dt = 0.05;
    c.hybrid.expert_scale = 0.1;
    c.guidance = GuidanceConfig::dex_preset();
  } else if (kind == "covid") {
    c.dataset.n_units = 121;
    c.hybrid.expert.family = ExpertFamily::Seirm;
    c.hybrid.expert.seirm.N = 1000.0;
    c.hybrid.dt = 0.1;
    c.hybrid.expert_scale = 1e-3;
    c.guidance = GuidanceConfig::covid_preset();
  } else {
    throw ConfigError("dataset.kind must be 'dex' or 'covid', got '" + kind + "'");
  }
  return c;
}

void ExperimentConfig::validate() const {
  if (dataset.kind != "dex" && dataset.kind != "covid") throw ConfigError("dataset.kind must be 'dex' or 'covid'");
  if (!dataset.path.empty() && !std::filesystem::is_directory(dataset.path)) {
    throw ConfigError("dataset.path does not exist: " + dataset.path);
  }
  if (!dataset.census.empty() && !std::filesystem::is_regular_file(dataset.census)) {
    throw ConfigError("dataset.census does not exist: " + dataset.census);
  }
  if (!case_study.regions.empty() && !std::filesystem::is_regular_file(case_study.regions)) {
    throw ConfigError("case_study.regions does not exist: " + case_study.regions);
  }
  if (dataset.path.empty() && dataset.n_units < 2) throw ConfigError("dataset.n_units must be at least 2");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("split.test_fraction must lie in (0, 1)");
  if (n_samples < 2) throw ConfigError("evaluation.n_samples must be at least 2");
  if (selection_samples < 1) throw ConfigError("guidance.selection_samples must be positive");
  if (T_d < 1) throw ConfigError("diffusion.T_d must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("diffusion betas need 0 < beta_start <= beta_end < 1");
  }
  try {
    guidance.validate();
    hybrid.expert.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  if (select_eta && guidance.eta_candidates.empty()) throw ConfigError("guidance.eta_candidates is empty");
  case_study.validate();
}

ExperimentConfig parse_config(const std::string& yaml_text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  std::map<std::string, YAML::Node> flat;
  if (root.IsDefined() && !root.IsNull()) flatten(root, "", flat);

  std::string kind = "dex";
  if (auto it = flat.find("dataset.kind"); it != flat.end()) kind = scalar_as<std::string>(it->second, "dataset.kind");
  ExperimentConfig c = ExperimentConfig::preset(kind);

  std::map<std::string, const Field*> by_key;
  for (const Field& f : registry()) by_key[f.key] = &f;
  for (const auto& [key, value] : flat) {
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError(origin + ": unknown config key '" + key + "'");
    it->second->set(c, value);
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

std::string config_snapshot(const ExperimentConfig& c) {
  YAML::Node root(YAML::NodeType::Map);
  for (const Field& f : registry()) insert_nested(root, f.key, f.get(c));
  YAML::Emitter out;
  out << root;
  return std::string(out.c_str()) + "\n";
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : registry()) keys.push_back(f.key);
  return keys;
}

}  // namespace odeguide
