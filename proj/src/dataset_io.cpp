#include "odeguide/dataset_io.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "odeguide/errors.hpp"

namespace odeguide {

namespace fs = std::filesystem;

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text) {
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ContractError("cannot parse number '" + text + "'");
  }
  return v;
}

nlohmann::ordered_json schedule_to_json(const TreatmentSchedule& s) {
  nlohmann::ordered_json j;
  if (s.kind == TreatmentSchedule::Kind::BinaryPolicy) {
    j["kind"] = "policy";
    j["mandate_start"] = s.mandate_start ? nlohmann::ordered_json(*s.mandate_start) : nlohmann::ordered_json();
    j["beta_decay"] = s.beta_decay;
  } else {
    j["kind"] = "dosing";
    j["k_d"] = s.k_d;
    j["doses"] = nlohmann::ordered_json::array();
    for (const auto& d : s.doses) j["doses"].push_back({d.time, d.amount});
  }
  return j;
}

TreatmentSchedule schedule_from_json(const nlohmann::ordered_json& j) {
  const std::string kind = j.at("kind");
  if (kind == "policy") {
    std::optional<double> start;
    if (!j.at("mandate_start").is_null()) start = j.at("mandate_start").get<double>();
    return TreatmentSchedule::policy(start, j.at("beta_decay").get<double>());
  }
  if (kind == "dosing") {
    std::vector<DoseEvent> doses;
    for (const auto& d : j.at("doses")) doses.push_back({d.at(0).get<double>(), d.at(1).get<double>()});
    return TreatmentSchedule::dosing(std::move(doses), j.at("k_d").get<double>());
  }
  throw ContractError("unknown schedule kind '" + kind + "'");
}

namespace {

void write_arm(const Dataset& ds, bool factual, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot write " + path.string());
  const std::size_t dx = ds.covariate_dim();
  out << "unit_id,t,y";
  for (std::size_t i = 0; i < dx; ++i) out << ",x_" << (i + 1);
  out << ",a,observed_flag,y_latent\n";
  for (const auto& u : ds.units) {
    const Trajectory& tr = factual ? u.factual : u.counterfactual;
    for (std::size_t k = 0; k < tr.length(); ++k) {
      out << u.id << ',' << format_double(tr.t[k]) << ',' << format_double(tr.y[k]);
      for (std::size_t i = 0; i < dx; ++i) out << ',' << format_double(tr.x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)));
      out << ',' << format_double(tr.a[k]) << ',' << static_cast<int>(tr.observed[k]) << ','
          << format_double(tr.y_latent[k]) << '\n';
    }
  }
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

std::map<std::string, Trajectory> read_arm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  const auto header = split(line);
  if (header.size() < 6 || header[0] != "unit_id" || header[1] != "t" || header[2] != "y") {
    throw ContractError("bad dataset header in " + path.string());
  }
  const std::size_t dx = header.size() - 6;
  std::map<std::string, std::vector<std::vector<std::string>>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != header.size()) throw ContractError("ragged row in " + path.string());
    rows[cells[0]].push_back(std::move(cells));
  }
  std::map<std::string, Trajectory> out;
  for (auto& [id, rs] : rows) {
    Trajectory tr;
    tr.x.resize(static_cast<Eigen::Index>(rs.size()), static_cast<Eigen::Index>(dx));
    for (std::size_t k = 0; k < rs.size(); ++k) {
      const auto& c = rs[k];
      tr.t.push_back(parse_double(c[1]));
      tr.y.push_back(parse_double(c[2]));
      for (std::size_t i = 0; i < dx; ++i) {
        tr.x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = parse_double(c[3 + i]);
      }
      tr.a.push_back(parse_double(c[3 + dx]));
      tr.observed.push_back(c[4 + dx] == "1" ? 1 : 0);
      tr.y_latent.push_back(parse_double(c[5 + dx]));
    }
    out.emplace(id, std::move(tr));
  }
  return out;
}

}  // namespace

void write_dataset(const Dataset& ds, const fs::path& dir) {
  ds.validate();
  fs::create_directories(dir);
  write_arm(ds, true, dir / "factual.csv");
  write_arm(ds, false, dir / "counterfactual.csv");
  nlohmann::ordered_json m;
  m["schema"] = ds.schema;
  m["kind"] = ds.kind;
  m["seed"] = ds.seed;
  m["config"] = ds.config;
  m["units"] = nlohmann::ordered_json::array();
  for (const auto& u : ds.units) {
    nlohmann::ordered_json ju;
    ju["id"] = u.id;
    ju["group"] = u.group;
    ju["population"] = u.population;
    ju["treated"] = u.treated;
    ju["latent0"] = u.latent0;
    ju["factual_treatment"] = schedule_to_json(u.factual_treatment);
    ju["counterfactual_treatment"] = schedule_to_json(u.counterfactual_treatment);
    m["units"].push_back(std::move(ju));
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << m.dump(2) << '\n';
}

Dataset read_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ContractError("missing manifest.json in " + dir.string());
  const nlohmann::ordered_json m = nlohmann::ordered_json::parse(in);
  if (m.at("schema") != kDatasetSchema) throw ContractError("unsupported dataset schema");
  auto factual = read_arm(dir / "factual.csv");
  auto counterfactual = read_arm(dir / "counterfactual.csv");
  Dataset ds;
  ds.kind = m.at("kind");
  ds.seed = m.at("seed");
  ds.config = m.at("config");
  for (const auto& ju : m.at("units")) {
    UnitRecord u;
    u.id = ju.at("id");
    u.group = ju.at("group");
    u.population = ju.at("population");
    u.treated = ju.at("treated");
    u.latent0 = ju.at("latent0").get<StateVector>();
    u.factual_treatment = schedule_from_json(ju.at("factual_treatment"));
    u.counterfactual_treatment = schedule_from_json(ju.at("counterfactual_treatment"));
    auto f = factual.find(u.id);
    auto c = counterfactual.find(u.id);
    if (f == factual.end() || c == counterfactual.end()) throw ContractError("unit " + u.id + " missing from CSV");
    u.factual = std::move(f->second);
    u.counterfactual = std::move(c->second);
    ds.units.push_back(std::move(u));
  }
  ds.validate();
  return ds;
}

}  // namespace odeguide
