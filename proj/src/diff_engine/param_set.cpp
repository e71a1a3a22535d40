#include "odeguide/diff_engine/param_set.hpp"

#include <cmath>

#include "odeguide/errors.hpp"

namespace odeguide::ad {

void ParamSet::add(std::string name, Matrix value) {
  if (index_.count(name)) throw ContractError("ParamSet: duplicate tensor '" + name + "'");
  index_.emplace(name, values_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

std::size_t ParamSet::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("ParamSet: no tensor named '" + std::string(name) + "'");
  return it->second;
}

bool ParamSet::contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

void ParamSet::assign(std::size_t i, const Matrix& value) {
  Matrix& m = values_.at(i);
  if (m.rows() != value.rows() || m.cols() != value.cols()) {
    throw ContractError("ParamSet: shape mismatch assigning '" + names_.at(i) + "'");
  }
  m = value;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    out.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
  }
  return out;
}

bool ParamSet::same_shape(const ParamSet& other) const {
  if (other.size() != size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (other.values_[i].rows() != values_[i].rows() || other.values_[i].cols() != values_[i].cols()) {
      return false;
    }
  }
  return true;
}

bool ParamSet::all_finite() const {
  for (const auto& v : values_) {
    if (!v.allFinite()) return false;
  }
  return true;
}

std::pair<std::size_t, std::size_t> ParamSet::locate(std::size_t flat_index) const {
  std::size_t offset = flat_index;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const auto n = static_cast<std::size_t>(values_[i].size());
    if (offset < n) return {i, offset};
    offset -= n;
  }
  throw RangeError("ParamSet: flat index out of range");
}

double& ParamSet::coord(std::size_t flat_index) {
  auto [t, k] = locate(flat_index);
  return values_[t].data()[k];
}

double ParamSet::coord(std::size_t flat_index) const {
  auto [t, k] = locate(flat_index);
  return values_[t].data()[k];
}

nlohmann::json ParamSet::to_json() const {
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const Matrix& m = values_[i];
    std::vector<double> flat(m.data(), m.data() + m.size());
    tensors.push_back({{"name", names_[i]}, {"rows", m.rows()}, {"cols", m.cols()}, {"data", flat}});
  }
  return {{"format", "odeguide.params/1"}, {"count", count()}, {"tensors", tensors}};
}

ParamSet ParamSet::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "odeguide.params/1") throw ContractError("ParamSet: unknown format");
  ParamSet out;
  for (const auto& t : j.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const auto data = t.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
      throw ContractError("ParamSet: data length does not match shape");
    }
    out.add(t.at("name").get<std::string>(), Eigen::Map<const Matrix>(data.data(), rows, cols));
  }
  return out;
}

BoundParams bind(Tape& tape, const ParamSet& params, bool trainable) {
  BoundParams b;
  b.params = &params;
  b.vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    b.vars.push_back(trainable ? tape.variable(params[i]) : tape.constant(params[i]));
  }
  return b;
}

ParamSet gradients(const Tape& tape, const BoundParams& bound) {
  ParamSet out;
  for (std::size_t i = 0; i < bound.vars.size(); ++i) {
    out.add(bound.params->name(i), tape.grad(bound.vars[i]));
  }
  return out;
}

}  // namespace odeguide::ad
