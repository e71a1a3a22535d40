#pragma once

#include <cstddef>
#include <json.hpp>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "odeguide/diff_engine/tape.hpp"

namespace odeguide::ad {

/// Named real tensors with fixed shapes. Shapes cannot change after add().
class ParamSet {
 public:
  void add(std::string name, Matrix value);

  std::size_t size() const { return values_.size(); }
  std::size_t count() const;  // total number of scalars
  bool empty() const { return values_.empty(); }

  const std::string& name(std::size_t i) const { return names_.at(i); }
  const Matrix& operator[](std::size_t i) const { return values_.at(i); }
  const Matrix& get(std::string_view name) const { return values_.at(index_of(name)); }
  std::size_t index_of(std::string_view name) const;
  bool contains(std::string_view name) const;

  /// Writable view with the tensor's fixed shape.
  Eigen::Map<Matrix> mutable_values(std::size_t i) {
    Matrix& m = values_.at(i);
    return {m.data(), m.rows(), m.cols()};
  }
  void assign(std::size_t i, const Matrix& value);

  ParamSet zeros_like() const;
  bool same_shape(const ParamSet& other) const;
  bool all_finite() const;

  /// Coordinate access over the flattened parameter vector (tensor order, column-major).
  double& coord(std::size_t flat_index);
  double coord(std::size_t flat_index) const;

  nlohmann::json to_json() const;
  static ParamSet from_json(const nlohmann::json& j);

 private:
  std::pair<std::size_t, std::size_t> locate(std::size_t flat_index) const;

  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// A ParamSet placed on a tape as leaf variables, index-aligned with the set.
struct BoundParams {
  const ParamSet* params = nullptr;
  std::vector<Var> vars;

  const Var& operator[](std::size_t i) const { return vars.at(i); }
  const Var& operator[](std::string_view name) const { return vars.at(params->index_of(name)); }
};

BoundParams bind(Tape& tape, const ParamSet& params, bool trainable = true);

/// Gradients of the tape's last backward output, shaped like the bound set.
ParamSet gradients(const Tape& tape, const BoundParams& bound);

}  // namespace odeguide::ad
