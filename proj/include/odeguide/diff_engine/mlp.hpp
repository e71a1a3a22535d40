#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "odeguide/diff_engine/param_set.hpp"
#include "odeguide/random.hpp"

namespace odeguide::ad {

/// Layer widths including the input width; one activation per layer.
struct MlpSpec {
  std::vector<int> widths;
  std::vector<Activation> activations;

  static MlpSpec make(int input, const std::vector<int>& hidden, int output, Activation hidden_act,
                      Activation output_act = Activation::Identity);

  int input_width() const { return widths.front(); }
  int output_width() const { return widths.back(); }
  std::size_t layers() const { return activations.size(); }
  void validate() const;
};

/// Resolved parameter indices of one MLP inside a ParamSet ("<prefix>.W<k>", "<prefix>.b<k>").
struct Mlp {
  MlpSpec spec;
  std::string prefix;
  std::vector<std::size_t> weights;
  std::vector<std::size_t> biases;

  static Mlp resolve(const MlpSpec& spec, const std::string& prefix, const ParamSet& params);
};

/// Adds weights drawn uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)] and biases alike.
Mlp add_mlp(ParamSet& params, const std::string& prefix, const MlpSpec& spec, Rng& rng);

/// Tape forward pass; input is batch x input_width.
Var mlp_forward(const Mlp& mlp, const BoundParams& bound, const Var& input);

/// Plain forward pass without a tape.
Matrix mlp_apply(const Mlp& mlp, const ParamSet& params, const Matrix& input);
Matrix mlp_apply(const MlpSpec& spec, const ParamSet& params, const std::string& prefix, const Matrix& input);

}  // namespace odeguide::ad
