#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "odeguide/diff_engine/param_set.hpp"

namespace odeguide::ad {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ParamSet m;
  ParamSet v;
  std::size_t step = 0;

  static AdamState init(const ParamSet& params);
};

/// One Adam update in place. Shapes of params, grads and state must agree.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, const AdamConfig& config);

/// Scalar program over bound parameters and extra input variables.
using Program = std::function<Var(Tape&, const BoundParams&, std::span<const Var>)>;

struct GradRecord {
  double loss = 0.0;
  ParamSet grad;
  std::vector<Matrix> input_grads;  // empty unless requested
};

GradRecord value_and_grad(const Program& f, const ParamSet& params, const std::vector<Matrix>& inputs = {},
                          bool input_gradients = false);

/// Forward only, no gradient bookkeeping.
double evaluate(const Program& f, const ParamSet& params, const std::vector<Matrix>& inputs = {});

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t max_coords = 0;  // 0 checks every coordinate
  std::uint64_t seed = 0;      // picks the subset when max_coords > 0
};

/// Max over checked coordinates of |analytic - fd| / (|analytic| + |fd| + 1e-12), central differences.
double grad_check(const Program& f, const ParamSet& params, const std::vector<Matrix>& inputs = {},
                  const GradCheckOptions& options = {});
double grad_check(const Program& f, const ParamSet& params, double eps);

}  // namespace odeguide::ad

namespace odeguide::ad {

/// Scales grads in place so their global L2 norm is at most max_norm. Returns the norm before scaling.
double clip_grad_norm(ParamSet& grads, double max_norm);

}  // namespace odeguide::ad
