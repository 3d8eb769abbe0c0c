#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cgil/errors.hpp"
#include "cgil/tensor.hpp"

namespace cgil {

struct AdamState {
  Real learning_rate = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real epsilon = 1e-8;
  std::size_t step_count = 0;
  std::vector<std::vector<Real>> first_moment;
  std::vector<std::vector<Real>> second_moment;

  static AdamState with_lr(Real lr) {
    AdamState s;
    s.learning_rate = lr;
    return s;
  }
};

// One bias-corrected Adam update over `params`, then zeroes their grads.
// Moment buffers are sized on the first call and must keep matching afterwards.
inline void adam_step(std::span<Tensor> params, AdamState& state) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad())
      throw StateError("adam_step: parameter " + std::to_string(i) + " has no grad buffer");
    for (Real g : params[i].grad())
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter " +
                                                std::to_string(i));
  }
  if (state.step_count == 0 && state.first_moment.empty()) {
    for (auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw StateError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, got " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.first_moment[i].size() != params[i].numel())
      throw StateError("adam_step: moment buffer " + std::to_string(i) + " does not match " +
                       shape_str(params[i].shape()));

  ++state.step_count;
  const Real t = static_cast<Real>(state.step_count);
  const Real c1 = 1.0 - std::pow(state.beta1, t);
  const Real c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    auto g = params[i].mutable_grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      w[j] -= state.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.epsilon);
      g[j] = 0.0;
    }
  }
}

}  // namespace cgil
