#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "cgil/tensor.hpp"

namespace cgil {

struct GradCheckReport {
  Real max_rel_error = 0.0;
  Real max_abs_error = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
};

// Denominator floor for the relative error; below it the comparison is absolute.
inline constexpr Real kGradCheckFloor = 1e-6;

// Compares the backward gradient of the scalar `f()` w.r.t. every element of
// `leaves` against central finite differences with step `h`.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                                  Real h, Real tol) {
  for (auto& x : leaves) {
    if (!x.requires_grad()) x.set_requires_grad(true);
    x.zero_grad();
  }
  f().backward();
  std::vector<std::vector<Real>> analytic;
  for (auto& x : leaves) analytic.emplace_back(x.grad().begin(), x.grad().end());

  GradCheckReport report;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const Real orig = values[j];
      values[j] = orig + h;
      const Real up = f().item();
      values[j] = orig - h;
      const Real down = f().item();
      values[j] = orig;
      const Real numeric = (up - down) / (2.0 * h);
      const Real a = analytic[l][j];
      const Real abs_err = std::abs(a - numeric);
      const Real rel = abs_err / std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_leaf = l;
        report.worst_index = j;
      }
      ++report.checked;
    }
  }
  for (auto& x : leaves) x.zero_grad();
  report.passed = report.max_rel_error <= tol;
  return report;
}

inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, Real h,
                                  Real tol) {
  return grad_check([&f, &x] { return f(x); }, std::vector<Tensor>{x}, h, tol);
}

}  // namespace cgil
