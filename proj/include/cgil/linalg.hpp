#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cgil/errors.hpp"
#include "cgil/tensor.hpp"

namespace cgil {

// Plain row-major matrix for data that never needs a gradient (features, covariances).
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, Real fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<Real> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("Matrix data does not match " + std::to_string(r) +
                                               "x" + std::to_string(c));
  }

  static Matrix identity(std::size_t n, Real diag = 1.0) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = diag;
    return m;
  }

  Real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const Real> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<Real> row(std::size_t r) { return {data.data() + r * cols, cols}; }

  Tensor to_tensor(bool requires_grad = false) const {
    return Tensor::matrix(rows, cols, data, requires_grad);
  }

  bool operator==(const Matrix&) const = default;
};

// Lower-triangular L with a = L Lᵀ. Throws DomainError when `a` is not positive definite.
inline Matrix cholesky(const Matrix& a) {
  if (a.rows != a.cols) throw ShapeError("cholesky of a non-square matrix");
  const std::size_t n = a.rows;
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    Real d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) throw DomainError("cholesky: matrix is not positive definite at pivot " +
                                      std::to_string(j));
    const Real ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      Real s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

// L Lᵀ.
inline Matrix gram_lower(const Matrix& l) {
  const std::size_t n = l.rows;
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      Real s = 0.0;
      for (std::size_t k = 0; k <= j; ++k) s += l(i, k) * l(j, k);
      out(i, j) = out(j, i) = s;
    }
  return out;
}

// log N(x; mean, L Lᵀ).
inline Real gaussian_log_density(std::span<const Real> x, std::span<const Real> mean,
                                 const Matrix& chol) {
  const std::size_t n = mean.size();
  std::vector<Real> y(n);
  Real log_det_half = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Real s = x[i] - mean[i];
    for (std::size_t k = 0; k < i; ++k) s -= chol(i, k) * y[k];
    y[i] = s / chol(i, i);
    quad += y[i] * y[i];
    log_det_half += std::log(chol(i, i));
  }
  return -0.5 * quad - log_det_half - 0.5 * static_cast<Real>(n) * std::log(2.0 * std::numbers::pi);
}

}  // namespace cgil
