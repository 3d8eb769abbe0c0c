#pragma once

// Per-class Gaussian and Gaussian-mixture generators over embedding vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cgil/errors.hpp"
#include "cgil/linalg.hpp"
#include "cgil/rng.hpp"

namespace cgil {

inline constexpr Real kCovarianceRegularizer = 1e-6;

struct GaussianModel {
  std::vector<Real> mean;
  Matrix covariance;
  Matrix cholesky_factor;

  std::size_t dim() const { return mean.size(); }

  // Rebuilds covariance from a (possibly deserialised) Cholesky factor.
  static GaussianModel from_factor(std::vector<Real> mean, Matrix factor) {
    GaussianModel g;
    g.mean = std::move(mean);
    g.covariance = gram_lower(factor);
    g.cholesky_factor = std::move(factor);
    return g;
  }
};

struct GaussianOptions {
  Real epsilon = kCovarianceRegularizer;
  bool diagonal = false;
};

namespace detail {

// Weighted mean and (1/N_w) scatter + eps I. `weights` empty means all ones.
inline GaussianModel weighted_moments(const Matrix& x, std::span<const Real> weights, Real total,
                                      const GaussianOptions& opt) {
  const std::size_t n = x.rows, d = x.cols;
  GaussianModel g;
  g.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Real w = weights.empty() ? 1.0 : weights[i];
    for (std::size_t j = 0; j < d; ++j) g.mean[j] += w * x(i, j);
  }
  for (auto& m : g.mean) m /= total;
  g.covariance = Matrix(d, d);
  std::vector<Real> c(d);
  for (std::size_t i = 0; i < n; ++i) {
    const Real w = weights.empty() ? 1.0 : weights[i];
    for (std::size_t j = 0; j < d; ++j) c[j] = x(i, j) - g.mean[j];
    for (std::size_t a = 0; a < d; ++a) {
      if (opt.diagonal) {
        g.covariance(a, a) += w * c[a] * c[a];
        continue;
      }
      const Real s = w * c[a];
      for (std::size_t b = 0; b <= a; ++b) g.covariance(a, b) += s * c[b];
    }
  }
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b <= a; ++b) {
      const Real v = g.covariance(a, b) / total;
      g.covariance(a, b) = g.covariance(b, a) = v;
    }
    g.covariance(a, a) += opt.epsilon;
  }
  g.cholesky_factor = cholesky(g.covariance);
  return g;
}

inline void draw_gaussian(const GaussianModel& g, Rng& rng, std::span<Real> out) {
  const std::size_t d = g.dim();
  std::vector<Real> z(d);
  for (auto& v : z) v = rng.normal();
  for (std::size_t i = 0; i < d; ++i) {
    Real s = g.mean[i];
    for (std::size_t k = 0; k <= i; ++k) s += g.cholesky_factor(i, k) * z[k];
    out[i] = s;
  }
}

}  // namespace detail

// Maximum-likelihood (1/N) fit of one class, regularised by eps I.
inline GaussianModel fit_gaussian(const Matrix& features, const GaussianOptions& opt = {}) {
  if (features.rows < 2)
    throw InsufficientDataError("fit_gaussian needs at least 2 samples, got " +
                                std::to_string(features.rows));
  return detail::weighted_moments(features, {}, static_cast<Real>(features.rows), opt);
}

// x = mean + L z, z ~ N(0, I). Pure function of (model, n, seed).
inline Matrix sample_gaussian(const GaussianModel& model, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DomainError("sample_gaussian: n must be at least 1");
  Rng rng(seed);
  Matrix out(n, model.dim());
  for (std::size_t i = 0; i < n; ++i) detail::draw_gaussian(model, rng, out.row(i));
  return out;
}

// ---------------------------------------------------------------------------
// Mixture of Gaussians

struct MoGModel {
  std::vector<Real> weights;
  std::vector<GaussianModel> components;

  std::size_t k() const { return components.size(); }
  std::size_t dim() const { return components.empty() ? 0 : components.front().dim(); }

  Real log_density(std::span<const Real> x) const {
    Real mx = -std::numeric_limits<Real>::infinity();
    std::vector<Real> terms(k());
    for (std::size_t c = 0; c < k(); ++c) {
      terms[c] = weights[c] > 0.0
                     ? std::log(weights[c]) +
                           gaussian_log_density(x, components[c].mean, components[c].cholesky_factor)
                     : -std::numeric_limits<Real>::infinity();
      mx = std::max(mx, terms[c]);
    }
    Real s = 0.0;
    for (Real t : terms) s += std::exp(t - mx);
    return mx + std::log(s);
  }
};

struct MoGOptions {
  std::size_t components = 5;
  std::size_t max_iters = 200;
  Real tol = 1e-6;
  Real epsilon = kCovarianceRegularizer;
  bool diagonal = false;
};

struct MoGFit {
  MoGModel model;
  std::vector<Real> log_likelihood;  // mean log-likelihood at each E-step
  bool converged = false;
};

namespace detail {

// k-means++ seeding: first centre uniform, then proportional to squared distance.
inline std::vector<std::size_t> kmeanspp_seeds(const Matrix& x, std::size_t k, Rng& rng) {
  const std::size_t n = x.rows;
  std::vector<std::size_t> seeds{rng.index(n)};
  std::vector<Real> d2(n, std::numeric_limits<Real>::infinity());
  while (seeds.size() < k) {
    const auto last = x.row(seeds.back());
    Real total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      Real s = 0.0;
      for (std::size_t j = 0; j < x.cols; ++j) s += (x(i, j) - last[j]) * (x(i, j) - last[j]);
      d2[i] = std::min(d2[i], s);
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      Real u = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2[pick];
        if (u < 0.0) break;
      }
    } else {
      pick = rng.index(n);
    }
    seeds.push_back(pick);
  }
  return seeds;
}

}  // namespace detail

// Expectation-maximisation until the mean log-likelihood gains less than `tol`
// or `max_iters` M-steps have run.
inline MoGFit fit_mog(const Matrix& features, const MoGOptions& opt, std::uint64_t seed) {
  const std::size_t n = features.rows, k = opt.components;
  if (k == 0) throw DomainError("fit_mog: need at least one component");
  if (n < k || n < 2)
    throw InsufficientDataError("fit_mog: " + std::to_string(n) + " samples for " +
                                std::to_string(k) + " components");
  const GaussianOptions gopt{opt.epsilon, opt.diagonal};

  Rng rng(seed);
  const GaussianModel global = fit_gaussian(features, gopt);
  MoGFit fit;
  auto& model = fit.model;
  model.weights.assign(k, 1.0 / static_cast<Real>(k));
  for (auto idx : detail::kmeanspp_seeds(features, k, rng)) {
    GaussianModel c = global;
    c.mean.assign(features.row(idx).begin(), features.row(idx).end());
    model.components.push_back(std::move(c));
  }

  Matrix resp(k, n);
  std::vector<Real> logp(k);
  for (std::size_t iter = 0;; ++iter) {
    // E-step
    Real ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        logp[c] = model.weights[c] > 0.0
                      ? std::log(model.weights[c]) +
                            gaussian_log_density(features.row(i), model.components[c].mean,
                                                 model.components[c].cholesky_factor)
                      : -std::numeric_limits<Real>::infinity();
        mx = std::max(mx, logp[c]);
      }
      Real s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += std::exp(logp[c] - mx);
      const Real lse = mx + std::log(s);
      ll += lse;
      for (std::size_t c = 0; c < k; ++c) resp(c, i) = std::exp(logp[c] - lse);
    }
    ll /= static_cast<Real>(n);
    if (!std::isfinite(ll)) throw NumericError("fit_mog: non-finite log-likelihood");
    fit.log_likelihood.push_back(ll);
    if (iter > 0 && ll - fit.log_likelihood[iter - 1] < opt.tol) {
      fit.converged = true;
      break;
    }
    if (iter == opt.max_iters) break;

    // M-step
    for (std::size_t c = 0; c < k; ++c) {
      Real nk = 0.0;
      for (std::size_t i = 0; i < n; ++i) nk += resp(c, i);
      model.weights[c] = nk / static_cast<Real>(n);
      // A component with no mass keeps its previous parameters.
      if (nk < 1e-10) continue;
      model.components[c] = detail::weighted_moments(features, resp.row(c), nk, gopt);
    }
  }
  return fit;
}

inline Matrix sample_mog(const MoGModel& model, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DomainError("sample_mog: n must be at least 1");
  Rng rng(seed);
  Matrix out(n, model.dim());
  for (std::size_t i = 0; i < n; ++i) {
    Real u = rng.uniform();
    std::size_t c = 0;
    for (; c + 1 < model.k(); ++c) {
      u -= model.weights[c];
      if (u < 0.0) break;
    }
    // Skip trailing components that carry no weight.
    while (model.weights[c] <= 0.0 && c > 0) --c;
    detail::draw_gaussian(model.components[c], rng, out.row(i));
  }
  return out;
}

}  // namespace cgil
