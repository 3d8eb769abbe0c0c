#pragma once

// Per-class variational autoencoder over embedding vectors. Both towers are
// three affine maps with LeakyReLU between them; the encoder's last map emits
// the concatenated (mean, log-variance) of the latent posterior.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "cgil/errors.hpp"
#include "cgil/linalg.hpp"
#include "cgil/optim.hpp"
#include "cgil/rng.hpp"
#include "cgil/tensor.hpp"

namespace cgil {

struct VaeConfig {
  std::size_t hidden_dim = 512;
  std::size_t latent_dim = 256;
  Real learning_rate = 2e-4;
  std::size_t epochs = 500;
  std::size_t batch_size = 128;
  Real beta = 1.0;
  Real leaky_slope = 0.01;
  Real logvar_limit = 10.0;

  // Reduced widths for synthetic desk-scale benchmarks.
  static VaeConfig desk() {
    VaeConfig c;
    c.hidden_dim = 64;
    c.latent_dim = 16;
    return c;
  }
};

struct AffineLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }

  // PyTorch-style U(-1/sqrt(in), 1/sqrt(in)) initialisation.
  static AffineLayer uniform_init(std::size_t in, std::size_t out, Rng& rng, bool trainable) {
    const Real bound = 1.0 / std::sqrt(static_cast<Real>(in));
    std::vector<Real> w(out * in), b(out);
    for (auto& v : w) v = (2.0 * rng.uniform() - 1.0) * bound;
    for (auto& v : b) v = (2.0 * rng.uniform() - 1.0) * bound;
    return {Tensor::matrix(out, in, std::move(w), trainable), Tensor::vector(std::move(b), trainable)};
  }
};

// Three affine maps with LeakyReLU after the first two.
inline Tensor run_stack(const std::vector<AffineLayer>& layers, const Tensor& x, Real slope) {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = linear(h, layers[i].weight, layers[i].bias);
    if (i + 1 < layers.size()) h = leaky_relu(h, slope);
  }
  return h;
}

struct VaeDecoder {
  std::vector<AffineLayer> layers;
  Real leaky_slope = 0.01;

  std::size_t latent_dim() const { return layers.front().in_dim(); }
  std::size_t output_dim() const { return layers.back().out_dim(); }

  Tensor forward(const Tensor& z) const { return run_stack(layers, z, leaky_slope); }

  Matrix decode(const Matrix& z) const {
    auto out = forward(z.to_tensor());
    return Matrix(z.rows, output_dim(), out.to_vector());
  }
};

struct VaeEncoder {
  std::vector<AffineLayer> layers;
  Real leaky_slope = 0.01;

  std::size_t input_dim() const { return layers.front().in_dim(); }
  std::size_t latent_dim() const { return layers.back().out_dim() / 2; }

  Tensor forward(const Tensor& x) const { return run_stack(layers, x, leaky_slope); }
};

struct VaeModel {
  VaeEncoder encoder;
  VaeDecoder decoder;

  static VaeModel init(std::size_t dim, const VaeConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    VaeModel m;
    const std::size_t h = cfg.hidden_dim, z = cfg.latent_dim;
    m.encoder.leaky_slope = m.decoder.leaky_slope = cfg.leaky_slope;
    m.encoder.layers = {AffineLayer::uniform_init(dim, h, rng, true),
                        AffineLayer::uniform_init(h, h, rng, true),
                        AffineLayer::uniform_init(h, 2 * z, rng, true)};
    m.decoder.layers = {AffineLayer::uniform_init(z, h, rng, true),
                        AffineLayer::uniform_init(h, h, rng, true),
                        AffineLayer::uniform_init(h, dim, rng, true)};
    return m;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p;
    for (auto* stack : {&encoder.layers, &decoder.layers})
      for (auto& l : *stack) {
        p.push_back(l.weight);
        p.push_back(l.bias);
      }
    return p;
  }
};

// KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, averaged over rows.
inline Tensor kl_to_standard_normal(const Tensor& mu, const Tensor& logvar) {
  // -1/2 sum(1 + logvar - mu^2 - exp(logvar))
  auto inner = sub(sub(add_scalar(logvar, 1.0), mul(mu, mu)), exp(logvar));
  return scale(sum(inner), -0.5 / static_cast<Real>(mu.rows()));
}

struct ElboTerms {
  Tensor loss;
  Tensor reconstruction;
  Tensor kl;
};

// Negative ELBO on a batch: per-sample squared reconstruction error plus beta-weighted KL,
// averaged over the batch. `noise` [B x latent] is the reparameterisation draw.
inline ElboTerms elbo_loss(const VaeModel& model, const Tensor& x, const Tensor& noise, Real beta,
                           Real logvar_limit = 10.0) {
  const std::size_t z = model.encoder.latent_dim();
  auto stats = model.encoder.forward(x);
  auto mu = slice_cols(stats, 0, z);
  auto logvar = clamp(slice_cols(stats, z, z), -logvar_limit, logvar_limit);
  auto sigma = exp(scale(logvar, 0.5));
  auto latent = add(mu, mul(sigma, noise));
  auto recon = model.decoder.forward(latent);
  auto diff = sub(recon, x);
  auto rec = scale(sum(mul(diff, diff)), 1.0 / static_cast<Real>(x.rows()));
  auto kl = kl_to_standard_normal(mu, logvar);
  return {add(rec, scale(kl, beta)), rec, kl};
}

struct VaeTraining {
  VaeModel model;
  std::vector<Real> epoch_loss;  // sample-weighted mean loss per epoch
  Real initial_loss = 0.0;       // full-data loss before the first step, fixed noise
  Real final_loss = 0.0;         // same evaluation after training
};

inline Real evaluate_elbo(const VaeModel& model, const Matrix& features, const VaeConfig& cfg,
                          std::uint64_t seed) {
  Rng rng(seed);
  auto noise = Tensor::matrix(features.rows, cfg.latent_dim, rng.normals(features.rows * cfg.latent_dim));
  return elbo_loss(model, features.to_tensor(), noise, cfg.beta, cfg.logvar_limit).loss.item();
}

// Minimises the negative ELBO with Adam. Shuffling, noise and init all derive from `seed`.
inline VaeTraining train_vae(const Matrix& features, const VaeConfig& cfg, std::uint64_t seed) {
  if (features.rows == 0) throw InsufficientDataError("train_vae: no samples");
  if (cfg.batch_size == 0) throw DomainError("train_vae: batch size must be positive");
  const std::size_t n = features.rows, d = features.cols;

  VaeTraining out{VaeModel::init(d, cfg, derive_seed(seed, 0)), {}, 0.0, 0.0};
  const std::uint64_t eval_seed = derive_seed(seed, 1);
  out.initial_loss = evaluate_elbo(out.model, features, cfg, eval_seed);

  auto params = out.model.parameters();
  auto adam = AdamState::with_lr(cfg.learning_rate);
  Rng rng(derive_seed(seed, 2));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<Real> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    Real total = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, n - start);
      batch.resize(b * d);
      for (std::size_t i = 0; i < b; ++i)
        std::copy_n(features.row(order[start + i]).begin(), d, batch.begin() + i * d);
      auto x = Tensor::matrix(b, d, batch);
      auto noise = Tensor::matrix(b, cfg.latent_dim, rng.normals(b * cfg.latent_dim));
      auto terms = elbo_loss(out.model, x, noise, cfg.beta, cfg.logvar_limit);
      terms.loss.backward();
      adam_step(params, adam);
      total += terms.loss.item() * static_cast<Real>(b);
    }
    out.epoch_loss.push_back(total / static_cast<Real>(n));
  }
  out.final_loss = evaluate_elbo(out.model, features, cfg, eval_seed);
  return out;
}

// Frozen copy of a trained decoder; the encoder is not carried along.
inline VaeDecoder freeze_decoder(const VaeDecoder& dec) {
  VaeDecoder frozen;
  frozen.leaky_slope = dec.leaky_slope;
  for (auto& l : dec.layers) frozen.layers.push_back({l.weight.detach(), l.bias.detach()});
  return frozen;
}

// Decodes z ~ N(0, I). Pure function of (decoder, n, seed).
inline Matrix sample_vae(const VaeDecoder& dec, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DomainError("sample_vae: n must be at least 1");
  Rng rng(seed);
  Matrix z(n, dec.latent_dim(), rng.normals(n * dec.latent_dim()));
  return dec.decode(z);
}

}  // namespace cgil
