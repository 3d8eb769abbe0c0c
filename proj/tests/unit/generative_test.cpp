#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "cgil/binio.hpp"
#include "cgil/gaussian.hpp"
#include "cgil/gradcheck.hpp"
#include "cgil/store.hpp"
#include "cgil/vae.hpp"

using namespace cgil;

namespace {

Matrix cluster(std::size_t n, const std::vector<Real>& mean, Real spread, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(n, mean.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < mean.size(); ++j) m(i, j) = mean[j] + spread * rng.normal();
  return m;
}

Matrix stack(const Matrix& a, const Matrix& b) {
  Matrix m(a.rows + b.rows, a.cols);
  std::copy(a.data.begin(), a.data.end(), m.data.begin());
  std::copy(b.data.begin(), b.data.end(), m.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return m;
}

std::vector<Real> column_means(const Matrix& m) {
  std::vector<Real> mu(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) mu[j] += m(i, j) / static_cast<Real>(m.rows);
  return mu;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cgil_generative_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

VaeConfig tiny_vae() {
  VaeConfig c;
  c.hidden_dim = 16;
  c.latent_dim = 4;
  c.epochs = 3;
  c.batch_size = 32;
  return c;
}

}  // namespace

TEST(FitGaussian, SquareCornersMoments) {
  Matrix x(4, 2, {0, 0, 2, 0, 0, 2, 2, 2});
  auto g = fit_gaussian(x);
  EXPECT_EQ(g.mean, (std::vector<Real>{1, 1}));
  EXPECT_NEAR(g.covariance(0, 0), 1.0 + 1e-6, 1e-15);
  EXPECT_NEAR(g.covariance(1, 1), 1.0 + 1e-6, 1e-15);
  EXPECT_EQ(g.covariance(0, 1), 0.0);
}

TEST(FitGaussian, RepeatedPointGivesRegularizerOnly) {
  Matrix x(5, 3);
  for (std::size_t i = 0; i < 5; ++i) x.row(i)[0] = 4, x.row(i)[1] = -1, x.row(i)[2] = 0.5;
  auto g = fit_gaussian(x);
  EXPECT_EQ(g.mean, (std::vector<Real>{4, -1, 0.5}));
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) EXPECT_NEAR(g.covariance(a, b), a == b ? 1e-6 : 0.0, 1e-18);
}

TEST(FitGaussian, FactorReproducesSymmetricCovariance) {
  Rng rng(3);
  Matrix x(50, 6, rng.normals(300));
  auto g = fit_gaussian(x);
  auto ll = gram_lower(g.cholesky_factor);
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t b = 0; b < 6; ++b) {
      EXPECT_NEAR(ll(a, b), g.covariance(a, b), 1e-8);
      EXPECT_NEAR(g.covariance(a, b), g.covariance(b, a), 1e-10);
    }
}

TEST(FitGaussian, NeedsTwoSamples) { EXPECT_THROW(fit_gaussian(Matrix(1, 3)), InsufficientDataError); }

TEST(FitGaussian, LargeSampleMeanWithinFourSigma) {
  auto g = fit_gaussian(cluster(40, {1, -2, 0.5, 3}, 0.7, 5));
  const std::size_t n = 100000;
  auto s = sample_gaussian(g, n, 6);
  auto mu = column_means(s);
  for (std::size_t j = 0; j < 4; ++j) {
    const Real sigma = std::sqrt(g.covariance(j, j));
    EXPECT_LT(std::abs(mu[j] - g.mean[j]), 4.0 * sigma / std::sqrt(static_cast<Real>(n)));
  }
}

TEST(SampleGaussian, TinySpreadCollapsesOnMean) {
  Matrix x(3, 2, {1, 2, 1, 2, 1, 2});
  auto s = sample_gaussian(fit_gaussian(x), 100, 1);
  for (std::size_t i = 0; i < s.rows; ++i) {
    EXPECT_NEAR(s(i, 0), 1.0, 1e-2);
    EXPECT_NEAR(s(i, 1), 2.0, 1e-2);
  }
}

TEST(SampleGaussian, SameSeedSameMatrix) {
  auto g = fit_gaussian(cluster(20, {0, 0, 0}, 1.0, 2));
  EXPECT_EQ(sample_gaussian(g, 50, 9), sample_gaussian(g, 50, 9));
  EXPECT_NE(sample_gaussian(g, 50, 9), sample_gaussian(g, 50, 10));
}

TEST(SampleGaussian, IdentityCovarianceVariance) {
  auto g = GaussianModel::from_factor({0, 0, 0}, Matrix::identity(3));
  auto s = sample_gaussian(g, 10000, 4);
  auto mu = column_means(s);
  for (std::size_t j = 0; j < 3; ++j) {
    Real v = 0;
    for (std::size_t i = 0; i < s.rows; ++i) v += (s(i, j) - mu[j]) * (s(i, j) - mu[j]);
    v /= static_cast<Real>(s.rows - 1);
    EXPECT_GE(v, 0.9);
    EXPECT_LE(v, 1.1);
  }
}

TEST(FitMog, SingleComponentEqualsGaussian) {
  auto x = cluster(80, {2, -1, 0, 1, 3}, 0.5, 8);
  auto g = fit_gaussian(x);
  MoGOptions opt;
  opt.components = 1;
  auto m = fit_mog(x, opt, 1992).model;
  ASSERT_EQ(m.k(), 1u);
  EXPECT_NEAR(m.weights[0], 1.0, 1e-12);
  for (std::size_t a = 0; a < 5; ++a) {
    EXPECT_NEAR(m.components[0].mean[a], g.mean[a], 1e-6);
    for (std::size_t b = 0; b < 5; ++b)
      EXPECT_NEAR(m.components[0].covariance(a, b), g.covariance(a, b), 1e-6);
  }
}

TEST(FitMog, RecoversSeparatedClusters) {
  const Real sigma = 0.2;
  auto x = stack(cluster(150, {0, 0}, sigma, 1), cluster(150, {10 * sigma, 0}, sigma, 2));
  MoGOptions opt;
  opt.components = 2;
  auto m = fit_mog(x, opt, 1992).model;
  std::vector<std::vector<Real>> truth{column_means(cluster(150, {0, 0}, sigma, 1)),
                                       column_means(cluster(150, {10 * sigma, 0}, sigma, 2))};
  for (auto& t : truth) {
    Real best = 1e9;
    for (auto& c : m.components) best = std::min(best, std::hypot(c.mean[0] - t[0], c.mean[1] - t[1]));
    EXPECT_LT(best, 0.1);
  }
}

TEST(FitMog, LogLikelihoodNeverDecreases) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x = stack(cluster(60, {0, 0, 0}, 1.0, seed), cluster(40, {2, 1, -1}, 0.5, seed + 100));
    auto fit = fit_mog(x, MoGOptions{}, seed);
    for (std::size_t i = 1; i < fit.log_likelihood.size(); ++i)
      EXPECT_GE(fit.log_likelihood[i], fit.log_likelihood[i - 1] - 1e-9);
    Real wsum = 0;
    for (Real w : fit.model.weights) {
      EXPECT_GE(w, 0.0);
      wsum += w;
    }
    EXPECT_NEAR(wsum, 1.0, 1e-9);
  }
}

TEST(FitMog, FewerSamplesThanComponents) {
  MoGOptions opt;
  opt.components = 5;
  EXPECT_THROW(fit_mog(Matrix(4, 2), opt, 1), InsufficientDataError);
}

TEST(SampleMog, DegenerateWeightsUseOnlyFirstComponent) {
  MoGModel m;
  m.weights = {1.0, 0.0};
  m.components = {GaussianModel::from_factor({0, 0}, Matrix::identity(2, 0.01)),
                  GaussianModel::from_factor({100, 100}, Matrix::identity(2, 0.01))};
  auto s = sample_mog(m, 500, 3);
  for (std::size_t i = 0; i < s.rows; ++i) EXPECT_LT(std::abs(s(i, 0)), 1.0);
  EXPECT_EQ(sample_mog(m, 40, 8), sample_mog(m, 40, 8));
}

TEST(SampleMog, ComponentSharesFollowWeights) {
  MoGModel m;
  m.weights = {0.3, 0.7};
  m.components = {GaussianModel::from_factor({-10}, Matrix::identity(1)),
                  GaussianModel::from_factor({10}, Matrix::identity(1))};
  auto s = sample_mog(m, 20000, 12);
  std::size_t low = 0;
  for (std::size_t i = 0; i < s.rows; ++i) low += s(i, 0) < 0.0;
  EXPECT_NEAR(static_cast<Real>(low) / 20000.0, 0.3, 0.02);
}

TEST(Vae, KlOfStandardNormalIsZero) {
  auto kl = kl_to_standard_normal(Tensor::zeros({3, 4}), Tensor::zeros({3, 4}));
  EXPECT_EQ(kl.item(), 0.0);
}

TEST(Vae, LayerShapes) {
  VaeConfig cfg;
  auto m = VaeModel::init(10, cfg, 1);
  ASSERT_EQ(m.encoder.layers.size(), 3u);
  ASSERT_EQ(m.decoder.layers.size(), 3u);
  EXPECT_EQ(m.encoder.input_dim(), 10u);
  EXPECT_EQ(m.encoder.layers[0].out_dim(), 512u);
  EXPECT_EQ(m.encoder.layers.back().out_dim(), 2 * 256u);
  EXPECT_EQ(m.decoder.latent_dim(), 256u);
  EXPECT_EQ(m.decoder.output_dim(), 10u);
}

TEST(Vae, ElboGradientsMatchFiniteDifferences) {
  VaeConfig cfg;
  cfg.hidden_dim = 6;
  cfg.latent_dim = 3;
  auto m = VaeModel::init(8, cfg, 5);
  Rng rng(6);
  auto x = Tensor::matrix(4, 8, rng.normals(32));
  auto noise = Tensor::matrix(4, 3, rng.normals(12));
  auto rep = grad_check([&] { return elbo_loss(m, x, noise, 1.0).loss; }, m.parameters(), 1e-4, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(Vae, TrainingLowersLossAndDecodesNearTheCluster) {
  std::vector<Real> mean(16);
  Rng mr(1992);
  for (auto& v : mean) v = mr.normal();
  auto x = cluster(200, mean, 0.1, 1992);
  auto cfg = VaeConfig::desk();
  auto tr = train_vae(x, cfg, 1992);
  EXPECT_LT(tr.final_loss, tr.initial_loss);
  EXPECT_LT(tr.epoch_loss.back(), tr.epoch_loss.front());
  auto mu = column_means(sample_vae(freeze_decoder(tr.model.decoder), 2000, 7));
  Real dist = 0;
  for (std::size_t j = 0; j < 16; ++j) dist += (mu[j] - mean[j]) * (mu[j] - mean[j]);
  EXPECT_LT(std::sqrt(dist), 0.5);
}

TEST(Vae, EmptyFeaturesRejected) { EXPECT_THROW(train_vae(Matrix(0, 4), tiny_vae(), 1), InsufficientDataError); }

TEST(Vae, ZeroDecoderDecodesToZero) {
  auto m = VaeModel::init(5, tiny_vae(), 2);
  auto dec = freeze_decoder(m.decoder);
  for (auto& l : dec.layers) {
    std::fill(l.weight.mutable_data().begin(), l.weight.mutable_data().end(), 0.0);
    std::fill(l.bias.mutable_data().begin(), l.bias.mutable_data().end(), 0.0);
  }
  auto s = sample_vae(dec, 10, 3);
  for (Real v : s.data) EXPECT_EQ(v, 0.0);
}

TEST(Vae, FrozenDecoderIsDetachedAndSamplesDeterministically) {
  auto tr = train_vae(cluster(40, {1, 2, 3}, 0.2, 1), tiny_vae(), 4);
  auto dec = freeze_decoder(tr.model.decoder);
  for (auto& l : dec.layers) {
    EXPECT_FALSE(l.weight.requires_grad());
    EXPECT_FALSE(l.weight.same_node(tr.model.decoder.layers[0].weight));
  }
  EXPECT_EQ(sample_vae(dec, 30, 5), sample_vae(dec, 30, 5));
}

TEST(Store, GaussianRoundTripIsBitExactAtF32) {
  GeneratorStore s(GeneratorKind::kGaussian, 3);
  for (std::uint32_t id : {0u, 1u, 2u}) s.add(id, fit_gaussian(cluster(30, {1.0 * id, 0, -1}, 0.3, id)));
  auto p = temp_path("gauss.store");
  save_store(s, p);
  auto loaded = load_store(p, 3);
  EXPECT_EQ(loaded.class_ids(), (std::vector<std::uint32_t>{0, 1, 2}));
  for (auto id : loaded.class_ids()) {
    auto& a = std::get<GaussianModel>(s.at(id));
    auto& b = std::get<GaussianModel>(loaded.at(id));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(b.mean[j], static_cast<Real>(static_cast<float>(a.mean[j])));
    for (std::size_t j = 0; j < 9; ++j)
      EXPECT_EQ(b.cholesky_factor.data[j], static_cast<Real>(static_cast<float>(a.cholesky_factor.data[j])));
  }
  auto p2 = temp_path("gauss2.store");
  save_store(loaded, p2);
  EXPECT_EQ(read_file_bytes(p), read_file_bytes(p2));
}

TEST(Store, VaeAndMogRoundTrips) {
  GeneratorStore v(GeneratorKind::kVae, 3);
  auto tr = train_vae(cluster(40, {1, 2, 3}, 0.2, 1), tiny_vae(), 4);
  v.add(7, freeze_decoder(tr.model.decoder));
  auto pv = temp_path("vae.store");
  save_store(v, pv);
  auto lv = load_store(pv);
  auto& a = std::get<VaeDecoder>(v.at(7));
  auto& b = std::get<VaeDecoder>(lv.at(7));
  ASSERT_EQ(a.layers.size(), b.layers.size());
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    for (std::size_t j = 0; j < a.layers[l].weight.numel(); ++j)
      EXPECT_EQ(b.layers[l].weight[j], static_cast<Real>(static_cast<float>(a.layers[l].weight[j])));

  GeneratorStore m(GeneratorKind::kMoG, 2);
  MoGOptions opt;
  opt.components = 2;
  m.add(1, fit_mog(cluster(50, {0, 1}, 0.5, 3), opt, 4).model);
  auto pm = temp_path("mog.store");
  save_store(m, pm);
  auto lm = load_store(pm);
  EXPECT_EQ(std::get<MoGModel>(lm.at(1)).k(), 2u);
  auto pm2 = temp_path("mog2.store");
  save_store(lm, pm2);
  EXPECT_EQ(read_file_bytes(pm), read_file_bytes(pm2));
}

TEST(Store, CorruptFilesFailWithOffsets) {
  GeneratorStore s(GeneratorKind::kGaussian, 2);
  s.add(0, fit_gaussian(cluster(10, {0, 0}, 1.0, 1)));
  auto p = temp_path("corrupt.store");
  save_store(s, p);
  auto bytes = read_file_bytes(p);

  auto bad = bytes;
  bad[0] = 'X';
  write_file_atomic(p, bad);
  try {
    load_store(p);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }

  bad = bytes;
  bad.resize(bytes.size() - 3);
  write_file_atomic(p, bad);
  try {
    load_store(p);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_GT(e.offset(), 16u);
    EXPECT_LT(e.offset(), bytes.size());
  }

  write_file_atomic(p, bytes);
  try {
    load_store(p, 5);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 5"), std::string::npos);
  }
}

TEST(Store, AppendOnlyAndLookup) {
  GeneratorStore s(GeneratorKind::kGaussian, 2);
  s.add(0, fit_gaussian(cluster(10, {0, 0}, 1.0, 1)));
  EXPECT_THROW(s.add(0, fit_gaussian(cluster(10, {0, 0}, 1.0, 2))), StateError);
  EXPECT_THROW(s.add(1, fit_gaussian(cluster(10, {0, 0, 0}, 1.0, 2))), StateError);
  EXPECT_THROW(sample_decoder(s, 9, 10, 1), LookupError);
  EXPECT_EQ(sample_decoder(s, 0, 10, 1), sample_decoder(s, 0, 10, 1));
}
