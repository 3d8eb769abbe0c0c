// Acceptance suite. One PASS/FAIL line per criterion; exits nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cgil/alignment.hpp"
#include "cgil/benchmark.hpp"
#include "cgil/embedding_file.hpp"
#include "cgil/experiment.hpp"
#include "cgil/gradcheck.hpp"
#include "cgil/report.hpp"

using namespace cgil;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::uint64_t kSeeds[] = {1992, 1996, 1997};

// Tolerances and budgets.
constexpr Real kGradStep = 1e-4;
constexpr Real kGradTol = 1e-4;
constexpr Real kMetricTol = 1e-12;
constexpr Real kEmMonotoneTol = 1e-9;
constexpr Real kEmGaussianTol = 1e-6;
constexpr Real kVaeMeanTol = 0.5;
constexpr Real kFaaFloor = 0.90;
constexpr Real kJointGap = 0.02;
constexpr Real kAblationSlack = 0.02;
constexpr double kGradBudget = 10, kMetricBudget = 1, kEmBudget = 10, kVaeBudget = 30;
constexpr double kEndToEndBudget = 300, kAblationBudget = 600;

int failures = 0;

void verdict(const std::string& id, bool ok, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", id.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void info(const std::string& text) {
  std::printf("     %s\n", text.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Runs `body`; an escaping exception counts as a failure of the criterion.
void criterion(const std::string& id, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    verdict(id, false, std::string("exception: ") + e.what());
  }
}

Matrix cluster(std::size_t n, const std::vector<Real>& mean, Real spread, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(n, mean.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < mean.size(); ++j) m(i, j) = mean[j] + spread * rng.normal();
  return m;
}

TowerConfig tower16() {
  TowerConfig c;
  c.token_dim = c.output_dim = 16;
  c.vocab_capacity = 64;
  return c;
}

std::vector<char> entry_bytes(const GeneratorStore& s, std::uint32_t id) {
  return encode_store_blob({s.kind(), {detail::entry_blob(id, s.at(id))}, {}});
}

Real mean_of(const std::vector<Real>& v) {
  Real s = 0;
  for (Real x : v) s += x;
  return s / static_cast<Real>(v.size());
}

void gradient_checks() {
  const auto t0 = Clock::now();
  Rng rng(1992);
  std::vector<std::pair<std::string, GradCheckReport>> reps;

  VaeConfig vc;
  vc.hidden_dim = 12;
  vc.latent_dim = 4;
  auto vae = VaeModel::init(16, vc, 1);
  auto x = Tensor::matrix(6, 16, rng.normals(96));
  auto noise = Tensor::matrix(6, 4, rng.normals(24));
  reps.emplace_back("elbo", grad_check([&] { return elbo_loss(vae, x, noise, 1.0).loss; }, vae.parameters(),
                                       kGradStep, kGradTol));

  auto u = Tensor::vector(rng.normals(16), true), v = Tensor::vector(rng.normals(16), true);
  reps.emplace_back("cosine", grad_check([&] { return cosine_similarity(u, v); }, {u, v}, kGradStep, kGradTol));

  FrozenTextTower tower(tower16());
  ClassCatalog catalog;
  catalog.register_class(0, "tabby cat");
  catalog.register_class(1, "sports car");
  catalog.register_class(2, "oak tree");
  PromptParams params(PromptConfig{}, 16, 16, 3);
  std::vector<std::uint32_t> ids{0, 1, 2};
  for (auto id : ids) params.add_class(id);
  auto w = Tensor::vector(rng.normals(16));
  reps.emplace_back("encode_prompt",
                    grad_check([&] { return sum(mul(encode_prompt(assemble_prompt(1, params, tower, catalog), tower), w)); },
                               {params.context(1)}, kGradStep, kGradTol));

  auto feats = Tensor::matrix(9, 16, rng.normals(144));
  std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2, 0, 1, 2};
  reps.emplace_back("alignment_ce", grad_check(
      [&] {
        return softmax_cross_entropy(alignment_logits(feats, encode_class_prompts(ids, params, tower, catalog), 0.5),
                                     labels);
      },
      params.trainable_leaves(), kGradStep, kGradTol));

  const double secs = since(t0);
  bool ok = secs < kGradBudget;
  std::string detail;
  for (auto& [name, r] : reps) {
    ok = ok && r.passed;
    detail += fmt("%s %.2e (%zu) ", name.c_str(), r.max_rel_error, r.checked);
  }
  verdict("C1 gradient check", ok, detail + fmt("tol %.0e, %.1fs/%.0fs", kGradTol, secs, kGradBudget));
}

void metric_oracles() {
  const auto t0 = Clock::now();
  Rng rng(1992);
  Real worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 2 + rng.index(9);
    AccuracyMatrix m(T);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < T; ++i) m.set(t, i, rng.uniform());
    Real outer = 0, last = 0;
    for (std::size_t t = 1; t <= T - 1; ++t) {
      Real inner = 0;
      for (std::size_t i = t + 1; i <= T; ++i) inner += m.at(t - 1, i - 1);
      outer += inner / static_cast<Real>(T - t);
    }
    for (std::size_t i = 1; i <= T; ++i) last += m.at(T - 1, i - 1);
    worst = std::max({worst, std::abs(ci_transfer(m) - outer / static_cast<Real>(T - 1)),
                      std::abs(faa(m) - last / static_cast<Real>(T))});
  }
  AccuracyMatrix three(3);
  three.set(0, 1, 0.5);
  three.set(0, 2, 0.7);
  three.set(1, 2, 0.9);
  const Real worked = ci_transfer(three);
  const double secs = since(t0);
  verdict("C2 metric oracles", worst <= kMetricTol && std::abs(worked - 0.75) <= kMetricTol && secs < kMetricBudget,
          fmt("max deviation %.2e over 100 matrices, worked case %.15g, %.3fs/%.0fs", worst, worked, secs,
              kMetricBudget));
}

void em_checks() {
  const auto t0 = Clock::now();
  Real worst_drop = 0;
  std::size_t iterations = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Matrix x(150, 4);
    for (std::size_t i = 0; i < x.rows; ++i) {
      const Real shift = static_cast<Real>(i % 3) * 2.0;
      for (std::size_t j = 0; j < 4; ++j) x(i, j) = shift * (j % 2 ? 1 : -1) + rng.normal();
    }
    auto fit = fit_mog(x, MoGOptions{}, seed);
    iterations += fit.log_likelihood.size();
    for (std::size_t i = 1; i < fit.log_likelihood.size(); ++i)
      worst_drop = std::max(worst_drop, fit.log_likelihood[i - 1] - fit.log_likelihood[i]);
  }
  auto x = cluster(120, {1, -2, 0.5, 3, 0}, 0.7, 1992);
  auto g = fit_gaussian(x);
  MoGOptions one;
  one.components = 1;
  auto m = fit_mog(x, one, 1992).model;
  Real dev = 0;
  for (std::size_t a = 0; a < 5; ++a) {
    dev = std::max(dev, std::abs(m.components[0].mean[a] - g.mean[a]));
    for (std::size_t b = 0; b < 5; ++b)
      dev = std::max(dev, std::abs(m.components[0].covariance(a, b) - g.covariance(a, b)));
  }
  const double secs = since(t0);
  verdict("C3 EM monotone and K=1", worst_drop <= kEmMonotoneTol && dev <= kEmGaussianTol && secs < kEmBudget,
          fmt("largest log-likelihood drop %.2e over 20 runs (%zu iterations), K=1 deviation %.2e, %.2fs/%.0fs",
              std::max<Real>(worst_drop, 0), iterations, dev, secs, kEmBudget));
}

void vae_check() {
  const auto t0 = Clock::now();
  std::vector<Real> mean(16);
  Rng mr(1992);
  for (auto& v : mean) v = mr.normal();
  auto x = cluster(200, mean, 0.1, 1992);
  auto tr = train_vae(x, VaeConfig::desk(), 1992);
  auto s = sample_vae(freeze_decoder(tr.model.decoder), 2000, 7);
  Real dist = 0;
  for (std::size_t j = 0; j < 16; ++j) {
    Real mu = 0;
    for (std::size_t i = 0; i < s.rows; ++i) mu += s(i, j) / static_cast<Real>(s.rows);
    dist += (mu - mean[j]) * (mu - mean[j]);
  }
  dist = std::sqrt(dist);
  const double secs = since(t0);
  verdict("C4 VAE fit at d=16", tr.final_loss < tr.initial_loss && dist < kVaeMeanTol && secs < kVaeBudget,
          fmt("loss %.4g -> %.4g, sample mean distance %.3f (< %.1f), %.1fs/%.0fs", tr.initial_loss, tr.final_loss,
              dist, kVaeMeanTol, secs, kVaeBudget));
}

struct Outcome {
  Real faa = 0;
  Real cit = 0;
};

Outcome outcome(const RunReport& r) { return {r.final_average_accuracy(), r.class_incremental_transfer().value()}; }

void end_to_end_and_ablation() {
  ExperimentConfig cfg;
  std::map<std::string, std::vector<Outcome>> runs;
  const auto t0 = Clock::now();
  try {
    for (auto seed : kSeeds) {
      SyntheticSpec spec;
      spec.seed = seed;
      auto bench = make_synthetic_benchmark(spec);
      runs["cgil"].push_back(outcome(run_experiment(bench, cfg, seed)));
      runs["joint"].push_back(outcome(run_baseline(bench, BaselineKind::kJoint, cfg, seed)));
      runs["finetune"].push_back(outcome(run_baseline(bench, BaselineKind::kFinetune, cfg, seed)));
      runs["zeroshot"].push_back(outcome(run_baseline(bench, BaselineKind::kZeroshot, cfg, seed)));
      info(fmt("seed %llu: FAA cgil %.4f joint %.4f finetune %.4f zeroshot %.4f | CI-T cgil %.4f zeroshot %.4f",
               static_cast<unsigned long long>(seed), runs["cgil"].back().faa, runs["joint"].back().faa,
               runs["finetune"].back().faa, runs["zeroshot"].back().faa, runs["cgil"].back().cit,
               runs["zeroshot"].back().cit));
    }
  } catch (const std::exception& e) {
    verdict("C5 end-to-end", false, std::string("exception: ") + e.what());
    verdict("C6 generator ablation", false, "end-to-end runs did not complete");
    return;
  }
  const double e2e_secs = since(t0);
  auto mean = [&](const std::string& k, bool cit) {
    std::vector<Real> v;
    for (auto& o : runs[k]) v.push_back(cit ? o.cit : o.faa);
    return mean_of(v);
  };

  Real min_faa = 1;
  for (auto& o : runs["cgil"]) min_faa = std::min(min_faa, o.faa);
  const bool in_budget = e2e_secs < kEndToEndBudget;
  verdict("C5a FAA floor", min_faa >= kFaaFloor, fmt("min over seeds %.4f (>= %.2f)", min_faa, kFaaFloor));
  verdict("C5b beats fine-tune", mean("cgil", false) >= mean("finetune", false),
          fmt("mean FAA %.4f vs %.4f", mean("cgil", false), mean("finetune", false)));
  verdict("C5c near joint", mean("joint", false) - mean("cgil", false) <= kJointGap,
          fmt("joint %.4f - cgil %.4f = %.4f (<= %.2f)", mean("joint", false), mean("cgil", false),
              mean("joint", false) - mean("cgil", false), kJointGap));
  verdict("C5d CI-T over zero-shot", mean("cgil", true) >= mean("zeroshot", true),
          fmt("mean CI-T %.4f vs %.4f", mean("cgil", true), mean("zeroshot", true)));
  verdict("C5e end-to-end time", in_budget, fmt("%.1fs/%.0fs for 3 seeds x 4 methods", e2e_secs, kEndToEndBudget));

  const auto t1 = Clock::now();
  auto gcfg = cfg;
  gcfg.method.generator = GeneratorKind::kGaussian;
  std::vector<Real> gauss;
  try {
    for (auto seed : kSeeds) {
      SyntheticSpec spec;
      spec.seed = seed;
      gauss.push_back(run_experiment(make_synthetic_benchmark(spec), gcfg, seed).final_average_accuracy());
      info(fmt("seed %llu: FAA gaussian %.4f", static_cast<unsigned long long>(seed), gauss.back()));
    }
  } catch (const std::exception& e) {
    verdict("C6 generator ablation", false, std::string("exception: ") + e.what());
    return;
  }
  const double abl_secs = e2e_secs + since(t1);
  const Real vae = mean("cgil", false), g = mean_of(gauss);
  verdict("C6 generator ablation", vae >= g - kAblationSlack && abl_secs < kAblationBudget,
          fmt("mean FAA vae %.4f vs gaussian %.4f (slack %.2f), %.1fs/%.0fs", vae, g, kAblationSlack, abl_secs,
              kAblationBudget));
}

void replay_contract() {
  SyntheticSpec spec;
  auto bench = make_synthetic_benchmark(spec);
  ExperimentConfig cfg;
  auto tower = std::make_shared<const FrozenTextTower>(cfg.tower);
  auto catalog = make_catalog(bench);
  EngineState st(tower, catalog, cfg.method, bench.dim, 1992);
  const auto tasks = task_stream(bench, 1992);
  std::map<std::uint32_t, std::vector<char>> frozen;
  std::size_t changed = 0, released = 0, checks = 0;
  bool tower_ok = true;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    auto data = std::make_shared<const TaskData>(detail::task_data(bench, tasks[t]));
    std::weak_ptr<const TaskData> watch = data;
    process_task(st, std::move(data));
    released += watch.expired();
    for (auto& [id, bytes] : frozen) {
      ++checks;
      changed += entry_bytes(st.store, id) != bytes;
    }
    for (auto id : tasks[t]) frozen[id] = entry_bytes(st.store, id);
    tower_ok = tower_ok && tower->checksum() == tower->construction_checksum();
  }
  verdict("C7 replay contract", changed == 0 && released == tasks.size() && tower_ok,
          fmt("%zu/%zu prior entries unchanged, %zu/%zu task buffers released, tower checksum %s", checks - changed,
              checks, released, tasks.size(), tower_ok ? "unchanged" : "CHANGED"));
}

void determinism_and_formats() {
  SyntheticSpec spec;
  auto bench = make_synthetic_benchmark(spec);
  ExperimentConfig cfg;
  const auto h1 = report_json(run_experiment(bench, cfg, 1992))["deterministic_hash"].get<std::string>();
  const auto h2 = report_json(run_experiment(bench, cfg, 1992))["deterministic_hash"].get<std::string>();

  const auto dir = fs::temp_directory_path() / "cgil_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_benchmark(bench, dir / "bench");
  auto loaded = load_benchmark(dir / "bench");
  bool emb_ok = loaded.train.labels == bench.train.labels;
  for (std::size_t i = 0; emb_ok && i < bench.train.features.data.size(); ++i)
    emb_ok = loaded.train.features.data[i] == static_cast<Real>(static_cast<float>(bench.train.features.data[i]));
  write_embedding_file(dir / "again.emb", loaded.train, load_embedding_file(dir / "bench" / "train.emb").manifest);
  emb_ok = emb_ok && read_file_bytes(dir / "again.emb") == read_file_bytes(dir / "bench" / "train.emb");

  GeneratorStore store(GeneratorKind::kVae, bench.dim);
  VaeConfig vc = VaeConfig::desk();
  vc.epochs = 5;
  for (std::uint32_t id : {0u, 1u}) {
    const std::vector<std::uint32_t> one{id};
    auto part = select_classes(bench.train, one);
    store.add(id, freeze_decoder(train_vae(part.features, vc, id).model.decoder));
  }
  save_store(store, dir / "a.store");
  save_store(load_store(dir / "a.store", bench.dim), dir / "b.store");
  const bool store_ok = read_file_bytes(dir / "a.store") == read_file_bytes(dir / "b.store");

  std::vector<std::string> corrupt;
  auto expect_offset = [&](const std::string& what, const std::function<void()>& f, std::size_t offset) {
    try {
      f();
      corrupt.push_back(what + " accepted");
    } catch (const FormatError& e) {
      if (e.offset() != offset) corrupt.push_back(what + fmt(" at %zu, expected %zu", e.offset(), offset));
    }
  };
  auto emb = encode_embeddings(bench.train);
  auto bad = emb;
  bad[1] ^= 1;
  expect_offset("embedding magic", [&] { decode_embeddings(bad); }, 0);
  bad = emb;
  bad.resize(bad.size() - 3);
  const std::size_t record = 4 + 4 * bench.dim;
  expect_offset("embedding truncation", [&] { decode_embeddings(bad); }, 16 + (bench.train.size() - 1) * record);
  auto st = read_file_bytes(dir / "a.store");
  st[0] ^= 1;
  expect_offset("store magic", [&] { decode_store_blob(st); }, 0);

  std::string detail = fmt("report hash %s/%s, embedding round-trip %s, store round-trip %s", h1.c_str(), h2.c_str(),
                           emb_ok ? "exact" : "DIFFERS", store_ok ? "exact" : "DIFFERS");
  for (auto& c : corrupt) detail += "; " + c;
  verdict("C8 determinism and formats", h1 == h2 && emb_ok && store_ok && corrupt.empty(), detail);
}

}  // namespace

int main() {
  criterion("C1 gradient check", gradient_checks);
  criterion("C2 metric oracles", metric_oracles);
  criterion("C3 EM monotone and K=1", em_checks);
  criterion("C4 VAE fit at d=16", vae_check);
  criterion("C5 end-to-end", end_to_end_and_ablation);
  criterion("C7 replay contract", replay_contract);
  criterion("C8 determinism and formats", determinism_and_formats);
  std::printf("%s: %d failing\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
