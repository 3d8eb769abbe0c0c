#pragma once

// Replay-driven prompt alignment and the per-task two-phase step: fit one
// generator per new class, then tune prompts on features sampled from every
// stored generator.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "cgil/errors.hpp"
#include "cgil/gaussian.hpp"
#include "cgil/linalg.hpp"
#include "cgil/metrics.hpp"
#include "cgil/optim.hpp"
#include "cgil/rng.hpp"
#include "cgil/store.hpp"
#include "cgil/tensor.hpp"
#include "cgil/text_tower.hpp"
#include "cgil/vae.hpp"

namespace cgil {

struct SyntheticDataset {
  Matrix features;
  std::vector<std::uint32_t> labels;
  std::size_t per_class_count = 0;

  std::size_t size() const { return labels.size(); }
};

// per_class draws from every stored generator, label-tagged and shuffled.
inline SyntheticDataset build_synthetic_dataset(const GeneratorStore& store, std::size_t per_class,
                                                std::uint64_t seed) {
  if (store.empty()) throw StateError("cannot build a synthetic dataset from an empty store");
  if (per_class == 0) throw DomainError("synthetic per-class count must be positive");
  const std::size_t d = store.dim(), n = per_class * store.size();
  Matrix pooled(n, d);
  std::vector<std::uint32_t> pooled_labels;
  pooled_labels.reserve(n);
  std::size_t row = 0;
  for (auto& [id, entry] : store.entries()) {
    auto draws = sample_entry(entry, per_class, derive_seed(seed, kStreamSampling, id));
    std::copy(draws.data.begin(), draws.data.end(), pooled.data.begin() + static_cast<std::ptrdiff_t>(row * d));
    pooled_labels.insert(pooled_labels.end(), per_class, id);
    row += per_class;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, kStreamShuffle));
  std::shuffle(order.begin(), order.end(), rng.engine());

  SyntheticDataset ds{Matrix(n, d), std::vector<std::uint32_t>(n), per_class};
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(pooled.row(order[i]).begin(), d, ds.features.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    ds.labels[i] = pooled_labels[order[i]];
  }
  return ds;
}

struct AlignConfig {
  Real learning_rate = 0.03;
  std::size_t batch_size = 128;
  std::size_t epochs = 2;
  Real temperature = 0.01;
  bool regenerate_per_epoch = false;
  std::size_t synthetic_per_class = 2000;

  void validate() const {
    if (!(learning_rate > 0.0)) throw DomainError("alignment learning rate must be positive");
    if (batch_size == 0) throw DomainError("alignment batch size must be positive");
    if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
    if (synthetic_per_class == 0) throw DomainError("synthetic per-class count must be positive");
  }
};

struct AlignEpoch {
  Real loss = 0.0;      // sample-weighted mean cross-entropy
  Real accuracy = 0.0;  // training accuracy before each batch's update
};

struct AlignLog {
  std::vector<AlignEpoch> epochs;
  std::size_t steps = 0;
  std::size_t classes = 0;
  std::size_t samples = 0;
};

// One prompt embedding per class, stacked [C x d_txt]; differentiable in the prompt leaves.
inline Tensor encode_class_prompts(std::span<const std::uint32_t> classes, const PromptParams& params,
                                   const FrozenTextTower& tower, const ClassCatalog& catalog) {
  std::vector<Tensor> seqs;
  seqs.reserve(classes.size());
  for (auto id : classes) seqs.push_back(assemble_prompt(id, params, tower, catalog).tokens);
  return tower.encode_batch(seqs);
}

// logits[b][c] = cos(feature_b, prompt_c) / tau
inline Tensor alignment_logits(const Tensor& features, const Tensor& prompts, Real temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  return scale(matmul(normalize_rows(features), transpose(normalize_rows(prompts))), 1.0 / temperature);
}

namespace detail {

// Label -> position in `classes`, or a state error for labels with no prompt.
inline std::vector<std::size_t> label_slots(std::span<const std::uint32_t> labels,
                                            std::span<const std::uint32_t> classes,
                                            const PromptParams& params) {
  std::map<std::uint32_t, std::size_t> slot;
  for (std::size_t c = 0; c < classes.size(); ++c) slot.emplace(classes[c], c);
  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = slot.find(labels[i]);
    const bool has_row = uses_class_context(params.mode()) ? params.has_context(labels[i])
                                                           : params.has_class(labels[i]);
    if (it == slot.end() || !has_row)
      throw StateError("label " + std::to_string(labels[i]) + " has no prompt row");
    out[i] = it->second;
  }
  return out;
}

inline AlignEpoch align_epoch(const Matrix& features, std::span<const std::size_t> slots,
                              std::span<const std::uint32_t> classes, PromptParams& params,
                              const FrozenTextTower& tower, const ClassCatalog& catalog,
                              const AlignConfig& cfg, std::vector<Tensor>& leaves, AdamState& adam,
                              Rng& rng, std::size_t& steps) {
  const std::size_t n = features.rows, d = features.cols;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  AlignEpoch ep;
  std::size_t correct = 0;
  std::vector<Real> batch;
  std::vector<std::size_t> targets;
  for (std::size_t start = 0; start < n; start += cfg.batch_size) {
    const std::size_t b = std::min(cfg.batch_size, n - start);
    batch.resize(b * d);
    targets.resize(b);
    for (std::size_t i = 0; i < b; ++i) {
      std::copy_n(features.row(order[start + i]).begin(), d, batch.begin() + static_cast<std::ptrdiff_t>(i * d));
      targets[i] = slots[order[start + i]];
    }
    auto prompts = encode_class_prompts(classes, params, tower, catalog);
    auto logits = alignment_logits(Tensor::matrix(b, d, batch), prompts, cfg.temperature);
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes.size(); ++c)
        if (logits.at(i, c) > logits.at(i, best)) best = c;
      correct += best == targets[i];
    }
    auto loss = softmax_cross_entropy(logits, targets);
    ep.loss += loss.item() * static_cast<Real>(b);
    if (!leaves.empty()) {
      loss.backward();
      adam_step(leaves, adam);
    }
    ++steps;
  }
  ep.loss /= static_cast<Real>(n);
  ep.accuracy = static_cast<Real>(correct) / static_cast<Real>(n);
  return ep;
}

}  // namespace detail

// Tunes every trainable prompt leaf by cross-entropy over cosine logits. The
// softmax spans `classes` (default: every class registered in `params`).
inline AlignLog align_prompts(const Matrix& features, std::span<const std::uint32_t> labels,
                              PromptParams& params, const FrozenTextTower& tower,
                              const ClassCatalog& catalog, const AlignConfig& cfg,
                              std::uint64_t seed, std::vector<std::uint32_t> classes = {}) {
  cfg.validate();
  if (features.rows != labels.size())
    throw ShapeError(std::to_string(features.rows) + " features for " + std::to_string(labels.size()) +
                     " labels");
  if (features.rows == 0) throw InsufficientDataError("alignment on an empty dataset");
  if (classes.empty()) classes = params.classes();
  std::sort(classes.begin(), classes.end());
  const auto slots = detail::label_slots(labels, classes, params);

  AlignLog log{{}, 0, classes.size(), features.rows};
  auto leaves = params.trainable_leaves();
  auto adam = AdamState::with_lr(cfg.learning_rate);
  Rng rng(derive_seed(seed, kStreamBatching));
  for (std::size_t e = 0; e < cfg.epochs; ++e)
    log.epochs.push_back(detail::align_epoch(features, slots, classes, params, tower, catalog, cfg,
                                             leaves, adam, rng, log.steps));
  return log;
}

inline AlignLog align_prompts(const SyntheticDataset& ds, PromptParams& params,
                              const FrozenTextTower& tower, const ClassCatalog& catalog,
                              const AlignConfig& cfg, std::uint64_t seed) {
  return align_prompts(ds.features, ds.labels, params, tower, catalog, cfg, seed);
}

// Alignment on replayed features; with regenerate_per_epoch a fresh synthetic
// dataset is drawn before every epoch, otherwise one dataset serves all epochs.
inline AlignLog align_on_replay(const GeneratorStore& store, PromptParams& params,
                                const FrozenTextTower& tower, const ClassCatalog& catalog,
                                const AlignConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (!cfg.regenerate_per_epoch) {
    auto ds = build_synthetic_dataset(store, cfg.synthetic_per_class, derive_seed(seed, kStreamSampling));
    return align_prompts(ds, params, tower, catalog, cfg, seed);
  }
  auto classes = params.classes();
  std::sort(classes.begin(), classes.end());
  AlignLog log{{}, 0, classes.size(), 0};
  auto leaves = params.trainable_leaves();
  auto adam = AdamState::with_lr(cfg.learning_rate);
  Rng rng(derive_seed(seed, kStreamBatching));
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    auto ds = build_synthetic_dataset(store, cfg.synthetic_per_class, derive_seed(seed, kStreamSampling, e));
    const auto slots = detail::label_slots(ds.labels, classes, params);
    log.samples = ds.size();
    log.epochs.push_back(detail::align_epoch(ds.features, slots, classes, params, tower, catalog, cfg,
                                             leaves, adam, rng, log.steps));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Per-task engine

struct MethodConfig {
  GeneratorKind generator = GeneratorKind::kVae;
  VaeConfig vae = VaeConfig::desk();
  MoGOptions mog;
  GaussianOptions gaussian;
  PromptConfig prompt;
  AlignConfig align;
};

// One task's real training features. Handed to process_task and released there.
struct TaskData {
  std::vector<std::uint32_t> class_ids;
  Matrix features;
  std::vector<std::uint32_t> labels;
};

struct GeneratorFitLog {
  std::uint32_t class_id = 0;
  std::size_t samples = 0;
  Real initial_loss = 0.0;  // VAE: negative ELBO; MoG: mean log-likelihood trace ends
  Real final_loss = 0.0;
};

struct TaskLog {
  std::size_t task = 0;
  std::vector<std::uint32_t> classes;
  std::vector<GeneratorFitLog> fits;
  AlignLog align;
  double fit_seconds = 0.0;
  double align_seconds = 0.0;
};

struct EngineState {
  std::shared_ptr<const FrozenTextTower> tower;
  std::shared_ptr<const ClassCatalog> catalog;
  MethodConfig config;
  std::uint64_t seed = 0;
  GeneratorStore store;
  PromptParams params;
  std::vector<std::uint32_t> seen;  // in arrival order
  std::vector<TaskLog> logs;

  EngineState(std::shared_ptr<const FrozenTextTower> t, std::shared_ptr<const ClassCatalog> c,
              MethodConfig cfg, std::size_t feature_dim, std::uint64_t s)
      : tower(std::move(t)), catalog(std::move(c)), config(std::move(cfg)), seed(s),
        store(config.generator, feature_dim),
        params(config.prompt, tower->token_dim(), tower->output_dim(), s) {
    config.align.validate();
  }

  bool has_seen(std::uint32_t id) const {
    return std::find(seen.begin(), seen.end(), id) != seen.end();
  }
};

// Splits task features by class, rejecting overlap with earlier tasks and stray labels.
inline std::map<std::uint32_t, Matrix> split_by_class(const TaskData& task,
                                                      const std::vector<std::uint32_t>& seen) {
  if (task.features.rows != task.labels.size())
    throw ShapeError(std::to_string(task.features.rows) + " features for " +
                     std::to_string(task.labels.size()) + " labels");
  std::set<std::uint32_t> ids;
  for (auto id : task.class_ids) {
    if (!ids.insert(id).second)
      throw ProtocolError("class " + std::to_string(id) + " listed twice in one task");
    if (std::find(seen.begin(), seen.end(), id) != seen.end())
      throw ProtocolError("class " + std::to_string(id) + " already appeared in an earlier task");
  }
  std::map<std::uint32_t, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < task.labels.size(); ++i) {
    if (!ids.contains(task.labels[i]))
      throw ProtocolError("label " + std::to_string(task.labels[i]) + " is not a class of this task");
    rows[task.labels[i]].push_back(i);
  }
  std::map<std::uint32_t, Matrix> out;
  const std::size_t d = task.features.cols;
  for (auto id : ids) {
    auto& r = rows[id];
    Matrix m(r.size(), d);
    for (std::size_t k = 0; k < r.size(); ++k)
      std::copy_n(task.features.row(r[k]).begin(), d, m.data.begin() + static_cast<std::ptrdiff_t>(k * d));
    out.emplace(id, std::move(m));
  }
  return out;
}

// Phase one for one class; only the sampling half of the model is returned.
inline GeneratorEntry fit_generator(const Matrix& features, const MethodConfig& cfg,
                                    std::uint64_t seed, GeneratorFitLog& log) {
  log.samples = features.rows;
  switch (cfg.generator) {
    case GeneratorKind::kGaussian:
      return fit_gaussian(features, cfg.gaussian);
    case GeneratorKind::kMoG: {
      auto fit = fit_mog(features, cfg.mog, seed);
      log.initial_loss = -fit.log_likelihood.front();
      log.final_loss = -fit.log_likelihood.back();
      return std::move(fit.model);
    }
    case GeneratorKind::kVae: {
      auto tr = train_vae(features, cfg.vae, seed);
      log.initial_loss = tr.initial_loss;
      log.final_loss = tr.final_loss;
      return freeze_decoder(tr.model.decoder);
    }
    case GeneratorKind::kTower:
      break;
  }
  throw SpecError("tower is not a generator kind");
}

// The two-phase step for one task. `task` is consumed: nothing derived from its
// raw features other than the fitted generators survives the call.
inline const TaskLog& process_task(EngineState& state, std::shared_ptr<const TaskData> task) {
  if (!task) throw StateError("process_task: no task data");
  using Clock = std::chrono::steady_clock;
  const std::size_t index = state.logs.size();
  TaskLog log;
  log.task = index;
  log.classes = task->class_ids;

  auto per_class = split_by_class(*task, state.seen);
  for (auto id : task->class_ids)
    if (!state.catalog->contains(id))
      throw LookupError("class " + std::to_string(id) + " has no registered name");
  task.reset();

  const auto t0 = Clock::now();
  std::vector<std::pair<std::uint32_t, GeneratorEntry>> fitted;
  for (auto& [id, feats] : per_class) {
    GeneratorFitLog fl;
    fl.class_id = id;
    fitted.emplace_back(id, fit_generator(feats, state.config,
                                          derive_seed(state.seed, kStreamGenerator, id), fl));
    log.fits.push_back(fl);
  }
  per_class.clear();
  for (auto& [id, entry] : fitted) state.store.add(id, std::move(entry));
  for (auto id : log.classes) {
    state.params.add_class(id);
    state.seen.push_back(id);
  }
  const auto t1 = Clock::now();

  log.align = align_on_replay(state.store, state.params, *state.tower, *state.catalog,
                              state.config.align, derive_seed(state.seed, kStreamSampling, index));
  const auto t2 = Clock::now();
  log.fit_seconds = std::chrono::duration<double>(t1 - t0).count();
  log.align_seconds = std::chrono::duration<double>(t2 - t1).count();
  state.logs.push_back(std::move(log));
  return state.logs.back();
}

// ---------------------------------------------------------------------------
// Inference bank

// Learned embeddings for `learned` classes, handcrafted ones for the rest of `all`.
inline ClassEmbeddingBank build_hybrid_bank(std::span<const std::uint32_t> all,
                                            std::span<const std::uint32_t> learned,
                                            const PromptParams& params, const FrozenTextTower& tower,
                                            const ClassCatalog& catalog) {
  ClassEmbeddingBank bank;
  std::vector<std::uint32_t> ids(learned.begin(), learned.end());
  std::sort(ids.begin(), ids.end());
  if (!ids.empty()) {
    auto emb = encode_class_prompts(ids, params, tower, catalog);
    for (std::size_t c = 0; c < ids.size(); ++c) {
      auto row = emb.data().subspan(c * emb.cols(), emb.cols());
      bank.set(ids[c], std::vector<Real>(row.begin(), row.end()), EmbeddingSource::kLearned);
    }
  }
  for (auto id : all)
    if (!std::binary_search(ids.begin(), ids.end(), id))
      bank.set(id, handcrafted_embedding(id, tower, catalog), EmbeddingSource::kHandcrafted);
  return bank;
}

inline ClassEmbeddingBank build_handcrafted_bank(std::span<const std::uint32_t> all,
                                                 const FrozenTextTower& tower,
                                                 const ClassCatalog& catalog) {
  return build_hybrid_bank(all, {}, PromptParams{}, tower, catalog);
}

}  // namespace cgil
