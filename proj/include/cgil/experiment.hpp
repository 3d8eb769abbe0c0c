#pragma once

// Task-stream orchestration: the replay method and the three reference
// baselines, each evaluated on every task's test split after every task.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "cgil/alignment.hpp"
#include "cgil/benchmark.hpp"
#include "cgil/errors.hpp"
#include "cgil/metrics.hpp"
#include "cgil/report.hpp"
#include "cgil/text_tower.hpp"

namespace cgil {

// Which classes compete in the softmax when scoring task i at checkpoint t.
enum class LabelSet {
  kFull,        // every benchmark class
  kRestricted,  // classes of tasks 1..max(t, i)
};

inline std::string_view label_set_name(LabelSet s) {
  return s == LabelSet::kFull ? "full" : "restricted";
}

inline LabelSet parse_label_set(std::string_view s) {
  if (s == "full") return LabelSet::kFull;
  if (s == "restricted") return LabelSet::kRestricted;
  throw SpecError("unknown label set \"" + std::string(s) + "\"");
}

enum class BaselineKind { kJoint, kFinetune, kZeroshot };

inline std::string_view baseline_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::kJoint: return "joint";
    case BaselineKind::kFinetune: return "finetune";
    case BaselineKind::kZeroshot: return "zeroshot";
  }
  return "unknown";
}

inline BaselineKind parse_baseline_kind(std::string_view s) {
  if (s == "joint") return BaselineKind::kJoint;
  if (s == "finetune") return BaselineKind::kFinetune;
  if (s == "zeroshot") return BaselineKind::kZeroshot;
  throw SpecError("unknown baseline \"" + std::string(s) + "\"");
}

struct ExperimentConfig {
  MethodConfig method;
  TowerConfig tower;
  LabelSet label_set = LabelSet::kFull;
  // Epochs over real features for the joint and fine-tune baselines. Zero
  // means: match the replay method's sample visits per class.
  std::size_t real_epochs = 0;
};

inline std::size_t baseline_epochs(const ExperimentConfig& cfg, const Benchmark& bench) {
  if (cfg.real_epochs > 0) return cfg.real_epochs;
  const Real per_class = static_cast<Real>(bench.train.size()) / static_cast<Real>(bench.class_names.size());
  const Real visits = static_cast<Real>(cfg.method.align.epochs * cfg.method.align.synthetic_per_class);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(visits / per_class)));
}

inline nlohmann::json config_json(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto& m = cfg.method;
  return {
      {"seed", seed},
      {"generator", kind_name(m.generator)},
      {"vae",
       {{"hidden_dim", m.vae.hidden_dim}, {"latent_dim", m.vae.latent_dim},
        {"learning_rate", m.vae.learning_rate}, {"epochs", m.vae.epochs},
        {"batch_size", m.vae.batch_size}, {"beta", m.vae.beta}, {"leaky_slope", m.vae.leaky_slope},
        {"logvar_limit", m.vae.logvar_limit}}},
      {"mog",
       {{"components", m.mog.components}, {"max_iters", m.mog.max_iters}, {"tol", m.mog.tol},
        {"epsilon", m.mog.epsilon}, {"diagonal", m.mog.diagonal}}},
      {"gaussian", {{"epsilon", m.gaussian.epsilon}, {"diagonal", m.gaussian.diagonal}}},
      {"prompt",
       {{"mode", mode_name(m.prompt.mode)}, {"class_tokens", m.prompt.class_tokens},
        {"generated_tokens", m.prompt.generated_tokens}, {"unified_tokens", m.prompt.unified_tokens},
        {"init_std", m.prompt.init_std}, {"leaky_slope", m.prompt.leaky_slope}}},
      {"align",
       {{"learning_rate", m.align.learning_rate}, {"batch_size", m.align.batch_size},
        {"epochs", m.align.epochs}, {"temperature", m.align.temperature},
        {"regenerate_per_epoch", m.align.regenerate_per_epoch},
        {"synthetic_per_class", m.align.synthetic_per_class}}},
      {"tower",
       {{"token_dim", cfg.tower.token_dim}, {"output_dim", cfg.tower.output_dim},
        {"blocks", cfg.tower.blocks}, {"heads", cfg.tower.heads}, {"max_length", cfg.tower.max_length},
        {"vocab_capacity", cfg.tower.vocab_capacity}, {"ffn_multiplier", cfg.tower.ffn_multiplier},
        {"init_std", cfg.tower.init_std}, {"seed", cfg.tower.seed}}},
      {"label_set", label_set_name(cfg.label_set)},
      {"real_epochs", cfg.real_epochs},
  };
}

inline nlohmann::json benchmark_json(const Benchmark& b) {
  return {{"dim", b.dim},
          {"classes", b.class_names.size()},
          {"task_sizes", b.task_sizes},
          {"train_samples", b.train.size()},
          {"test_samples", b.test.size()},
          {"source", b.source}};
}

inline nlohmann::json align_log_json(const AlignLog& log) {
  nlohmann::json epochs = nlohmann::json::array();
  for (auto& e : log.epochs) epochs.push_back({{"loss", e.loss}, {"accuracy", e.accuracy}});
  return {{"epochs", epochs}, {"steps", log.steps}, {"classes", log.classes}, {"samples", log.samples}};
}

inline nlohmann::json task_log_json(const TaskLog& log) {
  nlohmann::json fits = nlohmann::json::array();
  for (auto& f : log.fits)
    fits.push_back({{"class_id", f.class_id}, {"samples", f.samples},
                    {"initial_loss", f.initial_loss}, {"final_loss", f.final_loss}});
  return {{"task", log.task + 1}, {"classes", log.classes}, {"generator_fits", fits},
          {"align", align_log_json(log.align)}};
}

inline std::shared_ptr<const ClassCatalog> make_catalog(const Benchmark& bench) {
  auto cat = std::make_shared<ClassCatalog>();
  for (auto& [id, name] : bench.class_names) cat->register_class(id, name);
  return cat;
}

namespace detail {

struct Evaluator {
  const Benchmark& bench;
  const std::vector<std::vector<std::uint32_t>>& tasks;
  LabelSet label_set;
  Real temperature;
  std::vector<FeatureRecords> test_by_task;

  Evaluator(const Benchmark& b, const std::vector<std::vector<std::uint32_t>>& t, LabelSet ls, Real tau)
      : bench(b), tasks(t), label_set(ls), temperature(tau) {
    for (auto& cls : tasks) test_by_task.push_back(select_classes(bench.test, cls));
  }

  // Fills row t of `m` using `bank`.
  void round(AccuracyMatrix& m, std::size_t t, const ClassEmbeddingBank& bank) const {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      std::vector<std::uint32_t> allowed;
      if (label_set == LabelSet::kRestricted)
        for (std::size_t k = 0; k <= std::max(t, i); ++k)
          allowed.insert(allowed.end(), tasks[k].begin(), tasks[k].end());
      auto& recs = test_by_task[i];
      std::vector<std::uint32_t> pred(recs.size());
      for (std::size_t s = 0; s < recs.size(); ++s)
        pred[s] = classify_hybrid(recs.features.row(s), bank, temperature, allowed);
      record_accuracy(m, t, i, pred, recs.labels);
    }
  }
};

inline TaskData task_data(const Benchmark& bench, const std::vector<std::uint32_t>& classes) {
  auto recs = select_classes(bench.train, classes);
  return {classes, std::move(recs.features), std::move(recs.labels)};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// One fine-tune baseline task: new class-only context rows trained on the task's
// real features with a softmax over every seen class, then frozen for good.
inline AlignLog finetune_step(PromptParams& params, std::vector<std::uint32_t>& seen, const TaskData& data,
                              const FrozenTextTower& tower, const ClassCatalog& catalog,
                              const AlignConfig& cfg, std::uint64_t seed) {
  split_by_class(data, seen);
  for (auto id : data.class_ids) {
    params.add_class(id);
    seen.push_back(id);
  }
  auto log = align_prompts(data.features, data.labels, params, tower, catalog, cfg, seed, seen);
  for (auto id : data.class_ids) params.freeze_context(id);
  return log;
}

// The replay method: process_task on each task in the seed's class order, then
// score every task's test split with learned prompts for seen classes and
// handcrafted prompts for the rest.
inline RunReport run_experiment(const Benchmark& bench, const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const auto tasks = task_stream(bench, seed);
  const auto all = bench.class_ids();
  auto tower = std::make_shared<const FrozenTextTower>(cfg.tower);
  auto catalog = make_catalog(bench);
  EngineState state(tower, catalog, cfg.method, bench.dim, seed);
  detail::Evaluator eval(bench, tasks, cfg.label_set, cfg.method.align.temperature);

  RunReport r;
  r.method = cfg.method.prompt.mode == PromptMode::kClassPlusGenerated
                 ? "cgil"
                 : "cgil-" + std::string(mode_name(cfg.method.prompt.mode));
  r.config = config_json(cfg, seed);
  r.benchmark = benchmark_json(bench);
  r.task_order = tasks;
  r.matrix = AccuracyMatrix(tasks.size());
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    try {
      const auto& log = process_task(state, std::make_shared<const TaskData>(detail::task_data(bench, tasks[t])));
      r.training_logs.push_back(task_log_json(log));
      const auto t0 = std::chrono::steady_clock::now();
      auto bank = build_hybrid_bank(all, state.seen, state.params, *tower, *catalog);
      eval.round(r.matrix, t, bank);
      r.timings.push_back({log.fit_seconds, log.align_seconds, detail::seconds_since(t0)});
    } catch (const Error& e) {
      rethrow_in_context(e, "task " + std::to_string(t + 1));
    }
  }
  if (tower->checksum() != tower->construction_checksum())
    throw StateError("text tower weights changed during the run");
  r.total_seconds = detail::seconds_since(start);
  return r;
}

inline RunReport run_baseline(const Benchmark& bench, BaselineKind kind, const ExperimentConfig& cfg,
                              std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const auto tasks = task_stream(bench, seed);
  const auto all = bench.class_ids();
  auto tower = std::make_shared<const FrozenTextTower>(cfg.tower);
  auto catalog = make_catalog(bench);
  detail::Evaluator eval(bench, tasks, cfg.label_set, cfg.method.align.temperature);

  auto prompt_cfg = cfg.method.prompt;
  prompt_cfg.mode = PromptMode::kClassOnly;
  auto align_cfg = cfg.method.align;
  align_cfg.epochs = baseline_epochs(cfg, bench);

  RunReport r;
  r.method = std::string(baseline_name(kind));
  r.config = config_json(cfg, seed);
  r.config["baseline"] = {{"kind", baseline_name(kind)}, {"prompt_mode", mode_name(prompt_cfg.mode)},
                          {"real_epochs", align_cfg.epochs}};
  r.benchmark = benchmark_json(bench);
  r.task_order = tasks;
  r.matrix = AccuracyMatrix(tasks.size());

  PromptParams params(prompt_cfg, tower->token_dim(), tower->output_dim(), seed);
  switch (kind) {
    case BaselineKind::kZeroshot: {
      auto t0 = std::chrono::steady_clock::now();
      auto bank = build_handcrafted_bank(all, *tower, *catalog);
      for (std::size_t t = 0; t < tasks.size(); ++t) eval.round(r.matrix, t, bank);
      r.timings.push_back({0.0, 0.0, detail::seconds_since(t0)});
      break;
    }
    case BaselineKind::kJoint: {
      // One pass over every real training feature; the same prompts score every checkpoint.
      auto t0 = std::chrono::steady_clock::now();
      for (auto id : all) params.add_class(id);
      auto log = align_prompts(bench.train.features, bench.train.labels, params, *tower, *catalog,
                               align_cfg, derive_seed(seed, kStreamSampling));
      const double align_s = detail::seconds_since(t0);
      r.training_logs.push_back({{"task", "all"}, {"classes", all}, {"align", align_log_json(log)}});
      t0 = std::chrono::steady_clock::now();
      auto bank = build_hybrid_bank(all, all, params, *tower, *catalog);
      for (std::size_t t = 0; t < tasks.size(); ++t) eval.round(r.matrix, t, bank);
      r.timings.push_back({0.0, align_s, detail::seconds_since(t0)});
      break;
    }
    case BaselineKind::kFinetune: {
      // Each task trains only its own new context rows on its own real features,
      // against all seen classes; rows are frozen once their task ends.
      std::vector<std::uint32_t> seen;
      for (std::size_t t = 0; t < tasks.size(); ++t) {
        try {
          auto t0 = std::chrono::steady_clock::now();
          auto log = finetune_step(params, seen, detail::task_data(bench, tasks[t]), *tower, *catalog,
                                   align_cfg, derive_seed(seed, kStreamSampling, t));
          const double align_s = detail::seconds_since(t0);
          r.training_logs.push_back({{"task", t + 1}, {"classes", tasks[t]}, {"align", align_log_json(log)}});
          t0 = std::chrono::steady_clock::now();
          auto bank = build_hybrid_bank(all, seen, params, *tower, *catalog);
          eval.round(r.matrix, t, bank);
          r.timings.push_back({0.0, align_s, detail::seconds_since(t0)});
        } catch (const Error& e) {
          rethrow_in_context(e, "task " + std::to_string(t + 1));
        }
      }
      break;
    }
  }
  r.total_seconds = detail::seconds_since(start);
  return r;
}

}  // namespace cgil
