// Command-line front end: synthetic benchmark generation, replay runs,
// baselines and report export. Errors exit with their category code.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "cgil/benchmark.hpp"
#include "cgil/errors.hpp"
#include "cgil/experiment.hpp"
#include "cgil/report.hpp"

namespace {

using namespace cgil;

struct RunOptions {
  std::string bench;
  std::string out;
  std::string csv;
  std::uint64_t seed = 1992;
  std::string label_set = "full";
  std::size_t vae_epochs = 0;
  std::size_t align_epochs = 0;
  std::size_t synthetic_per_class = 0;
  double temperature = 0.0;
};

void add_common(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--bench", o.bench, "benchmark directory")->required();
  cmd->add_option("--out", o.out, "report path (JSON)")->required();
  cmd->add_option("--csv", o.csv, "also write the accuracy matrix as CSV");
  cmd->add_option("--seed", o.seed, "run seed; also shuffles class order into tasks");
  cmd->add_option("--label-set", o.label_set, "future-task softmax: full | restricted")
      ->check(CLI::IsMember({"full", "restricted"}));
  cmd->add_option("--align-epochs", o.align_epochs, "alignment epochs (default 2)");
  cmd->add_option("--synthetic-per-class", o.synthetic_per_class, "replayed samples per class (default 2000)");
  cmd->add_option("--temperature", o.temperature, "cosine logit temperature (default 0.01)");
}

ExperimentConfig experiment_config(const RunOptions& o) {
  ExperimentConfig cfg;
  cfg.label_set = parse_label_set(o.label_set);
  if (o.vae_epochs) cfg.method.vae.epochs = o.vae_epochs;
  if (o.align_epochs) cfg.method.align.epochs = o.align_epochs;
  if (o.synthetic_per_class) cfg.method.align.synthetic_per_class = o.synthetic_per_class;
  if (o.temperature > 0.0) cfg.method.align.temperature = o.temperature;
  return cfg;
}

void write_and_summarise(const RunReport& r, const RunOptions& o) {
  std::optional<std::filesystem::path> csv;
  if (!o.csv.empty()) csv = o.csv;
  emit_report(r, o.out, csv);
  std::printf("%s seed=%llu FAA=%.4f", r.method.c_str(), static_cast<unsigned long long>(o.seed),
              r.final_average_accuracy());
  if (auto ci = r.class_incremental_transfer()) std::printf(" CI-Transfer=%.4f", *ci);
  else std::printf(" CI-Transfer=undefined");
  std::printf(" (%.1fs)\n", r.total_seconds);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"class-incremental learning with generative replay in embedding space"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  std::string synth_out;
  auto* gen = app.add_subcommand("gen-synth", "write a separable synthetic benchmark");
  gen->add_option("--classes", spec.classes, "number of classes");
  gen->add_option("--tasks", spec.tasks, "number of tasks");
  gen->add_option("--dim", spec.dim, "feature dimension");
  gen->add_option("--per-class", spec.train_per_class, "training samples per class");
  gen->add_option("--test-per-class", spec.test_per_class, "test samples per class");
  gen->add_option("--sep", spec.separation, "cluster separation (radius / spread)");
  gen->add_option("--seed", spec.seed, "generation seed");
  gen->add_option("--out", synth_out, "output directory")->required();

  RunOptions run_opt;
  std::string generator = "vae", prompt_mode = "cgil";
  auto* run = app.add_subcommand("run", "run the replay method over the task stream");
  add_common(run, run_opt);
  run->add_option("--generator", generator, "vae | mog | gaussian")
      ->check(CLI::IsMember({"vae", "mog", "gaussian"}));
  run->add_option("--prompt-mode", prompt_mode, "cgil | class | generated | unified")
      ->check(CLI::IsMember({"cgil", "class", "generated", "unified"}));
  run->add_option("--vae-epochs", run_opt.vae_epochs, "VAE epochs per class (default 500)");

  RunOptions base_opt;
  std::string kind;
  auto* base = app.add_subcommand("baseline", "run a reference baseline");
  add_common(base, base_opt);
  base->add_option("--kind", kind, "joint | finetune | zeroshot")
      ->required()
      ->check(CLI::IsMember({"joint", "finetune", "zeroshot"}));

  std::string report_in, report_csv;
  auto* rep = app.add_subcommand("report", "validate a report and export its accuracy matrix");
  rep->add_option("--in", report_in, "report path (JSON)")->required();
  rep->add_option("--csv", report_csv, "CSV output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto b = make_synthetic_benchmark(spec);
      save_benchmark(b, synth_out);
      std::printf("wrote %zu classes in %zu tasks to %s (nearest-centroid test accuracy %.4f)\n",
                  b.class_names.size(), b.tasks(), synth_out.c_str(), nearest_centroid_accuracy(b));
    } else if (*run) {
      auto cfg = experiment_config(run_opt);
      cfg.method.generator = parse_generator_kind(generator);
      cfg.method.prompt.mode = parse_prompt_mode(prompt_mode);
      write_and_summarise(run_experiment(load_benchmark(run_opt.bench), cfg, run_opt.seed), run_opt);
    } else if (*base) {
      auto cfg = experiment_config(base_opt);
      write_and_summarise(
          run_baseline(load_benchmark(base_opt.bench), parse_baseline_kind(kind), cfg, base_opt.seed),
          base_opt);
    } else if (*rep) {
      auto r = load_report(report_in);
      if (!report_csv.empty()) write_file_atomic(report_csv, accuracy_csv(r.matrix));
      std::printf("%s: %zu tasks, FAA=%.4f", r.method.c_str(), r.matrix.tasks(),
                  r.final_average_accuracy());
      if (auto ci = r.class_incremental_transfer()) std::printf(" CI-Transfer=%.4f", *ci);
      std::printf("\n");
    }
  } catch (const cgil::Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
