#pragma once

// Class-incremental benchmarks: a class partition into tasks plus train/test
// feature splits, either generated as separable Gaussian clusters or loaded
// from embedding files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cgil/binio.hpp"
#include "cgil/embedding_file.hpp"
#include "cgil/errors.hpp"
#include "cgil/linalg.hpp"
#include "cgil/rng.hpp"

namespace cgil {

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t tasks = 5;
  std::size_t dim = 32;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  Real separation = 10.0;
  std::uint64_t seed = 1992;
};

struct Benchmark {
  std::size_t dim = 0;
  std::vector<std::size_t> task_sizes;                 // classes per task, in stream order
  std::map<std::uint32_t, std::string> class_names;    // every class, by id
  FeatureRecords train, test;
  nlohmann::json source = nlohmann::json::object();    // generation parameters or origin

  std::size_t tasks() const { return task_sizes.size(); }
  std::vector<std::uint32_t> class_ids() const {
    std::vector<std::uint32_t> ids;
    for (auto& [id, _] : class_names) ids.push_back(id);
    return ids;
  }
};

// Task sizes for C classes over T tasks; the first C mod T tasks take one extra class.
inline std::vector<std::size_t> even_partition(std::size_t classes, std::size_t tasks) {
  if (tasks == 0) throw SpecError("a benchmark needs at least one task");
  if (classes < tasks)
    throw SpecError(std::to_string(classes) + " classes cannot fill " + std::to_string(tasks) + " tasks");
  std::vector<std::size_t> sizes(tasks, classes / tasks);
  for (std::size_t t = 0; t < classes % tasks; ++t) ++sizes[t];
  return sizes;
}

// Rejects partitions that do not cover the classes exactly once.
inline void validate_partition(const std::vector<std::vector<std::uint32_t>>& tasks,
                               std::span<const std::uint32_t> classes) {
  std::set<std::uint32_t> seen;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (tasks[t].empty()) throw SpecError("task " + std::to_string(t + 1) + " has no classes");
    for (auto id : tasks[t])
      if (!seen.insert(id).second)
        throw SpecError("class " + std::to_string(id) + " appears in more than one task");
  }
  std::set<std::uint32_t> all(classes.begin(), classes.end());
  if (seen != all) throw SpecError("task partition does not cover every class exactly once");
}

// The run seed shuffles class order; consecutive slices then form the tasks.
inline std::vector<std::vector<std::uint32_t>> task_stream(const Benchmark& bench, std::uint64_t seed) {
  auto ids = bench.class_ids();
  std::size_t total = 0;
  for (auto s : bench.task_sizes) total += s;
  if (total != ids.size())
    throw SpecError("task sizes cover " + std::to_string(total) + " of " + std::to_string(ids.size()) +
                    " classes");
  Rng rng(derive_seed(seed, kStreamClassOrder));
  std::shuffle(ids.begin(), ids.end(), rng.engine());
  std::vector<std::vector<std::uint32_t>> tasks;
  std::size_t at = 0;
  for (auto s : bench.task_sizes) {
    tasks.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(at),
                       ids.begin() + static_cast<std::ptrdiff_t>(at + s));
    at += s;
  }
  validate_partition(tasks, bench.class_ids());
  return tasks;
}

// Rows of `recs` whose label is in `classes`, in file order.
inline FeatureRecords select_classes(const FeatureRecords& recs, std::span<const std::uint32_t> classes) {
  std::set<std::uint32_t> keep(classes.begin(), classes.end());
  FeatureRecords out;
  out.features.cols = recs.dim();
  for (std::size_t i = 0; i < recs.size(); ++i)
    if (keep.contains(recs.labels[i])) {
      out.labels.push_back(recs.labels[i]);
      out.features.data.insert(out.features.data.end(), recs.features.row(i).begin(),
                               recs.features.row(i).end());
    }
  out.features.rows = out.labels.size();
  return out;
}

inline std::string synthetic_class_name(std::uint32_t id) { return "class" + std::to_string(id); }

// Each class: a random unit-norm mean (radius 1) with isotropic noise of
// standard deviation radius / separation. Features are stored as f32, so the
// in-memory benchmark is rounded the same way a reload would be.
inline Benchmark make_synthetic_benchmark(const SyntheticSpec& spec) {
  if (spec.dim == 0) throw SpecError("feature dimension must be positive");
  if (spec.train_per_class < 2 || spec.test_per_class == 0)
    throw SpecError("need at least 2 train and 1 test sample per class");
  if (!(spec.separation > 0.0)) throw SpecError("separation must be positive");
  Benchmark b;
  b.dim = spec.dim;
  b.task_sizes = even_partition(spec.classes, spec.tasks);
  const Real radius = 1.0, spread = radius / spec.separation;
  Rng rng(derive_seed(spec.seed, kStreamBenchmark));
  std::vector<std::vector<Real>> means;
  for (std::uint32_t c = 0; c < spec.classes; ++c) {
    b.class_names.emplace(c, synthetic_class_name(c));
    auto m = rng.normals(spec.dim);
    Real norm = 0.0;
    for (Real v : m) norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : m) v *= radius / norm;
    means.push_back(std::move(m));
  }
  auto draw = [&](std::size_t per_class, std::uint64_t stream) {
    FeatureRecords recs{Matrix(spec.classes * per_class, spec.dim), {}};
    Rng r(derive_seed(spec.seed, kStreamBenchmark, stream));
    for (std::uint32_t c = 0; c < spec.classes; ++c)
      for (std::size_t k = 0; k < per_class; ++k) {
        const std::size_t row = recs.labels.size();
        for (std::size_t j = 0; j < spec.dim; ++j)
          recs.features.data[row * spec.dim + j] =
              static_cast<Real>(static_cast<float>(means[c][j] + spread * r.normal()));
        recs.labels.push_back(c);
      }
    return recs;
  };
  b.train = draw(spec.train_per_class, 1);
  b.test = draw(spec.test_per_class, 2);
  b.source = {{"kind", "synthetic"},
              {"classes", spec.classes},
              {"tasks", spec.tasks},
              {"dim", spec.dim},
              {"train_per_class", spec.train_per_class},
              {"test_per_class", spec.test_per_class},
              {"separation", spec.separation},
              {"radius", radius},
              {"seed", spec.seed}};
  return b;
}

// <dir>/benchmark.json, train.emb(+.json), test.emb(+.json)
inline void save_benchmark(const Benchmark& b, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (auto [recs, name] : {std::pair{&b.train, "train"}, std::pair{&b.test, "test"}}) {
    EmbeddingManifest m;
    m.classes = b.class_names;
    m.source = std::string(name) + " split";
    m.extra = b.source;
    write_embedding_file(dir / (std::string(name) + ".emb"), *recs, m);
  }
  nlohmann::json j = {{"format_version", 1},
                      {"dim", b.dim},
                      {"task_sizes", b.task_sizes},
                      {"train", "train.emb"},
                      {"test", "test.emb"},
                      {"source", b.source}};
  write_file_atomic(dir / "benchmark.json", j.dump(2) + "\n");
}

inline Benchmark load_benchmark(const std::filesystem::path& dir) {
  auto text = read_file_bytes(dir / "benchmark.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(e.byte, (dir / "benchmark.json").string() + " is not valid JSON");
  }
  Benchmark b;
  std::string train_file, test_file;
  try {
    b.dim = j.at("dim").get<std::size_t>();
    b.task_sizes = j.at("task_sizes").get<std::vector<std::size_t>>();
    train_file = j.at("train").get<std::string>();
    test_file = j.at("test").get<std::string>();
    b.source = j.value("source", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, "malformed benchmark.json (" + std::string(e.what()) + ")");
  }
  auto train = load_embedding_file(dir / train_file);
  auto test = load_embedding_file(dir / test_file);
  if (train.records.dim() != b.dim || test.records.dim() != b.dim)
    throw FormatError(8, "split dimension does not match benchmark dim " + std::to_string(b.dim));
  b.class_names = train.manifest.classes;
  for (auto& [id, name] : test.manifest.classes)
    if (auto it = b.class_names.find(id); it == b.class_names.end() || it->second != name)
      throw FormatError(0, "train and test manifests disagree on class " + std::to_string(id));
  b.train = std::move(train.records);
  b.test = std::move(test.records);
  if (b.task_sizes.empty()) throw SpecError("benchmark declares no tasks");
  task_stream(b, 0);  // validates the partition sizes against the class set
  for (auto id : b.class_ids()) {
    const bool in_train = std::find(b.train.labels.begin(), b.train.labels.end(), id) != b.train.labels.end();
    const bool in_test = std::find(b.test.labels.begin(), b.test.labels.end(), id) != b.test.labels.end();
    if (!in_train || !in_test)
      throw SpecError("class " + std::to_string(id) + " lacks train or test samples");
  }
  return b;
}

// Accuracy of assigning each test vector to the nearest class mean of the training split.
inline Real nearest_centroid_accuracy(const Benchmark& b) {
  std::map<std::uint32_t, std::pair<std::vector<Real>, std::size_t>> sums;
  for (std::size_t i = 0; i < b.train.size(); ++i) {
    auto& [s, n] = sums[b.train.labels[i]];
    s.resize(b.dim, 0.0);
    for (std::size_t j = 0; j < b.dim; ++j) s[j] += b.train.features(i, j);
    ++n;
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b.test.size(); ++i) {
    std::uint32_t best = 0;
    Real best_d = std::numeric_limits<Real>::infinity();
    for (auto& [id, sn] : sums) {
      Real d = 0.0;
      for (std::size_t j = 0; j < b.dim; ++j) {
        const Real diff = b.test.features(i, j) - sn.first[j] / static_cast<Real>(sn.second);
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = id;
      }
    }
    correct += best == b.test.labels[i];
  }
  return static_cast<Real>(correct) / static_cast<Real>(b.test.size());
}

}  // namespace cgil
