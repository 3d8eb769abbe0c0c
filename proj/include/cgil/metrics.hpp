#pragma once

// Hybrid seen/unseen classification over a bank of class text embeddings, and
// the class-incremental accuracy matrix with its summary metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgil/errors.hpp"
#include "cgil/tensor.hpp"

namespace cgil {

enum class EmbeddingSource { kLearned, kHandcrafted };

struct ClassEmbedding {
  std::uint32_t class_id = 0;
  std::vector<Real> embedding;
  EmbeddingSource source = EmbeddingSource::kHandcrafted;
};

// One embedding per class, kept sorted by class id.
class ClassEmbeddingBank {
 public:
  void set(std::uint32_t id, std::vector<Real> embedding, EmbeddingSource source) {
    Real ss = 0.0;
    for (Real v : embedding) ss += v * v;
    if (!(ss > 0.0)) throw DomainError("class " + std::to_string(id) + " embedding has zero norm");
    std::vector<Real> unit(embedding);
    for (auto& v : unit) v /= std::sqrt(ss);
    auto it = std::lower_bound(entries_.begin(), entries_.end(), id,
                               [](const ClassEmbedding& e, std::uint32_t v) { return e.class_id < v; });
    const auto pos = static_cast<std::size_t>(it - entries_.begin());
    if (it != entries_.end() && it->class_id == id) {
      it->embedding = std::move(embedding);
      it->source = source;
      normalized_[pos] = std::move(unit);
    } else {
      entries_.insert(it, {id, std::move(embedding), source});
      normalized_.insert(normalized_.begin() + static_cast<std::ptrdiff_t>(pos), std::move(unit));
    }
  }

  const std::vector<ClassEmbedding>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const ClassEmbedding& at(std::uint32_t id) const {
    for (auto& e : entries_)
      if (e.class_id == id) return e;
    throw LookupError("class " + std::to_string(id) + " not in embedding bank");
  }

  // Cosine similarity of `z` to every class, in bank order.
  std::vector<Real> cosines(std::span<const Real> z) const {
    if (entries_.empty()) throw StateError("embedding bank is empty");
    Real zz = 0.0;
    for (Real v : z) zz += v * v;
    if (!(zz > 0.0)) throw DomainError("query embedding has zero norm");
    const Real inv = 1.0 / std::sqrt(zz);
    std::vector<Real> out(entries_.size());
    for (std::size_t c = 0; c < entries_.size(); ++c) {
      auto& e = normalized_[c];
      if (e.size() != z.size())
        throw ShapeError("query dim " + std::to_string(z.size()) + " vs bank dim " +
                         std::to_string(e.size()));
      Real s = 0.0;
      for (std::size_t j = 0; j < z.size(); ++j) s += e[j] * z[j];
      out[c] = s * inv;
    }
    return out;
  }

 private:
  std::vector<ClassEmbedding> entries_;
  std::vector<std::vector<Real>> normalized_;  // unit-norm copies, same order
};

// p(y_i | x) = softmax_i(cos(z_txt_i, z_vis) / tau), over every class in the bank.
inline std::vector<Real> posterior(std::span<const Real> z_vis, const ClassEmbeddingBank& bank,
                                   Real temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  auto logits = bank.cosines(z_vis);
  const Real mx = *std::max_element(logits.begin(), logits.end()) / temperature;
  Real z = 0.0;
  for (auto& l : logits) z += (l = std::exp(l / temperature - mx));
  for (auto& l : logits) l /= z;
  return logits;
}

// Argmax of the posterior; ties go to the lowest class id. `allowed`, when
// given, restricts the candidate classes.
inline std::uint32_t classify_hybrid(std::span<const Real> z_vis, const ClassEmbeddingBank& bank,
                                     Real temperature,
                                     std::span<const std::uint32_t> allowed = {}) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  auto cos = bank.cosines(z_vis);
  auto& entries = bank.entries();
  std::optional<std::size_t> best;
  for (std::size_t c = 0; c < entries.size(); ++c) {
    if (!allowed.empty() &&
        std::find(allowed.begin(), allowed.end(), entries[c].class_id) == allowed.end())
      continue;
    // The argmax of cos/tau equals the argmax of the posterior; strict '>' keeps the lowest id.
    if (!best || cos[c] > cos[*best]) best = c;
  }
  if (!best) throw StateError("no candidate classes for classification");
  return entries[*best].class_id;
}

// ---------------------------------------------------------------------------

// A[t][i]: CIL accuracy on task i after training through task t (0-based).
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t tasks) : tasks_(tasks), cells_(tasks * tasks) {}

  std::size_t tasks() const { return tasks_; }

  void set(std::size_t t, std::size_t i, Real value) {
    check_index(t, i);
    if (!(value >= 0.0 && value <= 1.0)) throw DomainError("accuracy outside [0,1]");
    cells_[t * tasks_ + i] = value;
  }

  std::optional<Real> get(std::size_t t, std::size_t i) const {
    check_index(t, i);
    return cells_[t * tasks_ + i];
  }

  Real at(std::size_t t, std::size_t i) const {
    auto v = get(t, i);
    if (!v) throw StateError("A[" + std::to_string(t + 1) + "][" + std::to_string(i + 1) + "] is absent");
    return *v;
  }

  bool row_complete(std::size_t t) const {
    for (std::size_t i = 0; i < tasks_; ++i)
      if (!cells_[t * tasks_ + i]) return false;
    return true;
  }

 private:
  void check_index(std::size_t t, std::size_t i) const {
    if (t >= tasks_ || i >= tasks_)
      throw IndexError("A[" + std::to_string(t) + "][" + std::to_string(i) + "] outside " +
                       std::to_string(tasks_) + "x" + std::to_string(tasks_));
  }

  std::size_t tasks_ = 0;
  std::vector<std::optional<Real>> cells_;
};

inline void record_accuracy(AccuracyMatrix& m, std::size_t t, std::size_t i,
                            std::span<const std::uint32_t> predictions,
                            std::span<const std::uint32_t> labels) {
  if (predictions.size() != labels.size())
    throw ShapeError(std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw ShapeError("accuracy over zero samples");
  std::size_t correct = 0;
  for (std::size_t k = 0; k < labels.size(); ++k) correct += predictions[k] == labels[k];
  m.set(t, i, static_cast<Real>(correct) / static_cast<Real>(labels.size()));
}

// Mean of the final row.
inline Real faa(const AccuracyMatrix& m) {
  if (m.tasks() == 0) throw StateError("faa of an empty matrix");
  const std::size_t last = m.tasks() - 1;
  Real s = 0.0;
  for (std::size_t i = 0; i < m.tasks(); ++i) s += m.at(last, i);
  return s / static_cast<Real>(m.tasks());
}

// Average over checkpoints t < T of the mean accuracy on the tasks not yet trained.
inline Real ci_transfer(const AccuracyMatrix& m) {
  const std::size_t T = m.tasks();
  if (T < 2) throw UndefinedMetricError("CI-Transfer needs at least two tasks");
  Real outer = 0.0;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    Real inner = 0.0;
    for (std::size_t i = t + 1; i < T; ++i) inner += m.at(t, i);
    outer += inner / static_cast<Real>(T - 1 - t);
  }
  return outer / static_cast<Real>(T - 1);
}

}  // namespace cgil
