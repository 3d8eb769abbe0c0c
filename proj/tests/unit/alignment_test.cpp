#include <gtest/gtest.h>

#include <map>
#include <memory>
#include <set>

#include "cgil/alignment.hpp"
#include "cgil/gradcheck.hpp"

using namespace cgil;

namespace {

constexpr std::size_t kDim = 16;

TowerConfig small_tower() {
  TowerConfig c;
  c.token_dim = kDim;
  c.output_dim = kDim;
  c.vocab_capacity = 64;
  return c;
}

struct Clusters {
  std::vector<std::vector<Real>> means;
  std::shared_ptr<ClassCatalog> catalog = std::make_shared<ClassCatalog>();

  Clusters(std::size_t classes, std::uint64_t seed) {
    Rng rng(seed);
    for (std::uint32_t c = 0; c < classes; ++c) {
      auto m = rng.normals(kDim);
      Real n = 0;
      for (Real v : m) n += v * v;
      for (auto& v : m) v /= std::sqrt(n);
      means.push_back(m);
      catalog->register_class(c, "class" + std::to_string(c));
    }
  }

  TaskData task(std::vector<std::uint32_t> ids, std::size_t per_class, std::uint64_t seed) const {
    Rng rng(seed);
    TaskData t{ids, Matrix(ids.size() * per_class, kDim), {}};
    for (auto id : ids)
      for (std::size_t k = 0; k < per_class; ++k) {
        auto row = t.features.row(t.labels.size());
        for (std::size_t j = 0; j < kDim; ++j) row[j] = means[id][j] + 0.1 * rng.normal();
        t.labels.push_back(id);
      }
    return t;
  }
};

GeneratorStore gaussian_store(const Clusters& cl, std::vector<std::uint32_t> ids) {
  GeneratorStore s(GeneratorKind::kGaussian, kDim);
  for (auto id : ids) s.add(id, fit_gaussian(cl.task({id}, 50, 100 + id).features));
  return s;
}

MethodConfig fast_method(GeneratorKind kind = GeneratorKind::kGaussian) {
  MethodConfig m;
  m.generator = kind;
  m.vae.epochs = 20;
  m.align.synthetic_per_class = 300;
  return m;
}

std::vector<char> entry_bytes(const GeneratorStore& s, std::uint32_t id) {
  return encode_store_blob({s.kind(), {detail::entry_blob(id, s.at(id))}, {}});
}

}  // namespace

TEST(SyntheticDataset, CountsPerClass) {
  Clusters cl(3, 1);
  auto store = gaussian_store(cl, {0, 1, 2});
  auto ds = build_synthetic_dataset(store, 100, 7);
  EXPECT_EQ(ds.size(), 300u);
  EXPECT_EQ(ds.features.rows, 300u);
  std::map<std::uint32_t, std::size_t> counts;
  for (auto l : ds.labels) ++counts[l];
  EXPECT_EQ(counts, (std::map<std::uint32_t, std::size_t>{{0, 100}, {1, 100}, {2, 100}}));
  // Shuffled: the first 100 rows are not all one class.
  EXPECT_NE(std::set<std::uint32_t>(ds.labels.begin(), ds.labels.begin() + 100).size(), 1u);
}

TEST(SyntheticDataset, SameSeedSameDataset) {
  Clusters cl(3, 1);
  auto store = gaussian_store(cl, {0, 1, 2});
  auto a = build_synthetic_dataset(store, 40, 7), b = build_synthetic_dataset(store, 40, 7);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(build_synthetic_dataset(store, 40, 8).features, a.features);
}

TEST(SyntheticDataset, EmptyStoreIsStateError) {
  GeneratorStore s(GeneratorKind::kGaussian, kDim);
  EXPECT_THROW(build_synthetic_dataset(s, 10, 1), StateError);
}

TEST(AlignPrompts, SeparatedClustersAreLearned) {
  Clusters cl(6, 1992);
  FrozenTextTower tower(small_tower());
  auto store = gaussian_store(cl, {0, 1, 2, 3, 4, 5});
  PromptParams params(PromptConfig{}, kDim, kDim, 1992);
  for (std::uint32_t c = 0; c < 6; ++c) params.add_class(c);
  AlignConfig cfg;
  auto ds = build_synthetic_dataset(store, cfg.synthetic_per_class, 1992);
  const auto before = tower.checksum();
  auto log = align_prompts(ds, params, tower, *cl.catalog, cfg, 1992);
  ASSERT_EQ(log.epochs.size(), 2u);
  EXPECT_GT(log.epochs.back().accuracy, 0.95);
  EXPECT_LT(log.epochs.back().loss, log.epochs.front().loss);
  EXPECT_EQ(tower.checksum(), before);
  for (auto& e : log.epochs) EXPECT_TRUE(std::isfinite(e.loss));
}

TEST(AlignPrompts, ZeroEpochsLeaveParamsUntouched) {
  Clusters cl(2, 3);
  FrozenTextTower tower(small_tower());
  auto store = gaussian_store(cl, {0, 1});
  PromptParams params(PromptConfig{}, kDim, kDim, 3);
  params.add_class(0);
  params.add_class(1);
  const auto before = params.flat_values();
  AlignConfig cfg;
  cfg.epochs = 0;
  auto log = align_prompts(build_synthetic_dataset(store, 50, 1), params, tower, *cl.catalog, cfg, 1);
  EXPECT_TRUE(log.epochs.empty());
  EXPECT_EQ(params.flat_values(), before);
}

TEST(AlignPrompts, LabelWithoutPromptRowIsStateError) {
  Clusters cl(3, 3);
  FrozenTextTower tower(small_tower());
  auto store = gaussian_store(cl, {0, 1, 2});
  PromptParams params(PromptConfig{}, kDim, kDim, 3);
  params.add_class(0);
  params.add_class(1);
  EXPECT_THROW(align_prompts(build_synthetic_dataset(store, 10, 1), params, tower, *cl.catalog, AlignConfig{}, 1),
               StateError);
}

TEST(AlignPrompts, InvalidConfigRejected) {
  AlignConfig cfg;
  cfg.temperature = 0.0;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = AlignConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), DomainError);
}

TEST(AlignPrompts, CrossEntropyGradientsThroughTower) {
  Clusters cl(3, 2);
  FrozenTextTower tower(small_tower());
  PromptParams params(PromptConfig{}, kDim, kDim, 2);
  std::vector<std::uint32_t> ids{0, 1, 2};
  for (auto id : ids) params.add_class(id);
  auto t = cl.task(ids, 2, 9);
  auto x = t.features.to_tensor();
  std::vector<std::size_t> labels(t.labels.begin(), t.labels.end());
  auto rep = grad_check(
      [&] { return softmax_cross_entropy(alignment_logits(x, encode_class_prompts(ids, params, tower, *cl.catalog), 0.5), labels); },
      params.trainable_leaves(), 1e-4, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(ProcessTask, FirstTaskPopulatesStoreAndParams) {
  Clusters cl(4, 5);
  auto tower = std::make_shared<const FrozenTextTower>(small_tower());
  EngineState st(tower, cl.catalog, fast_method(), kDim, 5);
  auto& log = process_task(st, std::make_shared<const TaskData>(cl.task({0, 1}, 60, 1)));
  EXPECT_EQ(st.store.size(), 2u);
  EXPECT_EQ(st.params.classes().size(), 2u);
  EXPECT_EQ(log.align.classes, 2u);
  EXPECT_EQ(log.align.samples, 2u * 300u);
}

TEST(ProcessTask, ReplayContractAcrossTasks) {
  Clusters cl(6, 6);
  auto tower = std::make_shared<const FrozenTextTower>(small_tower());
  EngineState st(tower, cl.catalog, fast_method(GeneratorKind::kVae), kDim, 6);
  std::vector<std::vector<std::uint32_t>> tasks{{0, 1}, {2, 3}, {4, 5}};
  std::map<std::uint32_t, std::vector<char>> frozen;
  std::map<std::uint32_t, std::vector<Real>> contexts;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    auto data = std::make_shared<const TaskData>(cl.task(tasks[t], 60, t));
    std::weak_ptr<const TaskData> watch = data;
    auto& log = process_task(st, std::move(data));
    EXPECT_TRUE(watch.expired());
    EXPECT_EQ(log.align.classes, 2 * (t + 1));
    EXPECT_EQ(log.align.samples, 2 * (t + 1) * 300u);
    for (auto& [id, bytes] : frozen) EXPECT_EQ(entry_bytes(st.store, id), bytes) << "class " << id;
    for (auto& [id, v] : contexts) EXPECT_NE(st.params.context(id).to_vector(), v) << "class " << id;
    for (auto id : tasks[t]) frozen[id] = entry_bytes(st.store, id);
    contexts.clear();
    for (auto id : st.seen) contexts[id] = st.params.context(id).to_vector();
    EXPECT_EQ(tower->checksum(), tower->construction_checksum());
  }
  EXPECT_EQ(st.store.class_ids(), (std::vector<std::uint32_t>{0, 1, 2, 3, 4, 5}));
}

TEST(ProcessTask, OverlapWithEarlierTaskIsProtocolError) {
  Clusters cl(3, 7);
  auto tower = std::make_shared<const FrozenTextTower>(small_tower());
  EngineState st(tower, cl.catalog, fast_method(), kDim, 7);
  process_task(st, std::make_shared<const TaskData>(cl.task({0, 1}, 20, 1)));
  const auto before = st.params.flat_values();
  EXPECT_THROW(process_task(st, std::make_shared<const TaskData>(cl.task({1, 2}, 20, 2))), ProtocolError);
  EXPECT_EQ(st.store.size(), 2u);
  EXPECT_EQ(st.params.flat_values(), before);
  auto stray = cl.task({2}, 20, 3);
  stray.labels[0] = 0;
  EXPECT_THROW(process_task(st, std::make_shared<const TaskData>(stray)), ProtocolError);
  EXPECT_THROW(process_task(st, nullptr), StateError);
}

TEST(ProcessTask, RepeatRunIsBitIdentical) {
  Clusters cl(4, 8);
  auto run = [&] {
    auto tower = std::make_shared<const FrozenTextTower>(small_tower());
    EngineState st(tower, cl.catalog, fast_method(GeneratorKind::kMoG), kDim, 8);
    process_task(st, std::make_shared<const TaskData>(cl.task({0, 1}, 40, 1)));
    process_task(st, std::make_shared<const TaskData>(cl.task({2, 3}, 40, 2)));
    return st.params.flat_values();
  };
  EXPECT_EQ(run(), run());
}

TEST(ProcessTask, RegeneratePerEpochCoversAllClasses) {
  Clusters cl(4, 9);
  auto tower = std::make_shared<const FrozenTextTower>(small_tower());
  auto m = fast_method();
  m.align.regenerate_per_epoch = true;
  m.align.epochs = 3;
  EngineState st(tower, cl.catalog, m, kDim, 9);
  process_task(st, std::make_shared<const TaskData>(cl.task({0, 1}, 40, 1)));
  auto& log = process_task(st, std::make_shared<const TaskData>(cl.task({2, 3}, 40, 2)));
  EXPECT_EQ(log.align.epochs.size(), 3u);
  EXPECT_EQ(log.align.classes, 4u);
  EXPECT_EQ(log.align.samples, 4u * 300u);
}

TEST(HybridBank, LearnedForSeenHandcraftedForRest) {
  Clusters cl(4, 10);
  FrozenTextTower tower(small_tower());
  PromptParams params(PromptConfig{}, kDim, kDim, 1);
  params.add_class(2);
  std::vector<std::uint32_t> all{0, 1, 2, 3}, seen{2};
  auto bank = build_hybrid_bank(all, seen, params, tower, *cl.catalog);
  ASSERT_EQ(bank.size(), 4u);
  EXPECT_EQ(bank.at(2).source, EmbeddingSource::kLearned);
  EXPECT_EQ(bank.at(0).source, EmbeddingSource::kHandcrafted);
  EXPECT_EQ(bank.at(0).embedding, handcrafted_embedding(0, tower, *cl.catalog));
}
