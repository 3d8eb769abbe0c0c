#pragma once

// Frozen token encoder and the learnable prompt parameters that feed it.
//
// A prompt for class c is a token sequence [generated ctx][class ctx][class tokens][EOT]
// pushed through a small pre-LayerNorm causal transformer whose weights never
// receive gradients. The sequence embedding is read at the EOT position.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cgil/errors.hpp"
#include "cgil/rng.hpp"
#include "cgil/store.hpp"
#include "cgil/tensor.hpp"

namespace cgil {

class Vocabulary {
 public:
  static constexpr std::size_t kEot = 0;

  Vocabulary() {
    for (auto w : {"<eot>", "a", "photo", "of"}) id_or_add(w);
  }

  std::size_t id_or_add(const std::string& word) {
    auto [it, inserted] = ids_.try_emplace(word, words_.size());
    if (inserted) words_.push_back(word);
    return it->second;
  }

  std::optional<std::size_t> find(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& word(std::size_t id) const { return words_.at(id); }
  std::size_t size() const { return words_.size(); }

 private:
  std::unordered_map<std::string, std::size_t> ids_;
  std::vector<std::string> words_;
};

// Lowercases, splits on whitespace and hyphens, adds unseen words in first-seen order.
inline std::vector<std::size_t> tokenize_class(std::string_view name, Vocabulary& vocab) {
  std::vector<std::size_t> ids;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) ids.push_back(vocab.id_or_add(cur));
    cur.clear();
  };
  for (char ch : name) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u) || ch == '-') flush();
    else cur.push_back(static_cast<char>(std::tolower(u)));
  }
  flush();
  if (ids.empty()) throw DomainError("class name \"" + std::string(name) + "\" has no tokens");
  return ids;
}

// ---------------------------------------------------------------------------

struct TowerConfig {
  std::size_t token_dim = 32;
  std::size_t output_dim = 32;
  std::size_t blocks = 2;
  std::size_t heads = 2;
  std::size_t max_length = 16;
  std::size_t vocab_capacity = 1024;
  std::size_t ffn_multiplier = 4;
  Real init_std = 0.02;
  std::uint64_t seed = 1992;
};

class FrozenTextTower {
 public:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;
  };

  explicit FrozenTextTower(TowerConfig cfg) : cfg_(cfg) {
    if (cfg.heads == 0 || cfg.token_dim % cfg.heads != 0)
      throw SpecError("token_dim must be divisible by heads");
    Rng rng(derive_seed(cfg.seed, kStreamTower));
    const std::size_t d = cfg.token_dim, f = cfg.ffn_multiplier * d;
    auto normal = [&](std::size_t r, std::size_t c) {
      return Tensor::matrix(r, c, rng.normals(r * c, cfg.init_std));
    };
    auto zeros = [](std::size_t n) { return Tensor::zeros({n}); };
    auto ones = [](std::size_t n) { return Tensor::vector(std::vector<Real>(n, 1.0)); };
    token_table_ = normal(cfg.vocab_capacity, d);
    positions_ = normal(cfg.max_length, d);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      Block blk;
      blk.ln1_gain = ones(d);
      blk.ln1_bias = zeros(d);
      blk.wq = normal(d, d);
      blk.bq = zeros(d);
      blk.wk = normal(d, d);
      blk.bk = zeros(d);
      blk.wv = normal(d, d);
      blk.bv = zeros(d);
      blk.wo = normal(d, d);
      blk.bo = zeros(d);
      blk.ln2_gain = ones(d);
      blk.ln2_bias = zeros(d);
      blk.w1 = normal(f, d);
      blk.b1 = zeros(f);
      blk.w2 = normal(d, f);
      blk.b2 = zeros(d);
      blocks_.push_back(std::move(blk));
    }
    lnf_gain_ = ones(d);
    lnf_bias_ = zeros(d);
    projection_ = normal(cfg.output_dim, d);
    construction_checksum_ = checksum();
  }

  const TowerConfig& config() const { return cfg_; }
  std::size_t token_dim() const { return cfg_.token_dim; }
  std::size_t output_dim() const { return cfg_.output_dim; }

  // Constant rows of the embedding table; never part of a gradient path.
  Tensor token_embeddings(std::span<const std::size_t> ids) const {
    for (auto id : ids)
      if (id >= cfg_.vocab_capacity)
        throw SequenceError("token id " + std::to_string(id) + " exceeds vocabulary capacity " +
                            std::to_string(cfg_.vocab_capacity));
    return gather_rows(token_table_, ids);
  }

  // Sequence [L x token_dim] -> embedding [output_dim], pooled at the last (EOT) row.
  Tensor encode(const Tensor& sequence) const {
    return reshape(encode_batch({sequence}), {cfg_.output_dim});
  }

  // Several sequences at once -> [N x output_dim]. Rows never mix across sequences,
  // so row n equals encode(sequences[n]).
  Tensor encode_batch(const std::vector<Tensor>& sequences) const {
    if (sequences.empty()) throw ShapeError("encode_batch: no sequences");
    std::vector<std::size_t> lengths, positions, last;
    for (auto& seq : sequences) {
      const std::size_t len = seq.rows();
      if (seq.rank() != 2 || seq.cols() != cfg_.token_dim)
        throw ShapeError("tower input " + shape_str(seq.shape()) + ", expected [L x " +
                         std::to_string(cfg_.token_dim) + "]");
      if (len > cfg_.max_length)
        throw SequenceError("prompt length " + std::to_string(len) + " exceeds tower maximum " +
                            std::to_string(cfg_.max_length));
      lengths.push_back(len);
      for (std::size_t p = 0; p < len; ++p) positions.push_back(p);
      last.push_back(positions.size() - 1);
    }
    Tensor x = add(concat_rows(sequences), gather_rows(positions_, positions));
    for (auto& blk : blocks_) {
      auto h = layer_norm_rows(x, blk.ln1_gain, blk.ln1_bias);
      auto att = segment_causal_attention(linear(h, blk.wq, blk.bq), linear(h, blk.wk, blk.bk),
                                          linear(h, blk.wv, blk.bv), lengths, cfg_.heads);
      x = add(x, linear(att, blk.wo, blk.bo));
      auto h2 = layer_norm_rows(x, blk.ln2_gain, blk.ln2_bias);
      x = add(x, linear(gelu(linear(h2, blk.w1, blk.b1)), blk.w2, blk.b2));
    }
    auto pooled = layer_norm_rows(gather_rows(x, last), lnf_gain_, lnf_bias_);
    return linear(pooled, projection_);
  }

  // Every weight, in a fixed order.
  std::vector<Tensor> weights() const {
    std::vector<Tensor> w{token_table_, positions_};
    for (auto& b : blocks_)
      for (auto* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                      &b.bo, &b.ln2_gain, &b.ln2_bias, &b.w1, &b.b1, &b.w2, &b.b2})
        w.push_back(*t);
    w.push_back(lnf_gain_);
    w.push_back(lnf_bias_);
    w.push_back(projection_);
    return w;
  }

  // FNV-1a over the raw bytes of every weight.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto& t : weights())
      for (Real v : t.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) {
          h ^= (bits >> (8 * i)) & 0xffu;
          h *= 0x100000001b3ULL;
        }
      }
    return h;
  }

  std::uint64_t construction_checksum() const { return construction_checksum_; }

 private:
  TowerConfig cfg_;
  Tensor token_table_, positions_;
  std::vector<Block> blocks_;
  Tensor lnf_gain_, lnf_bias_, projection_;
  std::uint64_t construction_checksum_ = 0;
};

// Snapshot of the tower weights in the store container (kind = tower, one entry).
// Matrices become layers as-is; vectors become [n x 1] layers with zero biases.
inline void save_tower_snapshot(const FrozenTextTower& tower, const std::filesystem::path& path) {
  EntryBlob entry{0, {}};
  for (auto& t : tower.weights()) {
    LayerBlob l;
    l.rows = static_cast<std::uint32_t>(t.rows() * (t.rank() == 2 ? 1 : t.cols()));
    l.cols = static_cast<std::uint32_t>(t.rank() == 2 ? t.cols() : 1);
    l.weights = t.to_vector();
    l.biases.assign(l.rows, 0.0);
    entry.layers.push_back(std::move(l));
  }
  write_file_atomic(path, encode_store_blob({GeneratorKind::kTower, {std::move(entry)}, {}}));
}

// ---------------------------------------------------------------------------

// class_id -> name and template tokens, with a per-class cache of handcrafted embeddings.
class ClassCatalog {
 public:
  void register_class(std::uint32_t id, const std::string& name) {
    auto tokens = tokenize_class(name, vocab_);
    auto [it, inserted] = classes_.try_emplace(id, Info{name, tokens});
    if (!inserted && it->second.name != name)
      throw StateError("class " + std::to_string(id) + " already registered as \"" +
                       it->second.name + "\"");
  }

  bool contains(std::uint32_t id) const { return classes_.contains(id); }
  const std::string& name(std::uint32_t id) const { return info(id).name; }
  const std::vector<std::size_t>& tokens(std::uint32_t id) const { return info(id).tokens; }
  const Vocabulary& vocabulary() const { return vocab_; }

  std::vector<std::uint32_t> class_ids() const {
    std::vector<std::uint32_t> ids;
    for (auto& [id, _] : classes_) ids.push_back(id);
    return ids;
  }

  // "a photo of a <CLS>" followed by EOT.
  std::vector<std::size_t> template_tokens(std::uint32_t id) const {
    const auto a = *vocab_.find("a"), photo = *vocab_.find("photo"), of = *vocab_.find("of");
    std::vector<std::size_t> seq{a, photo, of, a};
    auto& t = tokens(id);
    seq.insert(seq.end(), t.begin(), t.end());
    seq.push_back(Vocabulary::kEot);
    return seq;
  }

  std::optional<std::vector<Real>> cached(std::uint32_t id, std::uint64_t tower_sum) const {
    auto it = cache_.find({id, tower_sum});
    if (it == cache_.end()) return std::nullopt;
    return it->second;
  }
  void remember(std::uint32_t id, std::uint64_t tower_sum, std::vector<Real> e) const {
    cache_[{id, tower_sum}] = std::move(e);
  }

 private:
  struct Info {
    std::string name;
    std::vector<std::size_t> tokens;
  };
  const Info& info(std::uint32_t id) const {
    auto it = classes_.find(id);
    if (it == classes_.end()) throw LookupError("class " + std::to_string(id) + " is not registered");
    return it->second;
  }

  Vocabulary vocab_;
  std::map<std::uint32_t, Info> classes_;
  mutable std::map<std::pair<std::uint32_t, std::uint64_t>, std::vector<Real>> cache_;
};

// Embedding of the fixed template prompt; constant, cached per (class, tower).
inline std::vector<Real> handcrafted_embedding(std::uint32_t class_id, const FrozenTextTower& tower,
                                               const ClassCatalog& catalog) {
  const auto key = tower.construction_checksum();
  if (auto hit = catalog.cached(class_id, key)) return *hit;
  auto ids = catalog.template_tokens(class_id);
  auto e = tower.encode(tower.token_embeddings(ids)).to_vector();
  catalog.remember(class_id, key, e);
  return e;
}

// ---------------------------------------------------------------------------

enum class PromptMode { kClassPlusGenerated, kClassOnly, kGeneratedOnly, kUnified };

inline std::string_view mode_name(PromptMode m) {
  switch (m) {
    case PromptMode::kClassPlusGenerated: return "cgil";
    case PromptMode::kClassOnly: return "class";
    case PromptMode::kGeneratedOnly: return "generated";
    case PromptMode::kUnified: return "unified";
  }
  return "unknown";
}

inline PromptMode parse_prompt_mode(std::string_view s) {
  if (s == "cgil") return PromptMode::kClassPlusGenerated;
  if (s == "class") return PromptMode::kClassOnly;
  if (s == "generated") return PromptMode::kGeneratedOnly;
  if (s == "unified") return PromptMode::kUnified;
  throw SpecError("unknown prompt mode \"" + std::string(s) + "\"");
}

inline bool uses_class_context(PromptMode m) {
  return m == PromptMode::kClassPlusGenerated || m == PromptMode::kClassOnly;
}
inline bool uses_generated_context(PromptMode m) {
  return m == PromptMode::kClassPlusGenerated || m == PromptMode::kGeneratedOnly;
}

struct PromptConfig {
  PromptMode mode = PromptMode::kClassPlusGenerated;
  std::size_t class_tokens = 1;      // n_ctx
  std::size_t generated_tokens = 1;  // n_vg
  std::size_t unified_tokens = 2;    // n_u
  Real init_std = 0.02;
  Real leaky_slope = 0.01;
};

// Learnable prompt state: per-class contexts, the shared context-generating MLP,
// and the unified contexts. Only the groups implied by the mode exist.
class PromptParams {
 public:
  PromptParams() = default;
  PromptParams(PromptConfig cfg, std::size_t token_dim, std::size_t text_dim, std::uint64_t seed)
      : cfg_(cfg), token_dim_(token_dim), text_dim_(text_dim), seed_(seed) {
    Rng rng(derive_seed(seed, kStreamPromptInit, 0xffffffffULL));
    if (uses_generated_context(cfg.mode)) {
      mlp_w1_ = Tensor::matrix(text_dim, text_dim, rng.normals(text_dim * text_dim, cfg.init_std), true);
      mlp_b1_ = Tensor::zeros({text_dim}, true);
      const std::size_t out = cfg.generated_tokens * token_dim;
      mlp_w2_ = Tensor::matrix(out, text_dim, rng.normals(out * text_dim, cfg.init_std), true);
      mlp_b2_ = Tensor::zeros({out}, true);
    }
    if (cfg.mode == PromptMode::kUnified) {
      const std::size_t n = cfg.unified_tokens * token_dim;
      unified_ = Tensor::matrix(cfg.unified_tokens, token_dim, rng.normals(n, cfg.init_std), true);
    }
  }

  const PromptConfig& config() const { return cfg_; }
  PromptMode mode() const { return cfg_.mode; }
  std::size_t token_dim() const { return token_dim_; }

  // Registers a class; in class-specific modes creates its context rows from a
  // per-class seed, so row values do not depend on arrival order.
  void add_class(std::uint32_t id) {
    if (std::find(classes_.begin(), classes_.end(), id) != classes_.end()) return;
    classes_.push_back(id);
    if (uses_class_context(cfg_.mode)) {
      Rng rng(derive_seed(seed_, kStreamPromptInit, id));
      contexts_.emplace(id, Tensor::matrix(cfg_.class_tokens, token_dim_,
                                           rng.normals(cfg_.class_tokens * token_dim_, cfg_.init_std),
                                           true));
    }
  }

  bool has_class(std::uint32_t id) const {
    return std::find(classes_.begin(), classes_.end(), id) != classes_.end();
  }
  const std::vector<std::uint32_t>& classes() const { return classes_; }

  bool has_context(std::uint32_t id) const { return contexts_.contains(id); }
  const Tensor& context(std::uint32_t id) const {
    auto it = contexts_.find(id);
    if (it == contexts_.end())
      throw StateError("no context row for class " + std::to_string(id));
    return it->second;
  }

  void freeze_context(std::uint32_t id) {
    auto it = contexts_.find(id);
    if (it == contexts_.end()) throw StateError("no context row for class " + std::to_string(id));
    it->second.set_requires_grad(false);
  }

  const Tensor& mlp_w1() const { return mlp_w1_; }
  const Tensor& mlp_b1() const { return mlp_b1_; }
  const Tensor& mlp_w2() const { return mlp_w2_; }
  const Tensor& mlp_b2() const { return mlp_b2_; }
  const Tensor& unified() const { return unified_; }

  // Leaves that currently receive gradients, in a stable order.
  std::vector<Tensor> trainable_leaves() const {
    std::vector<Tensor> out;
    for (auto id : sorted_classes())
      if (auto it = contexts_.find(id); it != contexts_.end() && it->second.requires_grad())
        out.push_back(it->second);
    for (auto* t : {&mlp_w1_, &mlp_b1_, &mlp_w2_, &mlp_b2_, &unified_})
      if (t->defined() && t->requires_grad()) out.push_back(*t);
    return out;
  }

  // Every value, flattened in a stable order; used for bit-identity comparisons.
  std::vector<Real> flat_values() const {
    std::vector<Real> out;
    for (auto id : sorted_classes())
      if (auto it = contexts_.find(id); it != contexts_.end())
        out.insert(out.end(), it->second.data().begin(), it->second.data().end());
    for (auto* t : {&mlp_w1_, &mlp_b1_, &mlp_w2_, &mlp_b2_, &unified_})
      if (t->defined()) out.insert(out.end(), t->data().begin(), t->data().end());
    return out;
  }

  // Deep copy with independent tensors.
  PromptParams clone() const {
    PromptParams p = *this;
    for (auto& [id, t] : p.contexts_) t = t.detach(t.requires_grad());
    for (auto* t : {&p.mlp_w1_, &p.mlp_b1_, &p.mlp_w2_, &p.mlp_b2_, &p.unified_})
      if (t->defined()) *t = t->detach(t->requires_grad());
    return p;
  }

 private:
  std::vector<std::uint32_t> sorted_classes() const {
    auto ids = classes_;
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  PromptConfig cfg_;
  std::size_t token_dim_ = 0;
  std::size_t text_dim_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<std::uint32_t> classes_;
  std::map<std::uint32_t, Tensor> contexts_;
  Tensor mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
  Tensor unified_;
};

// V_G = MLP(handcrafted embedding of the class), shaped [n_vg x token_dim].
inline Tensor compute_vg(std::uint32_t class_id, const PromptParams& params,
                         const FrozenTextTower& tower, const ClassCatalog& catalog) {
  if (!params.mlp_w1().defined()) throw StateError("prompt mode has no generated context");
  auto base = Tensor::vector(handcrafted_embedding(class_id, tower, catalog));
  auto h = leaky_relu(linear(base, params.mlp_w1(), params.mlp_b1()), params.config().leaky_slope);
  auto out = linear(h, params.mlp_w2(), params.mlp_b2());
  return reshape(out, {params.config().generated_tokens, params.token_dim()});
}

enum class TokenSource { kGenerated, kClassContext, kUnified, kClassName, kEot };

struct AssembledPrompt {
  Tensor tokens;  // [L x token_dim]
  std::vector<TokenSource> sources;

  std::size_t length() const { return sources.size(); }
  bool learnable(std::size_t pos) const {
    auto s = sources.at(pos);
    return s == TokenSource::kGenerated || s == TokenSource::kClassContext ||
           s == TokenSource::kUnified;
  }
};

inline AssembledPrompt assemble_prompt(std::uint32_t class_id, const PromptParams& params,
                                       const FrozenTextTower& tower, const ClassCatalog& catalog) {
  AssembledPrompt p;
  std::vector<Tensor> parts;
  auto mark = [&](TokenSource s, std::size_t n) { p.sources.insert(p.sources.end(), n, s); };
  const auto mode = params.mode();
  if (mode == PromptMode::kUnified) {
    parts.push_back(params.unified());
    mark(TokenSource::kUnified, params.unified().rows());
  } else {
    if (uses_generated_context(mode)) {
      auto vg = compute_vg(class_id, params, tower, catalog);
      mark(TokenSource::kGenerated, vg.rows());
      parts.push_back(std::move(vg));
    }
    if (uses_class_context(mode)) {
      auto& v = params.context(class_id);
      mark(TokenSource::kClassContext, v.rows());
      parts.push_back(v);
    }
  }
  auto& name_tokens = catalog.tokens(class_id);
  std::vector<std::size_t> tail(name_tokens.begin(), name_tokens.end());
  tail.push_back(Vocabulary::kEot);
  parts.push_back(tower.token_embeddings(tail));
  mark(TokenSource::kClassName, name_tokens.size());
  mark(TokenSource::kEot, 1);
  p.tokens = concat_rows(parts);
  return p;
}

inline Tensor encode_prompt(const AssembledPrompt& p, const FrozenTextTower& tower) {
  return tower.encode(p.tokens);
}

}  // namespace cgil
