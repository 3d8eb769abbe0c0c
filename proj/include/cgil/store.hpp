#pragma once

// GeneratorStore: the append-only map class_id -> decoder-side generator, and
// the "CGILSTR1" container format it (and tower snapshots) serialise into.
//
//   "CGILSTR1" | u32 kind | u32 entry count |
//   per entry: u32 class_id | u32 layer count |
//     per layer: u32 rows | u32 cols | rows*cols f32 weights (row-major) | rows f32 biases
//
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "cgil/binio.hpp"
#include "cgil/errors.hpp"
#include "cgil/gaussian.hpp"
#include "cgil/rng.hpp"
#include "cgil/vae.hpp"

namespace cgil {

inline constexpr std::string_view kStoreMagic = "CGILSTR1";

enum class GeneratorKind : std::uint32_t { kGaussian = 0, kMoG = 1, kVae = 2, kTower = 3 };

inline std::string_view kind_name(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::kGaussian: return "gaussian";
    case GeneratorKind::kMoG: return "mog";
    case GeneratorKind::kVae: return "vae";
    case GeneratorKind::kTower: return "tower";
  }
  return "unknown";
}

inline GeneratorKind parse_generator_kind(std::string_view s) {
  if (s == "gaussian") return GeneratorKind::kGaussian;
  if (s == "mog") return GeneratorKind::kMoG;
  if (s == "vae") return GeneratorKind::kVae;
  throw SpecError("unknown generator kind \"" + std::string(s) + "\"");
}

struct LayerBlob {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<Real> weights;  // rows*cols
  std::vector<Real> biases;   // rows
};

struct EntryBlob {
  std::uint32_t id = 0;
  std::vector<LayerBlob> layers;
};

struct StoreBlob {
  GeneratorKind kind = GeneratorKind::kGaussian;
  std::vector<EntryBlob> entries;
  // Byte offset of each layer header, for positional diagnostics after parsing.
  std::vector<std::vector<std::size_t>> layer_offsets;
};

inline std::vector<char> encode_store_blob(const StoreBlob& blob) {
  ByteWriter w;
  w.magic(kStoreMagic);
  w.u32(static_cast<std::uint32_t>(blob.kind));
  w.u32(static_cast<std::uint32_t>(blob.entries.size()));
  for (auto& e : blob.entries) {
    w.u32(e.id);
    w.u32(static_cast<std::uint32_t>(e.layers.size()));
    for (auto& l : e.layers) {
      w.u32(l.rows);
      w.u32(l.cols);
      for (Real v : l.weights) w.f32(v);
      for (Real v : l.biases) w.f32(v);
    }
  }
  return w.bytes();
}

inline StoreBlob decode_store_blob(std::vector<char> bytes) {
  ByteReader r(std::move(bytes));
  r.expect_magic(kStoreMagic);
  StoreBlob blob;
  const std::size_t kind_at = r.offset();
  const auto kind = r.u32("kind tag");
  if (kind > static_cast<std::uint32_t>(GeneratorKind::kTower))
    throw FormatError(kind_at, "unknown kind tag " + std::to_string(kind));
  blob.kind = static_cast<GeneratorKind>(kind);
  const auto count = r.u32("entry count");
  for (std::uint32_t e = 0; e < count; ++e) {
    EntryBlob entry;
    entry.id = r.u32("class id");
    const auto layers = r.u32("layer count");
    std::vector<std::size_t> offsets;
    for (std::uint32_t l = 0; l < layers; ++l) {
      offsets.push_back(r.offset());
      LayerBlob layer;
      layer.rows = r.u32("layer rows");
      layer.cols = r.u32("layer cols");
      const std::uint64_t nw = std::uint64_t{layer.rows} * layer.cols;
      r.need(static_cast<std::size_t>((nw + layer.rows) * 4), "layer payload");
      layer.weights.resize(nw);
      for (auto& v : layer.weights) v = r.f32("weight");
      layer.biases.resize(layer.rows);
      for (auto& v : layer.biases) v = r.f32("bias");
      entry.layers.push_back(std::move(layer));
    }
    blob.entries.push_back(std::move(entry));
    blob.layer_offsets.push_back(std::move(offsets));
  }
  if (!r.at_end()) throw FormatError(r.offset(), "trailing bytes after last entry");
  return blob;
}

// ---------------------------------------------------------------------------

using GeneratorEntry = std::variant<GaussianModel, MoGModel, VaeDecoder>;

inline std::size_t entry_dim(const GeneratorEntry& e) {
  return std::visit(
      [](const auto& m) -> std::size_t {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, VaeDecoder>) return m.output_dim();
        else return m.dim();
      },
      e);
}

inline GeneratorKind entry_kind(const GeneratorEntry& e) {
  return static_cast<GeneratorKind>(e.index());
}

// Draws n raw feature vectors from one stored generator.
inline Matrix sample_entry(const GeneratorEntry& e, std::size_t n, std::uint64_t seed) {
  return std::visit(
      [&](const auto& m) -> Matrix {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GaussianModel>) return sample_gaussian(m, n, seed);
        else if constexpr (std::is_same_v<T, MoGModel>) return sample_mog(m, n, seed);
        else return sample_vae(m, n, seed);
      },
      e);
}

class GeneratorStore {
 public:
  GeneratorStore() = default;
  GeneratorStore(GeneratorKind kind, std::size_t dim) : kind_(kind), dim_(dim) {
    if (kind == GeneratorKind::kTower) throw SpecError("tower is not a generator kind");
  }

  GeneratorKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool contains(std::uint32_t id) const { return entries_.contains(id); }

  // Append-only: existing entries are never replaced.
  void add(std::uint32_t class_id, GeneratorEntry entry) {
    if (entries_.contains(class_id))
      throw StateError("generator store already holds class " + std::to_string(class_id));
    if (entry_kind(entry) != kind_)
      throw StateError("generator kind " + std::string(kind_name(entry_kind(entry))) +
                       " added to a " + std::string(kind_name(kind_)) + " store");
    if (entry_dim(entry) != dim_)
      throw StateError("generator for class " + std::to_string(class_id) + " has dim " +
                       std::to_string(entry_dim(entry)) + ", store has " + std::to_string(dim_));
    entries_.emplace(class_id, std::move(entry));
  }

  const GeneratorEntry& at(std::uint32_t class_id) const {
    auto it = entries_.find(class_id);
    if (it == entries_.end()) throw LookupError("no generator for class " + std::to_string(class_id));
    return it->second;
  }

  std::vector<std::uint32_t> class_ids() const {
    std::vector<std::uint32_t> ids;
    for (auto& [id, _] : entries_) ids.push_back(id);
    return ids;
  }

  const std::map<std::uint32_t, GeneratorEntry>& entries() const { return entries_; }

 private:
  GeneratorKind kind_ = GeneratorKind::kGaussian;
  std::size_t dim_ = 0;
  std::map<std::uint32_t, GeneratorEntry> entries_;
};

inline Matrix sample_decoder(const GeneratorStore& store, std::uint32_t class_id, std::size_t n,
                             std::uint64_t seed) {
  return sample_entry(store.at(class_id), n, seed);
}

namespace detail {

inline LayerBlob blob_of(const Matrix& w, std::span<const Real> b) {
  return {static_cast<std::uint32_t>(w.rows), static_cast<std::uint32_t>(w.cols), w.data,
          {b.begin(), b.end()}};
}

inline LayerBlob blob_of(const AffineLayer& l) {
  return {static_cast<std::uint32_t>(l.out_dim()), static_cast<std::uint32_t>(l.in_dim()),
          l.weight.to_vector(), l.bias.to_vector()};
}

inline EntryBlob entry_blob(std::uint32_t id, const GeneratorEntry& e) {
  EntryBlob out{id, {}};
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GaussianModel>) {
          out.layers.push_back(blob_of(m.cholesky_factor, m.mean));
        } else if constexpr (std::is_same_v<T, MoGModel>) {
          // Mixing weights first as a 1 x K layer, then one (L_k, mean_k) layer per component.
          const Real zero = 0.0;
          out.layers.push_back(blob_of(Matrix(1, m.k(), m.weights), std::span<const Real>(&zero, 1)));
          for (auto& c : m.components) out.layers.push_back(blob_of(c.cholesky_factor, c.mean));
        } else {
          for (auto& l : m.layers) out.layers.push_back(blob_of(l));
        }
      },
      e);
  return out;
}

inline GaussianModel gaussian_from(const LayerBlob& l, std::size_t at) {
  if (l.rows != l.cols) throw FormatError(at, "gaussian layer must be square");
  Matrix f(l.rows, l.cols, l.weights);
  for (std::size_t i = 0; i < f.rows; ++i) {
    if (!(f(i, i) > 0.0)) throw FormatError(at, "cholesky factor has a non-positive diagonal");
    for (std::size_t j = i + 1; j < f.cols; ++j)
      if (f(i, j) != 0.0) throw FormatError(at, "cholesky factor is not lower-triangular");
  }
  return GaussianModel::from_factor(l.biases, std::move(f));
}

}  // namespace detail

inline void save_store(const GeneratorStore& store, const std::filesystem::path& path) {
  StoreBlob blob{store.kind(), {}, {}};
  for (auto& [id, e] : store.entries()) blob.entries.push_back(detail::entry_blob(id, e));
  write_file_atomic(path, encode_store_blob(blob));
}

// Parses a store file. With `expected_dim`, every entry must produce vectors of that width.
inline GeneratorStore load_store(const std::filesystem::path& path,
                                 std::optional<std::size_t> expected_dim = std::nullopt) {
  auto blob = decode_store_blob(read_file_bytes(path));
  if (blob.kind == GeneratorKind::kTower) throw FormatError(8, "file holds a tower snapshot, not generators");
  std::optional<std::size_t> dim = expected_dim;
  std::map<std::uint32_t, GeneratorEntry> parsed;
  for (std::size_t e = 0; e < blob.entries.size(); ++e) {
    auto& entry = blob.entries[e];
    auto& offs = blob.layer_offsets[e];
    auto at = [&](std::size_t l) { return l < offs.size() ? offs[l] : 16; };
    if (entry.layers.empty()) throw FormatError(at(0), "entry for class " + std::to_string(entry.id) + " has no layers");
    GeneratorEntry ge;
    std::size_t width = 0, width_at = at(0);
    switch (blob.kind) {
      case GeneratorKind::kGaussian: {
        if (entry.layers.size() != 1) throw FormatError(at(1), "gaussian entry must have one layer");
        auto g = detail::gaussian_from(entry.layers[0], at(0));
        width = g.dim();
        ge = std::move(g);
        break;
      }
      case GeneratorKind::kMoG: {
        auto& head = entry.layers[0];
        if (head.rows != 1 || head.cols + 1 != entry.layers.size())
          throw FormatError(at(0), "mixture weight layer does not match component count");
        MoGModel m;
        m.weights = head.weights;
        for (std::size_t l = 1; l < entry.layers.size(); ++l) {
          m.components.push_back(detail::gaussian_from(entry.layers[l], at(l)));
          if (m.components.back().dim() != m.components.front().dim())
            throw FormatError(at(l), "mixture components disagree on dimension");
        }
        width = m.dim();
        ge = std::move(m);
        break;
      }
      case GeneratorKind::kVae: {
        VaeDecoder dec;
        for (std::size_t l = 0; l < entry.layers.size(); ++l) {
          auto& lb = entry.layers[l];
          if (l > 0 && lb.cols != entry.layers[l - 1].rows)
            throw FormatError(at(l), "decoder layer input width does not match previous layer");
          dec.layers.push_back({Tensor::matrix(lb.rows, lb.cols, lb.weights), Tensor::vector(lb.biases)});
        }
        width = dec.output_dim();
        width_at = at(entry.layers.size() - 1);
        ge = std::move(dec);
        break;
      }
      case GeneratorKind::kTower: break;
    }
    if (dim && *dim != width)
      throw FormatError(width_at, "class " + std::to_string(entry.id) + " has dimension " +
                                      std::to_string(width) + ", expected " + std::to_string(*dim));
    dim = width;
    if (!parsed.emplace(entry.id, std::move(ge)).second)
      throw FormatError(at(0), "duplicate class id " + std::to_string(entry.id));
  }
  GeneratorStore store(blob.kind, dim.value_or(0));
  for (auto& [id, e] : parsed) store.add(id, std::move(e));
  return store;
}

}  // namespace cgil
