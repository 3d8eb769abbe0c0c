#pragma once

// Feature-vector files: a little-endian binary body ("CGILEMB1", u32 dim,
// u32 count, then count x (u32 class_id, dim x f32)) and a JSON sidecar
// manifest at "<path>.json" naming every class.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "cgil/binio.hpp"
#include "cgil/errors.hpp"
#include "cgil/linalg.hpp"

namespace cgil {

inline constexpr std::string_view kEmbeddingMagic = "CGILEMB1";

struct FeatureRecords {
  Matrix features;  // [count x dim], widened from f32
  std::vector<std::uint32_t> labels;

  std::size_t dim() const { return features.cols; }
  std::size_t size() const { return labels.size(); }
};

struct EmbeddingManifest {
  std::size_t dim = 0;
  std::size_t count = 0;
  std::map<std::uint32_t, std::string> classes;
  std::string source;
  nlohmann::json extra = nlohmann::json::object();  // free-form provenance
};

inline std::filesystem::path manifest_path(const std::filesystem::path& file) {
  auto p = file;
  p += ".json";
  return p;
}

inline std::vector<char> encode_embeddings(const FeatureRecords& recs) {
  if (recs.features.rows != recs.labels.size())
    throw ShapeError(std::to_string(recs.features.rows) + " rows for " +
                     std::to_string(recs.labels.size()) + " labels");
  ByteWriter w;
  w.magic(kEmbeddingMagic);
  w.u32(static_cast<std::uint32_t>(recs.dim()));
  w.u32(static_cast<std::uint32_t>(recs.size()));
  for (std::size_t i = 0; i < recs.size(); ++i) {
    w.u32(recs.labels[i]);
    for (Real v : recs.features.row(i)) w.f32(v);
  }
  return w.bytes();
}

inline FeatureRecords decode_embeddings(std::vector<char> bytes) {
  ByteReader r(std::move(bytes));
  r.expect_magic(kEmbeddingMagic);
  const std::size_t dim = r.u32("dim");
  const std::size_t count_at = r.offset();
  const std::size_t count = r.u32("record count");
  if (dim == 0) throw FormatError(8, "dimension must be positive");
  const std::size_t record = 4 * (dim + 1);
  const std::size_t body = r.remaining();
  if (body < count * record)
    throw FormatError(16 + (body / record) * record,
                      "truncated record " + std::to_string(body / record) + " of " +
                          std::to_string(count) + " declared at offset " + std::to_string(count_at));
  if (body > count * record)
    throw FormatError(16 + count * record, std::to_string(body - count * record) +
                                               " trailing bytes after " + std::to_string(count) +
                                               " records");
  FeatureRecords out{Matrix(count, dim), std::vector<std::uint32_t>(count)};
  for (std::size_t i = 0; i < count; ++i) {
    out.labels[i] = r.u32("class id");
    for (std::size_t j = 0; j < dim; ++j) out.features.data[i * dim + j] = r.f32("feature");
  }
  return out;
}

inline nlohmann::json manifest_json(const EmbeddingManifest& m) {
  nlohmann::json classes = nlohmann::json::object();
  for (auto& [id, name] : m.classes) classes[std::to_string(id)] = name;
  return {{"format", std::string(kEmbeddingMagic)},
          {"dim", m.dim},
          {"count", m.count},
          {"classes", classes},
          {"source", m.source},
          {"extra", m.extra}};
}

inline EmbeddingManifest parse_manifest(const std::string& text, const std::string& where) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(e.byte, where + ": manifest is not valid JSON");
  }
  EmbeddingManifest m;
  try {
    if (j.at("format").get<std::string>() != kEmbeddingMagic)
      throw FormatError(0, where + ": manifest format tag is not " + std::string(kEmbeddingMagic));
    m.dim = j.at("dim").get<std::size_t>();
    m.count = j.at("count").get<std::size_t>();
    for (auto& [key, name] : j.at("classes").items()) {
      std::size_t used = 0;
      unsigned long id = 0;
      try {
        id = std::stoul(key, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != key.size() || id > UINT32_MAX)
        throw FormatError(0, where + ": manifest class key \"" + key + "\" is not a u32");
      m.classes.emplace(static_cast<std::uint32_t>(id), name.get<std::string>());
    }
    m.source = j.value("source", "");
    if (j.contains("extra")) m.extra = j.at("extra");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, where + ": malformed manifest (" + std::string(e.what()) + ")");
  }
  return m;
}

// Throws a format error when the manifest and the binary body disagree.
inline void check_manifest(const EmbeddingManifest& m, const FeatureRecords& recs) {
  if (m.dim != recs.dim())
    throw FormatError(8, "manifest dim " + std::to_string(m.dim) + " does not match header dim " +
                             std::to_string(recs.dim()));
  if (m.count != recs.size())
    throw FormatError(12, "manifest count " + std::to_string(m.count) +
                              " does not match header count " + std::to_string(recs.size()));
  const std::size_t record = 4 * (recs.dim() + 1);
  for (std::size_t i = 0; i < recs.size(); ++i)
    if (!m.classes.contains(recs.labels[i]))
      throw FormatError(16 + i * record, "manifest mismatch: class id " +
                                             std::to_string(recs.labels[i]) +
                                             " is missing from the manifest");
}

inline void write_embedding_file(const std::filesystem::path& path, const FeatureRecords& recs,
                                 EmbeddingManifest manifest) {
  manifest.dim = recs.dim();
  manifest.count = recs.size();
  check_manifest(manifest, recs);
  write_file_atomic(path, encode_embeddings(recs));
  write_file_atomic(manifest_path(path), manifest_json(manifest).dump(2) + "\n");
}

struct EmbeddingFile {
  FeatureRecords records;
  EmbeddingManifest manifest;
};

inline EmbeddingFile load_embedding_file(const std::filesystem::path& path) {
  EmbeddingFile f;
  f.records = decode_embeddings(read_file_bytes(path));
  const auto mp = manifest_path(path);
  auto text = read_file_bytes(mp);
  f.manifest = parse_manifest(std::string(text.begin(), text.end()), mp.string());
  check_manifest(f.manifest, f.records);
  return f;
}

}  // namespace cgil
