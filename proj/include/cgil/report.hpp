#pragma once

// Run reports: a versioned JSON document with the config echo, accuracy
// matrix, summary metrics and training logs, plus an optional CSV of the
// matrix. Everything except "wall_times" is covered by a deterministic hash.

#include <charconv>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cgil/binio.hpp"
#include "cgil/errors.hpp"
#include "cgil/metrics.hpp"

namespace cgil {

inline constexpr int kReportFormatVersion = 1;

struct TaskTiming {
  double fit_seconds = 0.0;
  double align_seconds = 0.0;
  double eval_seconds = 0.0;
};

struct RunReport {
  std::string method;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json benchmark = nlohmann::json::object();
  std::vector<std::vector<std::uint32_t>> task_order;
  AccuracyMatrix matrix;
  nlohmann::json training_logs = nlohmann::json::array();
  std::vector<TaskTiming> timings;
  double total_seconds = 0.0;

  Real final_average_accuracy() const { return faa(matrix); }
  std::optional<Real> class_incremental_transfer() const {
    if (matrix.tasks() < 2) return std::nullopt;
    return ci_transfer(matrix);
  }
};

inline void require_complete(const AccuracyMatrix& m) {
  if (m.tasks() == 0) throw CompletenessError("report has no accuracy matrix");
  for (std::size_t t = 0; t < m.tasks(); ++t)
    if (!m.row_complete(t))
      throw CompletenessError("accuracy matrix row " + std::to_string(t + 1) + " is incomplete");
}

// FNV-1a 64 over the compact dump of every field except wall times and the hash itself.
inline std::string deterministic_hash(const nlohmann::json& report) {
  auto j = report;
  j.erase("wall_times");
  j.erase("deterministic_hash");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::json report_json(const RunReport& r) {
  require_complete(r.matrix);
  const std::size_t T = r.matrix.tasks();
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t t = 0; t < T; ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t i = 0; i < T; ++i) row.push_back(r.matrix.at(t, i));
    rows.push_back(row);
  }
  nlohmann::json j;
  j["format_version"] = kReportFormatVersion;
  j["method"] = r.method;
  j["config"] = r.config;
  j["benchmark"] = r.benchmark;
  j["task_order"] = r.task_order;
  j["tasks"] = T;
  j["accuracy_matrix"] = rows;
  j["faa"] = r.final_average_accuracy();
  if (auto ci = r.class_incremental_transfer()) {
    j["ci_transfer"] = *ci;
  } else {
    j["ci_transfer"] = nullptr;
    j["ci_transfer_note"] = "undefined for a single task";
  }
  j["training_logs"] = r.training_logs;
  nlohmann::json times = nlohmann::json::array();
  for (auto& t : r.timings)
    times.push_back({{"fit_seconds", t.fit_seconds},
                     {"align_seconds", t.align_seconds},
                     {"eval_seconds", t.eval_seconds}});
  j["wall_times"] = {{"total_seconds", r.total_seconds}, {"tasks", times}};
  j["deterministic_hash"] = deterministic_hash(j);
  return j;
}

inline RunReport parse_report(const nlohmann::json& j) {
  RunReport r;
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kReportFormatVersion)
      throw FormatError(0, "report format version " + std::to_string(version) + " is not supported");
    r.method = j.at("method").get<std::string>();
    r.config = j.value("config", nlohmann::json::object());
    r.benchmark = j.value("benchmark", nlohmann::json::object());
    if (j.contains("task_order"))
      r.task_order = j.at("task_order").get<std::vector<std::vector<std::uint32_t>>>();
    r.training_logs = j.value("training_logs", nlohmann::json::array());
    if (!j.contains("accuracy_matrix") || !j.at("accuracy_matrix").is_array() ||
        j.at("accuracy_matrix").empty())
      throw CompletenessError("report has no accuracy matrix");
    auto& rows = j.at("accuracy_matrix");
    r.matrix = AccuracyMatrix(rows.size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
      if (!rows[t].is_array() || rows[t].size() != rows.size())
        throw CompletenessError("accuracy matrix row " + std::to_string(t + 1) + " is not " +
                                std::to_string(rows.size()) + " wide");
      for (std::size_t i = 0; i < rows.size(); ++i)
        if (!rows[t][i].is_null()) r.matrix.set(t, i, rows[t][i].get<Real>());
    }
    if (j.contains("wall_times")) {
      auto& w = j.at("wall_times");
      r.total_seconds = w.value("total_seconds", 0.0);
      for (auto& t : w.value("tasks", nlohmann::json::array()))
        r.timings.push_back({t.value("fit_seconds", 0.0), t.value("align_seconds", 0.0),
                             t.value("eval_seconds", 0.0)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, "malformed report (" + std::string(e.what()) + ")");
  }
  require_complete(r.matrix);
  return r;
}

inline RunReport load_report(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  try {
    return parse_report(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(e.byte, path.string() + " is not valid JSON");
  }
}

// Header task_1..task_T, then one row per checkpoint t; shortest round-trip decimals.
inline std::string accuracy_csv(const AccuracyMatrix& m) {
  require_complete(m);
  const std::size_t T = m.tasks();
  std::string out;
  for (std::size_t i = 0; i < T; ++i) out += (i ? ",task_" : "task_") + std::to_string(i + 1);
  out += '\n';
  char buf[32];
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < T; ++i) {
      if (i) out += ',';
      auto res = std::to_chars(buf, buf + sizeof buf, m.at(t, i));
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  return out;
}

inline void emit_report(const RunReport& r, const std::filesystem::path& json_path,
                        const std::optional<std::filesystem::path>& csv_path = std::nullopt) {
  const auto j = report_json(r);
  write_file_atomic(json_path, j.dump(2) + "\n");
  if (csv_path) write_file_atomic(*csv_path, accuracy_csv(r.matrix));
}

}  // namespace cgil
