#pragma once

// Report emission helpers: atomic file writes, CSV tables and run manifests.

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace remoe {

/// Writes to `<path>.tmp` and renames over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  void add_row(std::vector<std::string> cells);
  std::string str() const;
  std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

/// Sidecar record describing one CLI run. Reports stay byte-reproducible, so
/// the wall-clock part lives only in the append-only manifest log.
struct RunManifest {
  std::string subcommand;
  nlohmann::ordered_json config;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  std::string tool_version;
  double wall_seconds = 0.0;

  /// FNV-1a over subcommand + config + inputs; independent of timing.
  std::string id() const;
  nlohmann::ordered_json to_json() const;
};

/// Appends one JSON line to `path`.
void append_manifest(const std::string& path, const RunManifest& manifest);

}  // namespace remoe
