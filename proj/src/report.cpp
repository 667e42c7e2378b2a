#include "remoe/report.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace remoe {

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot open '{}' for writing", tmp));
    out << contents;
    out.flush();
    if (!out) throw std::runtime_error(fmt::format("write to '{}' failed", tmp));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error(fmt::format("cannot rename '{}' to '{}'", tmp, path));
  }
}

std::string format_double(double v) { return fmt::format("{}", v); }

void CsvTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != columns_.size()) {
    throw std::logic_error("CsvTable: row width does not match header");
  }
  rows_.push_back(std::move(cells));
}

std::string CsvTable::str() const {
  std::string out;
  auto append_line = [&out](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  append_line(columns_);
  for (const auto& row : rows_) append_line(row);
  return out;
}

std::string RunManifest::id() const {
  std::uint64_t hash = 14695981039346656037ull;
  auto mix = [&hash](const std::string& s) {
    for (unsigned char c : s) {
      hash ^= c;
      hash *= 1099511628211ull;
    }
    hash ^= 0xff;
    hash *= 1099511628211ull;
  };
  mix(subcommand);
  mix(config.dump());
  for (const auto& in : inputs) mix(in);
  mix(std::to_string(seed));
  return fmt::format("{:016x}", hash);
}

nlohmann::ordered_json RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["manifest_id"] = id();
  j["subcommand"] = subcommand;
  j["config"] = config;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["seed"] = seed;
  j["tool_version"] = tool_version;
  j["wall_seconds"] = wall_seconds;
  return j;
}

void append_manifest(const std::string& path, const RunManifest& manifest) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error(fmt::format("cannot append manifest to '{}'", path));
  out << manifest.to_json().dump() << '\n';
}

}  // namespace remoe
