#pragma once

// Plot-data export and run manifests.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "quanos/csv.hpp"

namespace quanos {

/// A named long-format table, written as `<name>.csv`.
struct Series {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<CsvField>> rows;
};

/// Writes one CSV per series plus `index.csv` (series, file, rows, sha256)
/// into `dest`, creating it if needed. Returns the written paths, index
/// last. Throws ArgumentError for an empty series list or a bad series name
/// and IoError when `dest` is not writable.
std::vector<std::filesystem::path> emit_plotdata(const std::vector<Series>& series, const std::filesystem::path& dest);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory when possible
  std::string sha256;
};

struct RunManifest {
  std::vector<std::string> command_line;
  std::map<std::string, std::string> config;
  std::map<std::string, std::uint64_t> seeds;
  std::string code_version;
  std::vector<ManifestEntry> inputs;
  std::vector<ManifestEntry> outputs;
  std::map<std::string, double> timings_s;

  void add_input(const std::filesystem::path& p, const std::filesystem::path& base);
  void add_output(const std::filesystem::path& p, const std::filesystem::path& base);

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static RunManifest load(const std::filesystem::path& path);
};

struct VerifyIssue {
  std::string path;
  std::string problem;  // "missing" or "hash mismatch"
};

/// Re-hashes every output (and input) listed in the manifest; paths are
/// resolved against the manifest's directory.
std::vector<VerifyIssue> verify_manifest(const std::filesystem::path& manifest_path);

}  // namespace quanos
