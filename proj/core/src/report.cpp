#include "quanos/report.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "quanos/error.hpp"
#include "quanos/hash.hpp"

namespace quanos {

namespace fs = std::filesystem;

std::vector<fs::path> emit_plotdata(const std::vector<Series>& series, const fs::path& dest) {
  if (series.empty()) throw ArgumentError("emit_plotdata needs at least one series");
  std::error_code ec;
  fs::create_directories(dest, ec);
  if (ec || !fs::is_directory(dest)) throw IoError("cannot create plot-data directory '" + dest.string() + "'");

  std::vector<fs::path> written;
  CsvWriter index({"series", "file", "rows", "sha256"});
  for (const auto& s : series) {
    if (s.name.empty() || s.name.find_first_of("/\\") != std::string::npos || s.name == "index") {
      throw ArgumentError("bad series name '" + s.name + "'");
    }
    CsvWriter w(s.columns);
    for (const auto& r : s.rows) w.row(r);
    const fs::path file = dest / (s.name + ".csv");
    w.save(file);
    written.push_back(file);
    index.row({s.name, file.filename().string(), static_cast<std::uint64_t>(w.rows()), to_hex(sha256(w.str()))});
  }
  index.save(dest / "index.csv");
  written.push_back(dest / "index.csv");
  return written;
}

namespace {

std::string relative_to(const fs::path& p, const fs::path& base) {
  std::error_code ec;
  auto rel = fs::relative(p, base, ec);
  if (ec || rel.empty() || rel.native().rfind("..", 0) == 0) return fs::absolute(p).lexically_normal().string();
  return rel.generic_string();
}

}  // namespace

void RunManifest::add_input(const fs::path& p, const fs::path& base) {
  inputs.push_back({relative_to(p, base), sha256_file(p)});
}

void RunManifest::add_output(const fs::path& p, const fs::path& base) {
  outputs.push_back({relative_to(p, base), sha256_file(p)});
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["code_version"] = code_version;
  j["command_line"] = command_line;
  j["config"] = config;
  j["seeds"] = seeds;
  auto entries = [](const std::vector<ManifestEntry>& v) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (const auto& e : v) a.push_back({{"path", e.path}, {"sha256", e.sha256}});
    return a;
  };
  j["inputs"] = entries(inputs);
  j["outputs"] = entries(outputs);
  j["timings_s"] = timings_s;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  RunManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.code_version = j.value("code_version", "");
    m.command_line = j.at("command_line").get<std::vector<std::string>>();
    m.config = j.value("config", std::map<std::string, std::string>{});
    m.seeds = j.value("seeds", std::map<std::string, std::uint64_t>{});
    for (const char* key : {"inputs", "outputs"}) {
      auto& dst = std::string(key) == "inputs" ? m.inputs : m.outputs;
      for (const auto& e : j.value(key, nlohmann::json::array())) {
        dst.push_back({e.at("path").get<std::string>(), e.at("sha256").get<std::string>()});
      }
    }
    m.timings_s = j.value("timings_s", std::map<std::string, double>{});
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void RunManifest::save(const fs::path& path) const { write_text_file(path, to_json()); }

RunManifest RunManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return from_json(os.str());
}

std::vector<VerifyIssue> verify_manifest(const fs::path& manifest_path) {
  const auto m = RunManifest::load(manifest_path);
  const fs::path base = manifest_path.parent_path();
  std::vector<VerifyIssue> issues;
  auto check = [&](const ManifestEntry& e) {
    const fs::path p = fs::path(e.path).is_absolute() ? fs::path(e.path) : base / e.path;
    if (!fs::exists(p)) {
      issues.push_back({e.path, "missing"});
    } else if (sha256_file(p) != e.sha256) {
      issues.push_back({e.path, "hash mismatch"});
    }
  };
  for (const auto& e : m.outputs) check(e);
  for (const auto& e : m.inputs) check(e);
  return issues;
}

}  // namespace quanos
