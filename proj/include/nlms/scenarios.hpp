#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "nlms/errors.hpp"
#include "nlms/mesh.hpp"

namespace nlms {

// key = value lines, '#' comments, and [section] headers that prefix the
// following keys with "section.". Keys set from the command line carry line 0.
struct ConfigEntry {
  std::string value;
  int line = 0;
};

class ExperimentConfig {
 public:
  static ExperimentConfig parse(std::istream& in, const std::string& source = "<config>");
  static ExperimentConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, ConfigEntry>& entries() const { return entries_; }
  const std::string& source() const { return source_; }
  std::string scenario() const;
  // "<source>:<line>: key" or "--set key" for overrides.
  std::string where(const std::string& key) const;

 private:
  std::string source_;
  std::map<std::string, ConfigEntry> entries_;
};

enum class KeyKind { Text, Int, Real, RealList, Bool, Point };

struct KeySpec {
  std::string name;
  KeyKind kind = KeyKind::Text;
  std::string default_value;
  std::string help;
  std::vector<std::string> choices;  // Text only; empty accepts anything
  bool monotone = false;              // RealList: strictly increasing or decreasing
  bool positive = false;              // Int / Real / RealList entries > 0
  int size = 0;                       // Point: number of components
};

// Config with defaults filled in, checked against a key schema.
class ResolvedConfig {
 public:
  ResolvedConfig(const ExperimentConfig& cfg, const std::vector<KeySpec>& schema);

  const std::string& text(const std::string& key) const;
  int integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> list(const std::string& key) const;
  std::vector<double> point(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }
  // True when the key came from the config or an override rather than a default.
  bool given(const std::string& key) const { return given_.count(key) != 0; }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> given_;
};

struct Check {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

class RunContext {
 public:
  RunContext(const ResolvedConfig& cfg, std::filesystem::path dir) : cfg_(cfg), dir_(std::move(dir)) {}

  const ResolvedConfig& config() const { return cfg_; }
  // Opens <dir>/<name> for writing and records it as an artifact.
  std::ofstream open(const std::string& name);
  bool svg_enabled() const { return cfg_.flag("output.svg"); }
  void check(const std::string& name, bool passed, double value, double tolerance, const std::string& detail = {});

  nlohmann::ordered_json results = nlohmann::ordered_json::object();
  const std::vector<Check>& checks() const { return checks_; }
  const std::vector<std::string>& artifacts() const { return artifacts_; }

 private:
  const ResolvedConfig& cfg_;
  std::filesystem::path dir_;
  std::vector<Check> checks_;
  std::vector<std::string> artifacts_;
};

struct Scenario {
  std::string name;
  std::string summary;
  std::string exercises;  // which parts of the method the scenario runs
  std::vector<KeySpec> keys;
  std::function<void(RunContext&)> run;
};

// Keys every scenario accepts (scenario, run.*, output.*, manifold.*).
const std::vector<KeySpec>& common_keys();
const std::vector<Scenario>& scenarios();
std::vector<std::string> list_scenarios();
// Throws ConfigError for an unknown name.
const Scenario& find_scenario(const std::string& name);
std::string describe(const std::string& name);
// Full schema of a scenario: common keys followed by its own.
std::vector<KeySpec> scenario_schema(const Scenario& s);

enum ExitCode { kExitPass = 0, kExitCheckFailed = 1, kExitUsage = 2, kExitRuntimeError = 3 };

struct RunResult {
  int exit_code = kExitPass;
  std::filesystem::path directory;
  nlohmann::ordered_json report;
};

// Output root from NLMS_OUTPUT_ROOT, else "nlms-out".
std::filesystem::path default_output_root();

// Validates the whole config before touching the file system (ConfigError on
// failure), runs the scenario in a staging directory and moves it to
// <root>/<output.dir> when done. Runtime errors from the modules leave only
// report.json with the error recorded.
RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& output_root);

// Builds the mesh described by mesh.* and manifold.x1_* keys.
Mesh mesh_from_config(const ExperimentConfig& cfg);

}  // namespace nlms
