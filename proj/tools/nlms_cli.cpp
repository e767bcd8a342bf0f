#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nlms/scenarios.hpp"

namespace fs = std::filesystem;

namespace {

nlms::ExperimentConfig load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  nlms::ExperimentConfig cfg = nlms::ExperimentConfig::load(path);
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw nlms::ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return cfg;
}

int cmd_run(const std::string& path, const std::vector<std::string>& sets, const std::string& root) {
  const nlms::ExperimentConfig cfg = load_with_overrides(path, sets);
  const nlms::RunResult r = nlms::run_experiment(cfg, root.empty() ? nlms::default_output_root() : fs::path(root));
  for (const auto& ch : r.report["checks"])
    std::cout << (ch["passed"].get<bool>() ? "PASS " : "FAIL ") << ch["name"].get<std::string>()
              << "  value=" << ch["value"].dump() << " tolerance=" << ch["tolerance"].dump() << '\n';
  if (!r.report["error"].is_null())
    std::cout << "ERROR " << r.report["error"]["type"].get<std::string>() << ": "
              << r.report["error"]["message"].get<std::string>() << '\n';
  std::cout << "status " << r.report["status"].get<std::string>() << ", artifacts in " << r.directory.string()
            << '\n';
  return r.exit_code;
}

int cmd_export_mesh(const std::string& path, const std::vector<std::string>& sets, const std::string& root,
                    const std::string& out_path) {
  const nlms::ExperimentConfig cfg = load_with_overrides(path, sets);
  const nlms::Mesh mesh = nlms::mesh_from_config(cfg);
  fs::path target = out_path;
  if (target.empty()) {
    const fs::path base = root.empty() ? nlms::default_output_root() : fs::path(root);
    const auto it = cfg.entries().find("output.dir");
    target = base / (it != cfg.entries().end() && !it->second.value.empty() ? it->second.value : cfg.scenario()) /
             "mesh.txt";
  }
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".partial";
  {
    std::ofstream out(tmp);
    nlms::write_mesh(mesh, out);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, target);
  std::cout << mesh.num_vertices() << " vertices, " << mesh.cells.size() << " cells written to " << target.string()
            << '\n';
  return nlms::kExitPass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Experiment runner for the nonlinear magnetic Schrodinger inverse problem"};
  app.require_subcommand(1);

  std::string cfg_path, root, out_path, describe_name;
  std::vector<std::string> sets;
  int jobs = -1, seed = -1;
  std::string output_dir;

  auto* run = app.add_subcommand("run", "run the scenario described by a config file");
  run->add_option("config", cfg_path, "config file (key = value with [section] headers)")->required();
  run->add_option("--set", sets, "override a config key, key=value (repeatable)");
  run->add_option("--jobs", jobs, "worker threads (overrides run.jobs)");
  run->add_option("--seed", seed, "seed (overrides run.seed)");
  run->add_option("--output-dir", output_dir, "artifact directory name (overrides output.dir)");
  run->add_option("--output-root", root, "output root (default $NLMS_OUTPUT_ROOT or ./nlms-out)");

  auto* list = app.add_subcommand("list", "list scenario names");
  auto* describe = app.add_subcommand("describe", "describe a scenario and its config keys");
  describe->add_option("scenario", describe_name, "scenario name")->required();

  auto* mesh = app.add_subcommand("export-mesh", "write the mesh of a config in the text mesh format");
  mesh->add_option("config", cfg_path, "config file")->required();
  mesh->add_option("--set", sets, "override a config key, key=value (repeatable)");
  mesh->add_option("--out", out_path, "output file (default <root>/<output.dir>/mesh.txt)");
  mesh->add_option("--output-root", root, "output root (default $NLMS_OUTPUT_ROOT or ./nlms-out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return nlms::kExitUsage;
  }

  if (jobs >= 0) sets.push_back("run.jobs=" + std::to_string(jobs));
  if (seed >= 0) sets.push_back("run.seed=" + std::to_string(seed));
  if (!output_dir.empty()) sets.push_back("output.dir=" + output_dir);

  try {
    if (*list) {
      for (const auto& s : nlms::scenarios()) std::cout << s.name << "  " << s.summary << '\n';
      return nlms::kExitPass;
    }
    if (*describe) {
      std::cout << nlms::describe(describe_name);
      return nlms::kExitPass;
    }
    if (*run) return cmd_run(cfg_path, sets, root);
    if (*mesh) return cmd_export_mesh(cfg_path, sets, root, out_path);
  } catch (const nlms::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return nlms::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return nlms::kExitRuntimeError;
  }
  return nlms::kExitUsage;
}
