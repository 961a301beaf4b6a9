// wpl-lab: runs the forgetting experiments and the Laplace checks.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wpl/error.hpp"
#include "wpl/experiment.hpp"

namespace {

using nlohmann::json;

/// Applies "a.b.c=value" to the raw config; value is parsed as JSON, else kept as a string.
void apply_set(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw wpl::ConfigError("--set expects key=value, got '" + assignment + "'");
  std::string pointer = "/" + assignment.substr(0, eq);
  for (auto& c : pointer) {
    if (c == '.') c = '/';
  }
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  j[json::json_pointer(pointer)] = value;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-model forgetting experiments with the weight plasticity loss"};
  app.name("wpl-lab");
  std::string command;
  std::string config_path;
  std::vector<std::uint64_t> seeds;
  std::string out_dir;
  bool no_wpl = false;
  double alpha = -1.0;
  std::vector<std::string> sets;

  app.add_option("command", command, "two-model | sweep | nas | verify-laplace")->required();
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seeds, "Seed; repeat for several (overrides the config list)");
  app.add_option("--out", out_dir, "Output directory");
  app.add_flag("--no-wpl", no_wpl, "Run only the baseline variant");
  app.add_option("--alpha", alpha, "Initial anchor strength for both experiments")->check(CLI::NonNegativeNumber);
  app.add_option("--set", sets, "Override any config key, e.g. --set two_model.epochs_b=10");
  app.footer("Environment: WPL_LAB_THREADS caps the number of worker threads.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    wpl::cli::command_from_name(command);
  } catch (const wpl::ConfigError& e) {
    std::cerr << "wpl-lab: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    json raw = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      raw = json::parse(in);
    }
    raw["command"] = command;
    for (const auto& s : sets) apply_set(raw, s);
    wpl::cli::RunConfig cfg = wpl::cli::parse_config(raw);
    if (!seeds.empty()) cfg.seeds = seeds;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (no_wpl) cfg.use_wpl = false;
    if (alpha >= 0.0) {
      cfg.plan.wpl.alpha.alpha0 = alpha;
      cfg.search.wpl.alpha.alpha0 = alpha;
    }
    return wpl::cli::run(cfg, std::cout);
  } catch (const json::exception& e) {
    std::cerr << "wpl-lab: invalid config: " << e.what() << '\n';
    return 2;
  } catch (const wpl::ConfigError& e) {
    std::cerr << "wpl-lab: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "wpl-lab: " << e.what() << '\n';
    return 1;
  }
}
