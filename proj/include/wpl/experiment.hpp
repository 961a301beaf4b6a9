#pragma once

// Config parsing, dataset loading and orchestration for the wpl-lab tool.
// Every file except manifest.json is a pure function of config and seed.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wpl/dataset.hpp"
#include "wpl/laplace.hpp"
#include "wpl/nas.hpp"
#include "wpl/random.hpp"
#include "wpl/trainer.hpp"

namespace wpl::cli {

enum class Command { two_model, sweep, nas, verify_laplace };

std::string command_name(Command c);
Command command_from_name(const std::string& name);

struct IdxPaths {
  std::filesystem::path train_images;
  std::filesystem::path train_labels;
  std::filesystem::path val_images;
  std::filesystem::path val_labels;
  /// Keep only the first rows of each split; 0 keeps everything.
  std::size_t train_limit = 0;
  std::size_t val_limit = 0;
};

struct DataSource {
  data::SyntheticSpec synthetic;
  std::optional<IdxPaths> idx;
  /// Seed for synthetic data; the run seed when unset.
  std::optional<std::uint64_t> seed;
};

struct LaplaceSuite {
  int quadratic_models = 24;   // spread evenly over p1 in {1,2,3}, ps in {1,2}
  int thetas_per_model = 5;
  double log_a_tolerance = 1e-6;
  double factorization_tolerance = 1e-6;
  double counterexample_threshold = 1e-2;
  int quadratic_identity_cases = 100;
  double identity_tolerance = 1e-10;
};

struct RunConfig {
  Command command = Command::two_model;
  DataSource data;
  std::vector<std::uint64_t> seeds{0};
  trainer::ExperimentPlan plan;
  std::vector<int> sweep_counts{0, 1, 2, 3};
  nas::SearchConfig search = nas::default_search_config();
  LaplaceSuite laplace;
  /// false runs only the baseline variant of two-model and nas.
  bool use_wpl = true;
  std::filesystem::path out_dir = "wpl_out";
};

/// Builds a config from JSON; absent keys keep their defaults. Unknown keys are errors.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);
void validate(const RunConfig& cfg);

data::Dataset load_dataset(const DataSource& source, std::uint64_t run_seed);

/// Fixed-precision double formatting: 17 significant digits, '.' decimal point.
std::string format_double(double v);

void write_run_csv(const std::filesystem::path& path, const trainer::ForgettingRun& run);
void write_nas_csv(const std::filesystem::path& path, const nas::SearchResult& result);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

/// Median of a nonempty sample (mean of the middle pair for even sizes).
double median(std::vector<double> values);

/// Random quadratic log-likelihood with a positive definite curvature.
laplace::LaplaceModel random_quadratic_model(Rng& rng, int p1, int ps);

struct LaplaceReport {
  double max_log_a_error = 0.0;
  int log_a_cases = 0;
  double max_identity_error = 0.0;
  double factorization_deviation = 0.0;
  double counterexample_deviation = 0.0;
  bool passed = false;
  nlohmann::json to_json() const;
};

LaplaceReport verify_laplace(const LaplaceSuite& suite, std::uint64_t seed);

/// Worker count: WPL_LAB_THREADS when set and positive, else the hardware count.
unsigned worker_count();

/// Runs `jobs` on up to `workers` threads. Returns one message per failed job.
std::vector<std::string> run_jobs(const std::vector<std::function<void()>>& jobs, unsigned workers);

/// Executes the configured command over all seeds and writes results plus
/// manifest.json into cfg.out_dir. Returns the process exit status.
int run(const RunConfig& cfg, std::ostream& log);

}  // namespace wpl::cli
