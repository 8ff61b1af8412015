#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "eocount/config.hpp"
#include "eocount/grad_suite.hpp"

namespace eoc {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitData = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Input data that is missing or inconsistent with the request.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Every artifact a command wrote, relative to its output directory.
struct Manifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;

  void add(const std::filesystem::path& relative) { artifacts.push_back(relative.generic_string()); }
  /// Writes manifest.json into `out` and lists it last.
  void write(const std::filesystem::path& out);
};

/// Creates `out` when missing. Its parent must already exist (UsageError).
void prepare_out_dir(const std::filesystem::path& out);

std::vector<StageDataset> build_benchmark(const ExperimentConfig& cfg);
/// Imports `data` when given, else generates from the config.
std::vector<StageDataset> load_benchmark(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& data);

Manifest cmd_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// Runs the configured method. Per stage k: stage_<k>/checkpoint.eocm1,
/// stage_<k>/history.csv and, when a bank is kept, stage_<k>/bank.csv.
/// Then report.csv, report.json and pairs.csv.
Manifest cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out,
                   const std::optional<std::filesystem::path>& data = std::nullopt, std::ostream* log = nullptr);

/// Evaluates a checkpoint of stage t on the test splits of classes 1..t.
Manifest cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                  const std::filesystem::path& out, const std::optional<std::filesystem::path>& data = std::nullopt);

/// Per sample id: maps/<id>_density.eocd1 (selected channel),
/// maps/<id>_mask.eocd1 (when the model has a mask branch) and maps/<id>.txt.
Manifest cmd_export_maps(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                         const std::vector<std::uint64_t>& ids, const std::filesystem::path& out,
                         const std::optional<std::filesystem::path>& data = std::nullopt);

/// Prints the table; returns kExitOk iff every row passes.
int cmd_grad_check(const GradSuiteOptions& options, std::ostream& os,
                   const std::optional<std::filesystem::path>& out = std::nullopt);

/// Runs the full method once per bank capacity; writes memory_sweep.csv.
Manifest cmd_memory_sweep(const ExperimentConfig& cfg, const std::vector<std::size_t>& sizes,
                          const std::filesystem::path& out, std::ostream* log = nullptr);

/// Runs `body`, mapping exceptions to exit codes and printing them to `err`.
int run_guarded(const std::function<int()>& body, std::ostream& err);

}  // namespace eoc
