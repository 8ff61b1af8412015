#include <CLI11.hpp>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "eocount/commands.hpp"
#include "eocount/config.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental object counting on synthetic scenes"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> profile;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--seed", seed, "overrides bench.base_seed and train.seed");
  app.add_option("--out", out, "output directory (its parent must exist)");
  app.add_option("--profile", profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));

  std::optional<std::string> data;
  std::string checkpoint;
  std::vector<std::uint64_t> ids;
  std::vector<std::size_t> sizes;
  int gc_seeds = 20;
  bool inject_fault = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  auto* train = app.add_subcommand("train", "train the configured method");
  train->add_option("--data", data, "use an exported dataset instead of generating one");
  std::optional<std::string> method;
  train->add_option("--method", method, "full, ft, joint or ablation:<variant> (overrides the config)");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data, "exported dataset (default: regenerate from config)");
  auto* exp = app.add_subcommand("export-maps", "dump predicted density and mask maps");
  exp->add_option("--checkpoint", checkpoint)->required();
  exp->add_option("--ids", ids, "sample ids (seeds)")->required()->delimiter(',');
  exp->add_option("--data", data, "exported dataset (default: regenerate from config)");
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every op and the model loss");
  gc->add_option("--seeds", gc_seeds, "random cases per op")->check(CLI::PositiveNumber);
  gc->add_flag("--inject-fault", inject_fault, "corrupt the conv2d weight gradient (negative control)");
  auto* sweep = app.add_subcommand("memory-sweep", "full method once per bank capacity");
  sweep->add_option("--sizes", sizes, "bank capacities, e.g. 50,100,150")->required()->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? eoc::kExitOk : eoc::kExitUsage;
  }

  return eoc::run_guarded(
      [&]() -> int {
        eoc::ExperimentConfig cfg = config_path.empty() ? eoc::make_config({}, profile)
                                                        : eoc::load_config_file(config_path, profile);
        if (seed) {
          cfg.bench.base_seed = *seed;
          cfg.train.seed = *seed;
        }
        if (method) {
          cfg.method = eoc::MethodSpec::parse(*method);
          cfg.validate();
        }
        std::optional<fs::path> data_dir;
        if (data) data_dir = fs::path(*data);

        if (*gc) {
          eoc::GradSuiteOptions o;
          o.seeds = gc_seeds;
          if (seed) o.base_seed = *seed;
          if (inject_fault) o.fault = eoc::GradFault::conv2d_weight;
          std::optional<fs::path> dir;
          if (!out.empty()) dir = fs::path(out);
          return eoc::cmd_grad_check(o, std::cout, dir);
        }
        if (out.empty()) throw eoc::UsageError("--out is required");
        if (*gen) {
          eoc::cmd_gen_data(cfg, out);
        } else if (*train) {
          eoc::cmd_train(cfg, out, data_dir, &std::cout);
        } else if (*eval) {
          eoc::cmd_eval(cfg, checkpoint, out, data_dir);
        } else if (*exp) {
          eoc::cmd_export_maps(cfg, checkpoint, ids, out, data_dir);
        } else if (*sweep) {
          eoc::cmd_memory_sweep(cfg, sizes, out, &std::cout);
        }
        return eoc::kExitOk;
      },
      std::cerr);
}
