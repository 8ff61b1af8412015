#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include "eocount/model.hpp"
#include "eocount/scenegen.hpp"
#include "eocount/trainer.hpp"

namespace eoc {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MethodSpec {
  Method method = Method::full;
  bool ablation = false;
  MaskVariant variant = MaskVariant::full;

  /// "full", "ft", "joint" or "ablation:<variant>".
  static MethodSpec parse(const std::string& text);
  std::string to_string() const;
};

struct BenchmarkConfig {
  int classes = 4;  // counting classes, background excluded
  SplitSizes sizes{};
  std::size_t image_size = 64;
  std::uint64_t base_seed = 7;
};

struct ExperimentConfig {
  std::string profile = "desk";
  BenchmarkConfig bench;
  TrainConfig train = TrainConfig::desk();
  ArchConfig arch = ArchConfig::desk();
  MethodSpec method;

  static ExperimentConfig for_profile(const std::string& profile);

  /// Throws ConfigError on any out-of-range value.
  void validate() const;
  /// Canonical `key=value` lines, sorted by key.
  std::string to_text() const;
  /// FNV-1a over to_text(), as 16 hex digits.
  std::string hash() const;

  std::vector<ClassSpec> class_specs() const;
  SceneParams scene_params() const;
};

/// Parses `key=value` lines; `#` starts a comment. Duplicate keys are errors.
std::map<std::string, std::string> parse_key_values(const std::string& text);

/// Starts from the profile (override, else the `profile` key, else desk),
/// applies every other key, then validates. Unknown keys are errors.
ExperimentConfig make_config(const std::map<std::string, std::string>& kv,
                             const std::optional<std::string>& profile_override = std::nullopt);

ExperimentConfig load_config_file(const std::string& path,
                                  const std::optional<std::string>& profile_override = std::nullopt);

}  // namespace eoc
