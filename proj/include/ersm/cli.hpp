#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ersm/data.hpp"
#include "ersm/model.hpp"
#include "ersm/training.hpp"

namespace ersm {

/// Every tunable of the pipeline, settable from a flat `key = value` file
/// and overridden by command-line flags of the same name (dashes for
/// underscores).
struct RunConfig {
  GeneratorConfig generator;
  std::size_t samples = 4000;
  double train_fraction = 0.8;

  std::vector<std::size_t> backbone_channels{16, 32, 64};
  std::size_t backbone_kernel = 3;
  std::size_t backbone_pool = 2;
  std::size_t patch = 1;
  Variant variant = Variant::Full;

  TrainConfig train;

  std::vector<std::uint64_t> random_seeds{0, 1, 2, 3, 4};
  double keep_fraction = 0.3;
  std::size_t random_sets = 100;
  std::size_t mask_count = 8;

  std::uint64_t seed = 0;

  /// Throws std::invalid_argument for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  void validate() const;
  /// Model config for images of the given shape and class count.
  ModelConfig model(std::size_t classes, std::size_t channels, std::size_t height,
                    std::size_t width) const;
  ModelConfig model_for(const Dataset& dataset) const;
};

/// Applies a `key = value` file ('#' starts a comment) on top of `config`.
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// Exit codes.
constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

/// Runs one command (`args` excludes the program name). Progress goes to
/// `err`, results to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Keeps large freed blocks in the heap instead of returning them to the OS,
/// which otherwise dominates per-step cost in training loops. No-op off glibc.
void tune_allocator();

}  // namespace ersm
