#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ersm/tensor.hpp"

namespace ersm {

struct Sample {
  Tensor image;  ///< [C, H, W]
  std::size_t label = 0;
  /// Row-major H x W grid, 1 on object pixels.
  std::vector<std::uint8_t> truth_mask;

  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class Background {
  ConstantNoise,  ///< one flat level per image plus pixel noise
  LowFrequency,   ///< smooth field of a few sub-image-frequency waves plus pixel noise
};

const char* background_name(Background b);
Background parse_background(const std::string& name);

struct GeneratorConfig {
  std::size_t classes = 4;
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t object_size = 12;
  Background background = Background::LowFrequency;
  double noise_amplitude = 0.05;
  /// Pixels per grating cycle.
  double grating_period = 4.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  std::size_t classes = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  Shape image_shape() const { return {channels, height, width}; }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Grating glyph for class `label`: cos of a plane wave at angle pi*label/K,
/// sampled over an s x s square (row-major).
std::vector<double> glyph(const GeneratorConfig& config, std::size_t label);

/// Sample i depends only on (seed, i).
Sample generate_sample(const GeneratorConfig& config, std::size_t index);
Dataset generate(const GeneratorConfig& config, std::size_t n);

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::span<const std::uint8_t> bytes,
                       const std::string& context = "dataset");
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
/// Throws FormatError on bad magic/version, truncation, trailing bytes,
/// labels >= K or mask bytes other than 0/1.
Dataset read_dataset(const std::filesystem::path& path);

/// Label-stratified, seed-deterministic partition. `fractions` must each lie
/// in (0, 1) and sum to 1; totals follow largest-remainder rounding so
/// (0.8, 0.2) on 100 items gives exactly 80/20. Within each part samples keep
/// their original order.
std::vector<Dataset> split(const Dataset& dataset, std::span<const double> fractions,
                           std::uint64_t seed);
std::pair<Dataset, Dataset> split(const Dataset& dataset, double train_fraction,
                                  std::uint64_t seed);

}  // namespace ersm
