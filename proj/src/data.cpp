#include "ersm/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "ersm/binary_io.hpp"
#include "ersm/rng.hpp"

namespace ersm {

namespace {

constexpr char kMagic[] = "ERSD";
constexpr std::uint32_t kVersion = 1;
constexpr int kBackgroundWaves = 3;

}  // namespace

const char* background_name(Background b) {
  switch (b) {
    case Background::ConstantNoise: return "constant";
    case Background::LowFrequency: return "lowfreq";
  }
  return "?";
}

Background parse_background(const std::string& name) {
  if (name == "constant") return Background::ConstantNoise;
  if (name == "lowfreq") return Background::LowFrequency;
  throw std::invalid_argument("unknown background '" + name + "' (expected constant or lowfreq)");
}

void GeneratorConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("generator: need at least 2 classes");
  if (classes > 65535) throw std::invalid_argument("generator: at most 65535 classes");
  if (channels == 0 || height == 0 || width == 0) {
    throw std::invalid_argument("generator: image extents must be positive");
  }
  if (object_size == 0) throw std::invalid_argument("generator: object size must be positive");
  if (object_size >= height || object_size >= width) {
    throw std::invalid_argument("generator: object size " + std::to_string(object_size) +
                                " must be smaller than the " + std::to_string(height) + "x" +
                                std::to_string(width) + " image");
  }
  if (!(noise_amplitude >= 0.0) || !std::isfinite(noise_amplitude)) {
    throw std::invalid_argument("generator: noise amplitude must be finite and >= 0");
  }
  if (!(grating_period > 0.0) || !std::isfinite(grating_period)) {
    throw std::invalid_argument("generator: grating period must be positive");
  }
}

std::vector<double> glyph(const GeneratorConfig& config, std::size_t label) {
  if (label >= config.classes) throw std::out_of_range("glyph: label out of range");
  const std::size_t s = config.object_size;
  const double angle = std::numbers::pi * static_cast<double>(label) /
                       static_cast<double>(config.classes);
  const double c = std::cos(angle), sn = std::sin(angle);
  const double centre = (static_cast<double>(s) - 1.0) / 2.0;
  const double k = 2.0 * std::numbers::pi / config.grating_period;
  std::vector<double> g(s * s);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double u = static_cast<double>(x) - centre;
      const double v = static_cast<double>(y) - centre;
      g[y * s + x] = std::cos(k * (u * c + v * sn));
    }
  }
  return g;
}

Sample generate_sample(const GeneratorConfig& config, std::size_t index) {
  config.validate();
  Rng rng(config.seed, index);
  const std::size_t h = config.height, w = config.width, s = config.object_size;
  Sample sample;
  sample.label = static_cast<std::size_t>(rng.below(config.classes));
  const auto top = static_cast<std::size_t>(rng.below(h - s + 1));
  const auto left = static_cast<std::size_t>(rng.below(w - s + 1));

  struct Wave {
    double fy, fx, phase, amplitude;
  };
  std::vector<std::vector<Wave>> waves(config.channels);
  std::vector<double> level(config.channels);
  for (std::size_t c = 0; c < config.channels; ++c) {
    if (config.background == Background::ConstantNoise) {
      level[c] = rng.uniform(0.3, 0.7);
    } else {
      level[c] = 0.5;
      for (int i = 0; i < kBackgroundWaves; ++i) {
        Wave wave;
        wave.fy = rng.uniform(0.0, 1.0);
        wave.fx = rng.uniform(0.0, 1.0);
        wave.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        wave.amplitude = rng.uniform(0.05, 0.12);
        waves[c].push_back(wave);
      }
    }
  }

  const std::vector<double> g = glyph(config, sample.label);
  sample.image = Tensor({config.channels, h, w});
  sample.truth_mask.assign(h * w, 0);
  for (std::size_t y = top; y < top + s; ++y) {
    for (std::size_t x = left; x < left + s; ++x) sample.truth_mask[y * w + x] = 1;
  }
  for (std::size_t c = 0; c < config.channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double v;
        if (sample.truth_mask[y * w + x]) {
          v = g[(y - top) * s + (x - left)];
        } else {
          v = level[c];
          for (const Wave& wave : waves[c]) {
            v += wave.amplitude *
                 std::cos(2.0 * std::numbers::pi *
                              (wave.fy * static_cast<double>(y) / static_cast<double>(h) +
                               wave.fx * static_cast<double>(x) / static_cast<double>(w)) +
                          wave.phase);
          }
        }
        if (config.noise_amplitude > 0.0) v += config.noise_amplitude * rng.normal();
        sample.image(c, y, x) = v;
      }
    }
  }
  return sample;
}

Dataset generate(const GeneratorConfig& config, std::size_t n) {
  config.validate();
  if (n == 0) throw std::invalid_argument("generate: n must be >= 1");
  Dataset ds{config.classes, config.channels, config.height, config.width, {}};
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ds.samples.push_back(generate_sample(config, i));
  return ds;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset) {
  const Shape shape = dataset.image_shape();
  ByteWriter out;
  out.raw(std::string_view(kMagic, 4));
  out.u32(kVersion);
  out.u32(static_cast<std::uint32_t>(dataset.size()));
  out.u32(static_cast<std::uint32_t>(dataset.classes));
  out.u32(static_cast<std::uint32_t>(dataset.channels));
  out.u32(static_cast<std::uint32_t>(dataset.height));
  out.u32(static_cast<std::uint32_t>(dataset.width));
  for (const Sample& s : dataset.samples) {
    if (s.image.shape() != shape || s.truth_mask.size() != dataset.height * dataset.width) {
      throw ShapeError("encode_dataset: sample shape disagrees with dataset header");
    }
    if (s.label >= dataset.classes) throw std::out_of_range("encode_dataset: label >= K");
    for (double v : s.image.data()) out.f64(v);
    out.u16(static_cast<std::uint16_t>(s.label));
    for (std::uint8_t m : s.truth_mask) out.u8(m);
  }
  return out.bytes();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes, const std::string& context) {
  ByteReader in(bytes, context);
  in.require(4, "magic");
  if (in.raw(4) != std::string_view(kMagic, 4)) throw FormatError(context + ": bad magic");
  const std::uint32_t version = in.u32();
  if (version != kVersion) {
    throw FormatError(context + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t n = in.u32();
  Dataset ds;
  ds.classes = in.u32();
  ds.channels = in.u32();
  ds.height = in.u32();
  ds.width = in.u32();
  if (ds.classes < 2 || ds.classes > 65536) {
    throw FormatError(context + ": invalid class count " + std::to_string(ds.classes));
  }
  if (ds.channels == 0 || ds.height == 0 || ds.width == 0) {
    throw FormatError(context + ": zero image extent");
  }
  const std::size_t pixels = ds.channels * ds.height * ds.width;
  const std::size_t per_sample = pixels * 8 + 2 + ds.height * ds.width;
  // Checked up front so a corrupted count fails before anything is built.
  if (per_sample != 0 && n > in.remaining() / per_sample) {
    throw FormatError(context + ": truncated payload (" + std::to_string(n) +
                      " samples declared, " + std::to_string(in.remaining()) +
                      " bytes available)");
  }
  ds.samples.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Sample s;
    std::vector<double> pixels_v(pixels);
    for (double& v : pixels_v) v = in.f64();
    s.image = Tensor(ds.image_shape(), std::move(pixels_v));
    s.label = in.u16();
    if (s.label >= ds.classes) {
      throw FormatError(context + ": sample " + std::to_string(i) + " has label " +
                        std::to_string(s.label) + " >= K=" + std::to_string(ds.classes));
    }
    s.truth_mask.resize(ds.height * ds.width);
    for (std::uint8_t& m : s.truth_mask) {
      m = in.u8();
      if (m > 1) throw FormatError(context + ": truth mask byte must be 0 or 1");
    }
    ds.samples.push_back(std::move(s));
  }
  in.expect_end();
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  write_file_atomic(path, encode_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file(path), path.string());
}

std::vector<Dataset> split(const Dataset& dataset, std::span<const double> fractions,
                           std::uint64_t seed) {
  if (fractions.empty()) throw std::invalid_argument("split: no fractions given");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0 && f < 1.0)) {
      throw std::invalid_argument("split: fraction " + std::to_string(f) + " outside (0, 1)");
    }
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");

  const std::size_t parts = fractions.size();
  std::vector<std::vector<std::size_t>> by_class(dataset.classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const std::size_t label = dataset.samples[i].label;
    if (label >= dataset.classes) throw std::out_of_range("split: label >= K");
    by_class[label].push_back(i);
  }

  // counts[c][p]: floor of the ideal share, then leftover items go to the
  // largest fractional remainders (lower class, then lower part wins ties)
  // until every part reaches its rounded overall target.
  std::vector<std::vector<std::size_t>> counts(dataset.classes, std::vector<std::size_t>(parts));
  struct Remainder {
    double frac;
    std::size_t cls, part;
  };
  std::vector<Remainder> remainders;
  std::vector<std::size_t> assigned(parts, 0);
  std::vector<std::size_t> class_left(dataset.classes, 0);
  for (std::size_t c = 0; c < dataset.classes; ++c) {
    std::size_t used = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      const double ideal = fractions[p] * static_cast<double>(by_class[c].size());
      counts[c][p] = static_cast<std::size_t>(std::floor(ideal));
      used += counts[c][p];
      assigned[p] += counts[c][p];
      remainders.push_back({ideal - std::floor(ideal), c, p});
    }
    class_left[c] = by_class[c].size() - used;
  }
  std::vector<std::size_t> target(parts);
  std::size_t targeted = 0;
  for (std::size_t p = 0; p + 1 < parts; ++p) {
    target[p] = static_cast<std::size_t>(
        std::llround(fractions[p] * static_cast<double>(dataset.size())));
    targeted += target[p];
  }
  target[parts - 1] = dataset.size() - std::min(targeted, dataset.size());
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const Remainder& a, const Remainder& b) { return a.frac > b.frac; });
  for (const Remainder& r : remainders) {
    if (class_left[r.cls] == 0 || assigned[r.part] >= target[r.part]) continue;
    ++counts[r.cls][r.part];
    ++assigned[r.part];
    --class_left[r.cls];
  }
  // Anything still unplaced (targets saturated by rounding) goes to the
  // part with the most headroom.
  for (std::size_t c = 0; c < dataset.classes; ++c) {
    while (class_left[c] > 0) {
      std::size_t best = 0;
      for (std::size_t p = 1; p < parts; ++p) {
        const double gap_p = static_cast<double>(target[p]) - static_cast<double>(assigned[p]);
        const double gap_b = static_cast<double>(target[best]) - static_cast<double>(assigned[best]);
        if (gap_p > gap_b) best = p;
      }
      ++counts[c][best];
      ++assigned[best];
      --class_left[c];
    }
  }

  std::vector<std::vector<std::size_t>> members(parts);
  for (std::size_t c = 0; c < dataset.classes; ++c) {
    std::vector<std::size_t> order = by_class[c];
    Rng rng(seed, c);
    rng.shuffle(order);
    std::size_t pos = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      members[p].insert(members[p].end(), order.begin() + static_cast<std::ptrdiff_t>(pos),
                        order.begin() + static_cast<std::ptrdiff_t>(pos + counts[c][p]));
      pos += counts[c][p];
    }
  }

  std::vector<Dataset> out;
  for (std::size_t p = 0; p < parts; ++p) {
    std::sort(members[p].begin(), members[p].end());
    Dataset part{dataset.classes, dataset.channels, dataset.height, dataset.width, {}};
    part.samples.reserve(members[p].size());
    for (std::size_t i : members[p]) part.samples.push_back(dataset.samples[i]);
    out.push_back(std::move(part));
  }
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& dataset, double train_fraction,
                                  std::uint64_t seed) {
  const double fractions[] = {train_fraction, 1.0 - train_fraction};
  std::vector<Dataset> parts = split(dataset, fractions, seed);
  return {std::move(parts[0]), std::move(parts[1])};
}

}  // namespace ersm
