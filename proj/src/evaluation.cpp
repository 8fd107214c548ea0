#include "ersm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "ersm/energy_mask.hpp"
#include "ersm/rng.hpp"

namespace ersm {

std::vector<std::size_t> energy_ranking(const Tensor& z) {
  std::vector<std::size_t> order(z.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&z](std::size_t a, std::size_t b) { return z[a] > z[b]; });
  return order;
}

Tensor unary_scores(const ModelConfig& config, const ModelParams& params, const Tensor& x) {
  const MaskConfig mask = config.effective_mask();
  const Tokens t = tokenize(backbone_features(config, params, x), mask.patch, mask.eps);
  return unary_scores(t.normalized, params.mask);
}

std::vector<std::size_t> energy_ranking(const ModelConfig& config, const ModelParams& params,
                                        const Tensor& x) {
  return energy_ranking(unary_scores(config, params, x));
}

const char* policy_name(DeletionPolicy p) {
  return p == DeletionPolicy::Energy ? "energy" : "random";
}

DeletionPolicy parse_policy(const std::string& name) {
  if (name == "energy") return DeletionPolicy::Energy;
  if (name == "random") return DeletionPolicy::Random;
  throw std::invalid_argument("unknown deletion policy '" + name + "'");
}

RobustnessCurve deletion_curve(const ModelConfig& config, const ModelParams& params,
                               const Dataset& dataset, DeletionPolicy policy,
                               std::span<const std::uint64_t> seeds) {
  if (dataset.empty()) throw std::invalid_argument("deletion curve: dataset is empty");
  if (policy == DeletionPolicy::Random && seeds.empty()) {
    throw std::invalid_argument("deletion curve: random policy needs at least one seed");
  }
  const std::size_t n_tokens = config.feature_geometry().num_tokens();
  RobustnessCurve curve;
  curve.policy = policy;
  curve.num_tokens = n_tokens;
  if (policy == DeletionPolicy::Random) curve.seeds.assign(seeds.begin(), seeds.end());
  const std::size_t runs = policy == DeletionPolicy::Random ? seeds.size() : 1;

  // correct[r][k]: images classified correctly with k tokens removed in run r.
  std::vector<std::vector<std::size_t>> correct(runs, std::vector<std::size_t>(n_tokens, 0));
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Sample& sample = dataset.samples[i];
    const Tensor features = backbone_features(config, params, sample.image);
    std::vector<std::size_t> energy_order;
    if (policy == DeletionPolicy::Energy) {
      const MaskConfig mask = config.effective_mask();
      energy_order = energy_ranking(unary_scores(tokenize(features, mask.patch, mask.eps).normalized,
                                                 params.mask));
    }
    for (std::size_t r = 0; r < runs; ++r) {
      const std::vector<std::size_t> order = policy == DeletionPolicy::Energy
                                                 ? energy_order
                                                 : Rng(seeds[r], i).permutation(n_tokens);
      for (std::size_t k = 0; k < n_tokens; ++k) {
        const Tensor logits = classify_with_deletion(
            config, params, features, std::span<const std::size_t>(order.data(), k));
        if (argmax(logits) == sample.label) ++correct[r][k];
      }
    }
  }

  const double n_images = static_cast<double>(dataset.size());
  for (std::size_t k = 0; k < n_tokens; ++k) {
    double mean = 0.0;
    for (std::size_t r = 0; r < runs; ++r) mean += static_cast<double>(correct[r][k]) / n_images;
    mean /= static_cast<double>(runs);
    double se = 0.0;
    if (runs > 1) {
      double ss = 0.0;
      for (std::size_t r = 0; r < runs; ++r) {
        const double d = static_cast<double>(correct[r][k]) / n_images - mean;
        ss += d * d;
      }
      se = std::sqrt(ss / static_cast<double>(runs - 1)) / std::sqrt(static_cast<double>(runs));
    }
    curve.points.push_back({k, mean, se});
  }
  return curve;
}

CurveComparison compare_curves(const RobustnessCurve& energy, const RobustnessCurve& random) {
  if (energy.points.size() != random.points.size() || energy.points.empty()) {
    throw std::invalid_argument("compare_curves: curves cover different k ranges");
  }
  CurveComparison c;
  const std::size_t half = energy.num_tokens / 2;
  std::size_t window = 0;
  for (std::size_t k = 1; k <= half && k < energy.points.size(); ++k) {
    c.energy_mean += energy.points[k].accuracy;
    c.random_mean += random.points[k].accuracy;
    ++window;
  }
  if (window > 0) {
    c.energy_mean /= static_cast<double>(window);
    c.random_mean /= static_cast<double>(window);
  }
  c.gap = c.energy_mean - c.random_mean;
  std::size_t at_least = 0;
  for (std::size_t k = 0; k < energy.points.size(); ++k) {
    if (energy.points[k].accuracy >= random.points[k].accuracy) ++at_least;
  }
  c.pointwise_fraction = static_cast<double>(at_least) / static_cast<double>(energy.points.size());
  return c;
}

SparsityReport sparsity_report(const ModelConfig& config, const ModelParams& params,
                               const Dataset& dataset) {
  SparsityReport report;
  if (config.variant == Variant::Baseline) {
    report.mean = 1.0;
    report.hist[kMaskBins - 1] = 1.0;
    report.per_image.assign(dataset.size(), 1.0);
    return report;
  }
  std::size_t tokens = 0;
  double total = 0.0;
  for (const Sample& sample : dataset.samples) {
    const Prediction p = predict(config, params, sample.image, MaskMode::Infer);
    double image_total = 0.0;
    for (double m : p.diagnostics->m.data()) {
      image_total += m;
      report.hist[std::min(kMaskBins - 1, static_cast<std::size_t>(m * kMaskBins))] += 1.0;
    }
    total += image_total;
    tokens += p.diagnostics->m.size();
    report.per_image.push_back(image_total / static_cast<double>(p.diagnostics->m.size()));
  }
  if (tokens > 0) {
    report.mean = total / static_cast<double>(tokens);
    for (double& h : report.hist) h /= static_cast<double>(tokens);
  }
  return report;
}

std::vector<bool> truth_tokens(const Sample& sample, const TokenGeometry& geometry,
                               std::size_t feature_stride, double threshold) {
  const std::size_t side = feature_stride * geometry.patch;
  const std::size_t height = geometry.grid_h() * side;
  const std::size_t width = geometry.grid_w() * side;
  if (sample.truth_mask.size() != height * width) {
    throw ShapeError("truth mask of " + std::to_string(sample.truth_mask.size()) +
                     " pixels does not tile a " + std::to_string(height) + "x" +
                     std::to_string(width) + " image");
  }
  std::vector<bool> truth(geometry.num_tokens());
  for (std::size_t ty = 0; ty < geometry.grid_h(); ++ty) {
    for (std::size_t tx = 0; tx < geometry.grid_w(); ++tx) {
      std::size_t hits = 0;
      for (std::size_t y = ty * side; y < (ty + 1) * side; ++y) {
        for (std::size_t x = tx * side; x < (tx + 1) * side; ++x) {
          hits += sample.truth_mask[y * width + x];
        }
      }
      truth[ty * geometry.grid_w() + tx] =
          static_cast<double>(hits) >= threshold * static_cast<double>(side * side);
    }
  }
  return truth;
}

double set_iou(const std::vector<bool>& a, const std::vector<bool>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("set_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

AlignmentReport alignment_report(const ModelConfig& config, const ModelParams& params,
                                 const Dataset& dataset, double keep_fraction,
                                 std::size_t random_sets, std::uint64_t seed) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw std::invalid_argument("alignment: keep fraction must lie in (0, 1]");
  }
  if (random_sets == 0) throw std::invalid_argument("alignment: need at least one random set");
  const TokenGeometry geometry = config.feature_geometry();
  const std::size_t n = geometry.num_tokens();
  const std::size_t stride = config.feature_stride();
  AlignmentReport report;
  report.keep_fraction = keep_fraction;
  report.kept = std::min(
      n, static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-9)));
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Sample& sample = dataset.samples[i];
    const std::vector<bool> truth = truth_tokens(sample, geometry, stride);
    // Lowest energy is kept: the tail of the descending ranking.
    const std::vector<std::size_t> ranking =
        energy_ranking(unary_scores(config, params, sample.image));
    std::vector<bool> kept(n, false);
    for (std::size_t j = n - report.kept; j < n; ++j) kept[ranking[j]] = true;
    report.overlap.push_back(set_iou(kept, truth));

    Rng rng(seed, i);
    double random_total = 0.0;
    for (std::size_t s = 0; s < random_sets; ++s) {
      const std::vector<std::size_t> perm = rng.permutation(n);
      std::vector<bool> pick(n, false);
      for (std::size_t j = 0; j < report.kept; ++j) pick[perm[j]] = true;
      random_total += set_iou(pick, truth);
    }
    report.random_overlap.push_back(random_total / static_cast<double>(random_sets));
  }
  if (!dataset.empty()) {
    const double count = static_cast<double>(dataset.size());
    report.mean = std::accumulate(report.overlap.begin(), report.overlap.end(), 0.0) / count;
    report.random_mean =
        std::accumulate(report.random_overlap.begin(), report.random_overlap.end(), 0.0) / count;
  }
  return report;
}

std::string curves_csv(std::span<const RobustnessCurve> curves) {
  std::string out = "policy,k,accuracy,stderr\n";
  char buf[128];
  for (const RobustnessCurve& c : curves) {
    for (const CurvePoint& p : c.points) {
      std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g\n", policy_name(c.policy), p.k,
                    p.accuracy, p.stderr_);
      out += buf;
    }
  }
  return out;
}

std::string sparsity_csv(const SparsityReport& report) {
  std::string out = "image,mean_mask\n";
  char buf[64];
  for (std::size_t i = 0; i < report.per_image.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, report.per_image[i]);
    out += buf;
  }
  return out;
}

std::string alignment_csv(const AlignmentReport& report) {
  std::string out = "image,overlap,random_overlap\n";
  char buf[96];
  for (std::size_t i = 0; i < report.overlap.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i, report.overlap[i],
                  report.random_overlap[i]);
    out += buf;
  }
  return out;
}

std::vector<std::filesystem::path> export_masks(const ModelConfig& config,
                                                const ModelParams& params,
                                                const Dataset& dataset, std::size_t count,
                                                const std::filesystem::path& dir) {
  if (config.variant == Variant::Baseline) {
    throw std::invalid_argument("mask export: the baseline variant has no mask");
  }
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < std::min(count, dataset.size()); ++i) {
    const Prediction p = predict(config, params, dataset.samples[i].image, MaskMode::Infer);
    const std::filesystem::path path = dir / ("mask_" + std::to_string(i) + ".pgm");
    write_mask_pgm(path, p.diagnostics->m, p.diagnostics->geometry, dataset.height,
                   dataset.width);
    written.push_back(path);
  }
  return written;
}

}  // namespace ersm
