#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ersm/data.hpp"
#include "ersm/model.hpp"
#include "ersm/training.hpp"

namespace ersm {

/// Token indices by z descending (first removed first); equal scores keep
/// ascending index order.
std::vector<std::size_t> energy_ranking(const Tensor& z);

/// Unary scores of the model's mask layer over the backbone features of `x`.
/// Uses the stored mask parameters even for the bypass variant.
Tensor unary_scores(const ModelConfig& config, const ModelParams& params, const Tensor& x);
std::vector<std::size_t> energy_ranking(const ModelConfig& config, const ModelParams& params,
                                        const Tensor& x);

enum class DeletionPolicy { Energy, Random };

const char* policy_name(DeletionPolicy p);
DeletionPolicy parse_policy(const std::string& name);

struct CurvePoint {
  std::size_t k = 0;
  double accuracy = 0.0;
  /// Standard error across random seeds; 0 for the deterministic energy policy.
  double stderr_ = 0.0;
};

struct RobustnessCurve {
  DeletionPolicy policy = DeletionPolicy::Energy;
  std::vector<CurvePoint> points;  ///< k = 0 .. N-1
  std::vector<std::uint64_t> seeds;
  std::size_t num_tokens = 0;
};

/// Accuracy with the first k ranked tokens hard-zeroed, for k = 0..N-1. The
/// random policy draws a fresh permutation per (seed, image) and averages
/// the per-seed accuracies.
RobustnessCurve deletion_curve(const ModelConfig& config, const ModelParams& params,
                               const Dataset& dataset, DeletionPolicy policy,
                               std::span<const std::uint64_t> seeds);

struct CurveComparison {
  double energy_mean = 0.0;  ///< mean accuracy over k in [1, N/2]
  double random_mean = 0.0;
  double gap = 0.0;          ///< energy_mean - random_mean
  /// Share of the curve's k values where energy accuracy >= random accuracy.
  double pointwise_fraction = 0.0;
};
CurveComparison compare_curves(const RobustnessCurve& energy, const RobustnessCurve& random);

struct SparsityReport {
  double mean = 0.0;
  std::array<double, kMaskBins> hist{};
  std::vector<double> per_image;
};
SparsityReport sparsity_report(const ModelConfig& config, const ModelParams& params,
                               const Dataset& dataset);

struct AlignmentReport {
  double keep_fraction = 0.0;
  std::size_t kept = 0;
  std::vector<double> overlap;         ///< per image
  std::vector<double> random_overlap;  ///< per image, mean over sampled sets
  double mean = 0.0;
  double random_mean = 0.0;
};

/// Tokens whose input receptive square holds at least `threshold` object pixels.
std::vector<bool> truth_tokens(const Sample& sample, const TokenGeometry& geometry,
                               std::size_t feature_stride, double threshold = 0.25);

/// |A & B| / |A | B|; 0 when both sets are empty.
double set_iou(const std::vector<bool>& a, const std::vector<bool>& b);

/// Compares the ceil(keep_fraction * N) lowest-z tokens against the truth
/// tokens, and against `random_sets` uniformly drawn sets of the same size.
AlignmentReport alignment_report(const ModelConfig& config, const ModelParams& params,
                                 const Dataset& dataset, double keep_fraction,
                                 std::size_t random_sets = 100, std::uint64_t seed = 0);

std::string curves_csv(std::span<const RobustnessCurve> curves);
std::string sparsity_csv(const SparsityReport& report);
std::string alignment_csv(const AlignmentReport& report);

/// Writes one P5 mask per image (the first `count`) as mask_<i>.pgm at the
/// image resolution.
std::vector<std::filesystem::path> export_masks(const ModelConfig& config,
                                                const ModelParams& params,
                                                const Dataset& dataset, std::size_t count,
                                                const std::filesystem::path& dir);

}  // namespace ersm
