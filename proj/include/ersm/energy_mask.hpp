#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "ersm/autodiff.hpp"
#include "ersm/tensor.hpp"

namespace ersm {

/// 8-connected (Moore) neighborhoods on a token grid, truncated at borders.
struct NeighborTable {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  /// neighbors[i] lists token indices adjacent to token i in row-major order.
  std::vector<std::vector<std::size_t>> neighbors;

  static NeighborTable moore(std::size_t grid_h, std::size_t grid_w);
  std::size_t size() const { return neighbors.size(); }
};

enum class MaskMode {
  Train,  ///< unary and pairwise energies
  Infer,  ///< unary only; pairwise terms skipped and reported as zero
};

struct MaskConfig {
  std::size_t patch = 1;
  double lambda_unary = 1e-3;
  double lambda_pair = 1e-3;
  /// Guard added to token norms before normalization.
  double eps = 1e-8;

  void validate() const;
};

/// Learned noise template `w` (length D), shared scalar bias `b` (shape [1]),
/// and the fixed energy weights.
struct MaskLayerParams {
  Tensor w;
  Tensor b = Tensor::scalar(0.0);
  MaskConfig config;

  /// Throws ShapeError unless w has length D of `geometry`.
  void validate(const TokenGeometry& geometry) const;
};

/// Per-token quantities from one forward pass, all of shape [N].
struct EnergyDiagnostics {
  Tensor z;
  Tensor m;
  Tensor e_unary_plus;
  Tensor e_pair_plus;
  Tensor energy;
  TokenGeometry geometry;
};

struct Tokens {
  Tensor raw;
  Tensor normalized;
  TokenGeometry geometry;
};

Tokens tokenize(const Tensor& feature_map, std::size_t patch, double eps = 1e-8);

/// z_i = w . p_hat_i + b
Tensor unary_scores(const Tensor& normalized_tokens, const MaskLayerParams& params);

/// E_pair_i = sum over j in N(i) of p_hat_i . p_hat_j
Tensor neighbor_cosine_sum(const Tensor& normalized_tokens, const NeighborTable& table);

struct TokenEnergies {
  Tensor unary_plus;
  Tensor pair_plus;
  Tensor total;
};

/// `pair_scores` may be nullopt (pairwise branch skipped): pair_plus is zero.
TokenEnergies energies(const Tensor& z, const std::optional<Tensor>& pair_scores,
                       const MaskConfig& config);

/// m_i = sigmoid(-z_i)
Tensor gate(const Tensor& z);

/// mean_i m_i * E_i
double reg_loss(const Tensor& m, const Tensor& energy);

struct MaskOutput {
  Tensor masked;
  EnergyDiagnostics diagnostics;
};

MaskOutput forward(const Tensor& feature_map, const MaskLayerParams& params, MaskMode mode);

/// Tape-level layer; every output is a node so gradients flow to x, w and b.
struct MaskVars {
  ad::Var masked;
  ad::Var z;
  ad::Var m;
  ad::Var e_unary_plus;
  std::optional<ad::Var> e_pair_plus;
  ad::Var energy;
  TokenGeometry geometry;

  /// Copies the node values out into plain diagnostics.
  EnergyDiagnostics diagnostics() const;
};

MaskVars forward(ad::Var feature_map, ad::Var w, ad::Var b, const MaskConfig& config,
                 MaskMode mode);

ad::Var reg_loss(ad::Var m, ad::Var energy);

/// Bilinear (half-pixel centers, edge clamped) resize of a grid_h x grid_w map.
Tensor upsample_bilinear(const Tensor& grid, std::size_t out_h, std::size_t out_w);

/// Writes keep probabilities upsampled to out_h x out_w as a binary P5 PGM
/// with values round(255 * m).
void write_mask_pgm(const std::filesystem::path& path, const Tensor& m,
                    const TokenGeometry& geometry, std::size_t out_h, std::size_t out_w);

}  // namespace ersm
