#include "ersm/energy_mask.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ersm/binary_io.hpp"

namespace ersm {

NeighborTable NeighborTable::moore(std::size_t grid_h, std::size_t grid_w) {
  if (grid_h == 0 || grid_w == 0) throw ShapeError("neighbor table needs a non-empty grid");
  NeighborTable table{grid_h, grid_w, {}};
  table.neighbors.resize(grid_h * grid_w);
  for (std::size_t y = 0; y < grid_h; ++y) {
    for (std::size_t x = 0; x < grid_w; ++x) {
      auto& list = table.neighbors[y * grid_w + x];
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const auto ny = static_cast<std::ptrdiff_t>(y) + dy;
          const auto nx = static_cast<std::ptrdiff_t>(x) + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(grid_h) ||
              nx >= static_cast<std::ptrdiff_t>(grid_w)) {
            continue;
          }
          list.push_back(static_cast<std::size_t>(ny) * grid_w + static_cast<std::size_t>(nx));
        }
      }
    }
  }
  return table;
}

void MaskConfig::validate() const {
  if (patch == 0) throw std::invalid_argument("mask patch size must be >= 1");
  if (!(lambda_unary >= 0.0) || !(lambda_pair >= 0.0)) {
    throw std::invalid_argument("energy weights must be non-negative");
  }
  if (!(eps >= 0.0)) throw std::invalid_argument("normalization eps must be non-negative");
}

void MaskLayerParams::validate(const TokenGeometry& geometry) const {
  config.validate();
  if (geometry.patch != config.patch) {
    throw ShapeError("feature geometry uses patch " + std::to_string(geometry.patch) +
                     " but the mask layer is configured for " + std::to_string(config.patch));
  }
  if (w.shape() != Shape{geometry.token_dim()}) {
    throw ShapeError("mask template has shape " + to_string(w.shape()) + ", tokens have D=" +
                     std::to_string(geometry.token_dim()));
  }
  if (b.size() != 1) throw ShapeError("mask bias must be a single element");
}

// ---------------------------------------------------------------------------
// Tape-level layer

namespace ad {

Var neighbor_cosine_sum(Var normalized_tokens, const NeighborTable& table) {
  Tape& t = *normalized_tokens.tape;
  Tensor value = ersm::neighbor_cosine_sum(normalized_tokens.value(), table);
  const std::size_t pi = normalized_tokens.id;
  return t.push(Op::NeighborCosineSum, std::move(value), {pi},
                [pi, neighbors = table.neighbors](Tape& tp, const Tensor& g) {
                  const Tensor& p = tp.value(Var{&tp, pi});
                  const std::size_t dim = p.dim(1);
                  Tensor dp(p.shape());
                  // Each pair contributes to both endpoints; the table is symmetric.
                  for (std::size_t i = 0; i < neighbors.size(); ++i) {
                    double* dst = dp.data().data() + i * dim;
                    for (std::size_t j : neighbors[i]) {
                      const double coeff = g[i] + g[j];
                      const double* src = p.data().data() + j * dim;
                      for (std::size_t k = 0; k < dim; ++k) dst[k] += coeff * src[k];
                    }
                  }
                  tp.accumulate(pi, dp);
                });
}

}  // namespace ad

EnergyDiagnostics MaskVars::diagnostics() const {
  EnergyDiagnostics d;
  d.z = z.value();
  d.m = m.value();
  d.e_unary_plus = e_unary_plus.value();
  d.e_pair_plus = e_pair_plus ? e_pair_plus->value() : Tensor(d.z.shape());
  d.energy = energy.value();
  d.geometry = geometry;
  return d;
}

MaskVars forward(ad::Var feature_map, ad::Var w, ad::Var b, const MaskConfig& config,
                 MaskMode mode) {
  config.validate();
  const TokenGeometry geometry = TokenGeometry::of(feature_map.value().shape(), config.patch);
  MaskLayerParams{w.value(), b.value(), config}.validate(geometry);

  MaskVars out;
  out.geometry = geometry;
  const ad::Var tokens = ad::unfold(feature_map, config.patch);
  const ad::Var normalized = ad::l2norm_rows(tokens, config.eps);
  out.z = ad::add(ad::matmul(normalized, w), b);
  out.m = ad::sigmoid(ad::scale(out.z, -1.0));
  out.e_unary_plus = ad::scale(ad::softplus(out.z), config.lambda_unary);
  out.energy = out.e_unary_plus;
  if (mode == MaskMode::Train && config.lambda_pair > 0.0) {
    const NeighborTable table = NeighborTable::moore(geometry.grid_h(), geometry.grid_w());
    const ad::Var pair = ad::neighbor_cosine_sum(normalized, table);
    out.e_pair_plus = ad::scale(ad::softplus(pair), config.lambda_pair);
    out.energy = ad::add(out.e_unary_plus, *out.e_pair_plus);
  }
  out.masked = ad::fold(ad::mul_rows(tokens, out.m), geometry);
  return out;
}

ad::Var reg_loss(ad::Var m, ad::Var energy) { return ad::mean(ad::mul(m, energy)); }

// ---------------------------------------------------------------------------
// Plain-tensor entry points

Tokens tokenize(const Tensor& feature_map, std::size_t patch, double eps) {
  Tokens t;
  t.geometry = TokenGeometry::of(feature_map.shape(), patch);
  t.raw = kernels::unfold(feature_map, patch);
  t.normalized = kernels::l2norm_rows(t.raw, eps);
  return t;
}

Tensor unary_scores(const Tensor& normalized_tokens, const MaskLayerParams& params) {
  if (normalized_tokens.rank() != 2 || params.w.shape() != Shape{normalized_tokens.dim(1)}) {
    throw ShapeError("unary_scores: template " + to_string(params.w.shape()) + " for tokens " +
                     to_string(normalized_tokens.shape()));
  }
  Tensor z = kernels::matmul(normalized_tokens, params.w);
  const double bias = params.b.item();
  for (double& v : z.data()) v += bias;
  kernels::check_finite(z, "unary_scores");
  return z;
}

Tensor neighbor_cosine_sum(const Tensor& normalized_tokens, const NeighborTable& table) {
  if (normalized_tokens.rank() != 2 || normalized_tokens.dim(0) != table.size()) {
    throw ShapeError("neighbor_cosine_sum: " + to_string(normalized_tokens.shape()) +
                     " tokens for a " + std::to_string(table.grid_h) + "x" +
                     std::to_string(table.grid_w) + " grid");
  }
  const std::size_t dim = normalized_tokens.dim(1);
  const double* p = normalized_tokens.data().data();
  Tensor out({table.size()});
  for (std::size_t i = 0; i < table.size(); ++i) {
    double acc = 0.0;
    for (std::size_t j : table.neighbors[i]) acc += kernels::dot(p + i * dim, p + j * dim, dim);
    out[i] = acc;
  }
  kernels::check_finite(out, "neighbor_cosine_sum");
  return out;
}

TokenEnergies energies(const Tensor& z, const std::optional<Tensor>& pair_scores,
                       const MaskConfig& config) {
  config.validate();
  TokenEnergies e;
  e.unary_plus = kernels::scale(kernels::softplus(z), config.lambda_unary);
  if (pair_scores && config.lambda_pair > 0.0) {
    e.pair_plus = kernels::scale(kernels::softplus(*pair_scores), config.lambda_pair);
    e.total = kernels::add(e.unary_plus, e.pair_plus);
  } else {
    e.pair_plus = Tensor(z.shape());
    e.total = e.unary_plus;
  }
  return e;
}

Tensor gate(const Tensor& z) { return kernels::sigmoid(kernels::scale(z, -1.0)); }

double reg_loss(const Tensor& m, const Tensor& energy) {
  return kernels::mean(kernels::mul(m, energy));
}

MaskOutput forward(const Tensor& feature_map, const MaskLayerParams& params, MaskMode mode) {
  ad::Tape tape;
  const MaskVars vars = forward(tape.constant(feature_map), tape.constant(params.w),
                                tape.constant(params.b), params.config, mode);
  return MaskOutput{vars.masked.value(), vars.diagnostics()};
}

// ---------------------------------------------------------------------------
// Mask export

Tensor upsample_bilinear(const Tensor& grid, std::size_t out_h, std::size_t out_w) {
  if (grid.rank() != 2) throw ShapeError("upsample_bilinear: expected a 2-D grid");
  if (out_h == 0 || out_w == 0) throw ShapeError("upsample_bilinear: empty output");
  const std::size_t in_h = grid.dim(0), in_w = grid.dim(1);
  auto source = [](std::size_t dst, std::size_t in, std::size_t out) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) /
                         static_cast<double>(out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  Tensor out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = source(y, in_h, out_h);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = source(x, in_w, out_w);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, in_w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = grid(y0, x0) * (1.0 - fx) + grid(y0, x1) * fx;
      const double bottom = grid(y1, x0) * (1.0 - fx) + grid(y1, x1) * fx;
      out(y, x) = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

void write_mask_pgm(const std::filesystem::path& path, const Tensor& m,
                    const TokenGeometry& geometry, std::size_t out_h, std::size_t out_w) {
  if (m.size() != geometry.num_tokens()) {
    throw ShapeError("mask has " + std::to_string(m.size()) + " values for " +
                     std::to_string(geometry.num_tokens()) + " tokens");
  }
  const Tensor grid = m.reshaped({geometry.grid_h(), geometry.grid_w()});
  const Tensor image = upsample_bilinear(grid, out_h, out_w);
  const std::string header =
      "P5\n" + std::to_string(out_w) + " " + std::to_string(out_h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (double v : image.data()) {
    bytes.push_back(static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))));
  }
  write_file_atomic(path, bytes);
}

}  // namespace ersm
