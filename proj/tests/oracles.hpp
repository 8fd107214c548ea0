#pragma once

// Straight-line reference implementations used as test oracles. These avoid
// the library kernels entirely: plain nested loops over flat arrays.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ersm/model.hpp"
#include "ersm/rng.hpp"
#include "ersm/tensor.hpp"

namespace oracle {

using ersm::Shape;
using ersm::Tensor;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  ersm::Rng rng(seed, 0xABCDEF);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t stride,
                     std::size_t pad) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = k.dim(0), K = k.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - K) / stride + 1;
  Tensor out({O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double s = b[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < K; ++u)
            for (std::size_t v = 0; v < K; ++v) {
              const long y = static_cast<long>(i * stride + u) - static_cast<long>(pad);
              const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
              if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
              s += k[((o * C + c) * K + u) * K + v] * x[(c * H + y) * W + xx];
            }
        out[(o * Ho + i) * Wo + j] = s;
      }
  return out;
}

struct Pool {
  Tensor out;
  std::vector<std::size_t> argmax;
  /// Smallest gap between a window's max and its runner-up.
  double margin = std::numeric_limits<double>::infinity();
};

inline Pool maxpool(const Tensor& x, std::size_t win) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Pool p{Tensor({C, H / win, W / win}), {}, std::numeric_limits<double>::infinity()};
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H / win; ++i)
      for (std::size_t j = 0; j < W / win; ++j) {
        std::vector<std::pair<double, std::size_t>> cells;
        for (std::size_t u = 0; u < win; ++u)
          for (std::size_t v = 0; v < win; ++v) {
            const std::size_t idx = (c * H + i * win + u) * W + j * win + v;
            cells.push_back({x[idx], idx});
          }
        std::size_t best = 0;
        for (std::size_t q = 1; q < cells.size(); ++q)
          if (cells[q].first > cells[best].first) best = q;
        for (std::size_t q = 0; q < cells.size(); ++q)
          if (q != best) p.margin = std::min(p.margin, cells[best].first - cells[q].first);
        p.out[(c * (H / win) + i) * (W / win) + j] = cells[best].first;
        p.argmax.push_back(cells[best].second);
      }
  return p;
}

/// Token t = (gy, gx) holds x[c, gy*d + u, gx*d + v] at c*d*d + u*d + v.
inline Tensor unfold(const Tensor& x, std::size_t d) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t gh = H / d, gw = W / d;
  Tensor t({gh * gw, C * d * d});
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t u = 0; u < d; ++u)
          for (std::size_t v = 0; v < d; ++v)
            t[(gy * gw + gx) * C * d * d + (c * d + u) * d + v] =
                x[(c * H + gy * d + u) * W + gx * d + v];
  return t;
}

inline Tensor normalize_rows(const Tensor& t, double eps = 1e-8) {
  Tensor out = t;
  const std::size_t n = t.dim(0), D = t.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < D; ++j) s += t[i * D + j] * t[i * D + j];
    const double norm = std::sqrt(s) + eps;
    for (std::size_t j = 0; j < D; ++j) out[i * D + j] = t[i * D + j] / norm;
  }
  return out;
}

/// Double loop over every token pair, adjacency tested from grid coordinates.
inline std::vector<double> neighbor_sum(const Tensor& phat, std::size_t gh, std::size_t gw) {
  const std::size_t n = gh * gw, D = phat.dim(1);
  std::vector<double> e(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const long dy = static_cast<long>(i / gw) - static_cast<long>(j / gw);
      const long dx = static_cast<long>(i % gw) - static_cast<long>(j % gw);
      if (std::abs(dy) > 1 || std::abs(dx) > 1) continue;
      double s = 0.0;
      for (std::size_t q = 0; q < D; ++q) s += phat[i * D + q] * phat[j * D + q];
      e[i] += s;
    }
  return e;
}

inline double cross_entropy(const std::vector<double>& logits, std::size_t label) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  return mx + std::log(s) - logits[label];
}

struct Forward {
  std::vector<double> logits;
  std::vector<double> z, m, energy;
  double reg = 0.0;
  /// Smallest |pre-activation| and smallest pooling margin met on the way,
  /// so gradient checks can steer clear of kinks.
  double relu_margin = std::numeric_limits<double>::infinity();
  double pool_margin = std::numeric_limits<double>::infinity();
};

/// Full model forward pass: backbone, energy mask, pooling and head.
inline Forward model_forward(const ersm::ModelConfig& cfg, const ersm::ModelParams& p,
                             const Tensor& input, bool pairwise) {
  Forward f;
  Tensor x = input;
  for (std::size_t l = 0; l < cfg.backbone.layers.size(); ++l) {
    const auto& spec = cfg.backbone.layers[l];
    x = conv2d(x, p.backbone[l].weight, p.backbone[l].bias, spec.stride, spec.pad);
    if (spec.relu) {
      for (double& v : x.data()) {
        f.relu_margin = std::min(f.relu_margin, std::abs(v));
        v = v > 0.0 ? v : 0.0;
      }
    }
    if (spec.pool > 1) {
      Pool pr = maxpool(x, spec.pool);
      f.pool_margin = std::min(f.pool_margin, pr.margin);
      x = pr.out;
    }
  }
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::vector<double> pooled(C, 0.0);
  if (cfg.variant == ersm::Variant::Baseline) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t q = 0; q < H * W; ++q) pooled[c] += x[c * H * W + q];
      pooled[c] /= static_cast<double>(H * W);
    }
  } else {
    const std::size_t d = cfg.mask.patch;
    const Tensor tok = unfold(x, d);
    const Tensor phat = normalize_rows(tok, cfg.mask.eps);
    const std::size_t n = tok.dim(0), D = tok.dim(1);
    const double lp = cfg.variant == ersm::Variant::Unary ? 0.0 : cfg.mask.lambda_pair;
    std::vector<double> pair(n, 0.0);
    if (pairwise && lp > 0.0) pair = neighbor_sum(phat, H / d, W / d);
    for (std::size_t i = 0; i < n; ++i) {
      double z = p.mask.b[0];
      for (std::size_t q = 0; q < D; ++q) z += p.mask.w[q] * phat[i * D + q];
      const double m = sigmoid(-z);
      double e = cfg.mask.lambda_unary * softplus(z);
      if (pairwise && lp > 0.0) e += lp * softplus(pair[i]);
      f.z.push_back(z);
      f.m.push_back(m);
      f.energy.push_back(e);
      f.reg += m * e / static_cast<double>(n);
      // Token i covers channel c, rows gy*d.., cols gx*d..; pool the masked values.
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t u = 0; u < d * d; ++u) pooled[c] += m * tok[i * D + c * d * d + u];
    }
    for (double& v : pooled) v /= static_cast<double>(H * W);
  }
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    double s = p.head.bias[k];
    for (std::size_t c = 0; c < C; ++c) s += p.head.weight[k * C + c] * pooled[c];
    f.logits.push_back(s);
  }
  return f;
}

/// Zeroes the listed tokens of a feature map and rescales the surviving
/// pooled sum by the explicit count of remaining cells.
inline std::vector<double> deleted_logits(const ersm::ModelParams& p, const Tensor& features,
                                          std::size_t d, const std::vector<std::size_t>& del) {
  const std::size_t C = features.dim(0), H = features.dim(1), W = features.dim(2);
  const std::size_t gw = W / d;
  std::vector<double> pooled(C, 0.0);
  std::size_t kept_cells = 0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t token = (y / d) * gw + x / d;
      if (std::find(del.begin(), del.end(), token) != del.end()) continue;
      ++kept_cells;
      for (std::size_t c = 0; c < C; ++c) pooled[c] += features[(c * H + y) * W + x];
    }
  std::vector<double> logits;
  for (std::size_t k = 0; k < p.head.bias.size(); ++k) {
    double s = p.head.bias[k];
    for (std::size_t c = 0; c < C; ++c)
      s += p.head.weight[k * C + c] * pooled[c] / static_cast<double>(kept_cells);
    logits.push_back(s);
  }
  return logits;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("ersm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace oracle
