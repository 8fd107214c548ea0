#include "ersm/tensor.hpp"

#include "gemm.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <sstream>

namespace ersm {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void require_positive_extents(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

template <typename F>
Tensor map(const Tensor& a, const char* op, F f) {
  if (a.empty()) throw ShapeError(std::string(op) + ": empty tensor");
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  kernels::check_finite(out, op);
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  if (a.empty()) throw ShapeError(std::string(op) + ": empty tensor");
  Tensor out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  kernels::check_finite(out, op);
  return out;
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  require_positive_extents(shape_);
  data_.assign(numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require_positive_extents(shape_);
  if (numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + to_string(shape_));
  }
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void TokenGeometry::validate() const {
  if (channels == 0 || height == 0 || width == 0 || patch == 0) {
    throw ShapeError("token geometry extents must be positive");
  }
  if (height % patch != 0 || width % patch != 0) {
    throw ShapeError("feature map " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by patch size " + std::to_string(patch));
  }
}

TokenGeometry TokenGeometry::of(const Shape& feature_shape, std::size_t patch) {
  if (feature_shape.size() != 3) {
    throw ShapeError("expected a C x H x W feature map, got " + to_string(feature_shape));
  }
  TokenGeometry g{feature_shape[0], feature_shape[1], feature_shape[2], patch};
  g.validate();
  return g;
}

namespace kernels {

void check_finite(const Tensor& t, const char* op) {
  // A value is NaN or infinite exactly when all exponent bits are set.
  constexpr std::uint64_t kExponent = 0x7FF0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : t.data()) {
    bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExponent) == kExponent);
  }
  if (bad) throw NumericError(std::string(op) + ": non-finite value produced");
}

double dot(const double* x, const double* y, std::size_t n) {
  double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 += x[i] * y[i];
    acc1 += x[i + 1] * y[i + 1];
    acc2 += x[i + 2] * y[i + 2];
    acc3 += x[i + 3] * y[i + 3];
  }
  for (; i < n; ++i) acc0 += x[i] * y[i];
  return (acc0 + acc1) + (acc2 + acc3);
}

Tensor im2col(const Tensor& input, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require_rank(input, 3, "im2col");
  const std::size_t channels = input.dim(0), height = input.dim(1), width = input.dim(2);
  if (stride == 0) throw ShapeError("im2col: stride must be >= 1");
  if (kernel == 0 || kernel > height + 2 * pad || kernel > width + 2 * pad) {
    throw ShapeError("im2col: kernel larger than padded input");
  }
  const std::size_t out_h = (height + 2 * pad - kernel) / stride + 1;
  const std::size_t out_w = (width + 2 * pad - kernel) / stride + 1;
  Tensor cols({channels * kernel * kernel, out_h * out_w});
  const double* src = input.data().data();
  double* dst = cols.data().data();
  const std::size_t positions = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        double* row = dst + ((c * kernel + ky) * kernel + kx) * positions;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          double* out_row = row + oy * out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(out_row, out_row + out_w, 0.0);
            continue;
          }
          const double* in_row = src + (c * height + static_cast<std::size_t>(iy)) * width;
          if (stride == 1) {
            // Valid columns form one contiguous run of the input row.
            const std::size_t lo = kx < pad ? pad - kx : 0;
            const std::size_t hi = std::min(out_w, width + pad - kx);
            std::fill(out_row, out_row + lo, 0.0);
            if (hi > lo) std::copy(in_row + lo + kx - pad, in_row + hi + kx - pad, out_row + lo);
            std::fill(out_row + std::max(lo, hi), out_row + out_w, 0.0);
            continue;
          }
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            out_row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width))
                              ? 0.0
                              : in_row[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
  return cols;
}

Tensor col2im(const Tensor& cols, const Shape& image_shape, std::size_t kernel,
              std::size_t stride, std::size_t pad) {
  if (image_shape.size() != 3) throw ShapeError("col2im: image shape must be C x H x W");
  const std::size_t channels = image_shape[0], height = image_shape[1], width = image_shape[2];
  const std::size_t out_h = (height + 2 * pad - kernel) / stride + 1;
  const std::size_t out_w = (width + 2 * pad - kernel) / stride + 1;
  if (cols.shape() != Shape{channels * kernel * kernel, out_h * out_w}) {
    throw ShapeError("col2im: column matrix shape " + to_string(cols.shape()) +
                     " does not match image " + to_string(image_shape));
  }
  Tensor image(image_shape);
  const double* src = cols.data().data();
  double* dst = image.data().data();
  const std::size_t positions = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const double* row = src + ((c * kernel + ky) * kernel + kx) * positions;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          double* img_row = dst + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
            img_row[static_cast<std::size_t>(ix)] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
  return image;
}

Shape conv2d_output_shape(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                          std::size_t stride, std::size_t pad) {
  require_rank(input, 3, "conv2d");
  require_rank(kernels, 4, "conv2d");
  const std::size_t out_channels = kernels.dim(0);
  const std::size_t kernel = kernels.dim(2);
  if (kernels.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d: kernels expect " + std::to_string(kernels.dim(1)) +
                     " input channels, input has " + std::to_string(input.dim(0)));
  }
  if (kernels.dim(3) != kernel) throw ShapeError("conv2d: kernels must be square");
  if (bias.shape() != Shape{out_channels}) {
    throw ShapeError("conv2d: bias shape " + to_string(bias.shape()) + " for " +
                     std::to_string(out_channels) + " output channels");
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (kernel > input.dim(1) + 2 * pad || kernel > input.dim(2) + 2 * pad) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  return {out_channels, (input.dim(1) + 2 * pad - kernel) / stride + 1,
          (input.dim(2) + 2 * pad - kernel) / stride + 1};
}

Tensor conv2d_lowered(const Tensor& cols, const Tensor& kernels, const Tensor& bias,
                      const Shape& out_shape) {
  const std::size_t out_channels = kernels.dim(0);
  const std::size_t reduce = kernels.size() / out_channels;
  const std::size_t positions = out_shape.at(1) * out_shape.at(2);
  if (cols.shape() != Shape{reduce, positions} || out_shape[0] != out_channels) {
    throw ShapeError("conv2d: patch matrix " + to_string(cols.shape()) +
                     " does not match kernels " + to_string(kernels.shape()));
  }
  Tensor out(out_shape);
  double* dst = out.data().data();
  for (std::size_t co = 0; co < out_channels; ++co) {
    std::fill(dst + co * positions, dst + (co + 1) * positions, bias[co]);
  }
  detail::gemm_nn(out_channels, positions, reduce, kernels.data().data(), cols.data().data(),
                  dst);
  check_finite(out, "conv2d");
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              std::size_t stride, std::size_t pad) {
  const Shape out_shape = conv2d_output_shape(input, kernels, bias, stride, pad);
  return conv2d_lowered(im2col(input, kernels.dim(2), stride, pad), kernels, bias, out_shape);
}

MaxPoolResult maxpool2d(const Tensor& input, std::size_t window) {
  require_rank(input, 3, "maxpool2d");
  const std::size_t channels = input.dim(0), height = input.dim(1), width = input.dim(2);
  if (window == 0 || height % window != 0 || width % window != 0) {
    throw ShapeError("maxpool2d: extents " + to_string(input.shape()) +
                     " not divisible by window " + std::to_string(window));
  }
  const std::size_t out_h = height / window, out_w = width / window;
  MaxPoolResult result{Tensor({channels, out_h, out_w}), {}};
  result.argmax.resize(channels * out_h * out_w);
  const double* src = input.data().data();
  double* dst = result.output.data().data();
  std::size_t o = 0;
  if (window == 2) {
    std::size_t* arg = result.argmax.data();
    for (std::size_t row = 0; row < channels * out_h; ++row) {
      const std::size_t base = 2 * row * width;
      const double* r0 = src + base;
      const double* r1 = r0 + width;
      for (std::size_t ox = 0; ox < out_w; ++ox, ++o) {
        // Scan order (0,0) (0,1) (1,0) (1,1); strict > keeps the first maximum.
        const std::size_t x0 = 2 * ox;
        double top = r0[x0];
        std::size_t best = base + x0;
        if (r0[x0 + 1] > top) top = r0[x0 + 1], best = base + x0 + 1;
        if (r1[x0] > top) top = r1[x0], best = base + width + x0;
        if (r1[x0 + 1] > top) top = r1[x0 + 1], best = base + width + x0 + 1;
        dst[o] = top;
        arg[o] = best;
      }
    }
    check_finite(result.output, "maxpool2d");
    return result;
  }
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox, ++o) {
        std::size_t best = (c * height + oy * window) * width + ox * window;
        double top = src[best];
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = (c * height + oy * window + dy) * width + ox * window + dx;
            // Branch-free select; strict > keeps the first maximum.
            const bool greater = src[idx] > top;
            best = greater ? idx : best;
            top = greater ? src[idx] : top;
          }
        }
        dst[o] = top;
        result.argmax[o] = best;
      }
    }
  }
  check_finite(result.output, "maxpool2d");
  return result;
}

Tensor unfold(const Tensor& input, std::size_t patch) {
  const TokenGeometry g = TokenGeometry::of(input.shape(), patch);
  const std::size_t gw = g.grid_w();
  Tensor tokens({g.num_tokens(), g.token_dim()});
  const double* src = input.data().data();
  double* dst = tokens.data().data();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t y = 0; y < g.height; ++y) {
      for (std::size_t x = 0; x < g.width; ++x) {
        const std::size_t token = (y / patch) * gw + x / patch;
        const std::size_t offset = (c * patch + y % patch) * patch + x % patch;
        dst[token * g.token_dim() + offset] = src[(c * g.height + y) * g.width + x];
      }
    }
  }
  return tokens;
}

Tensor fold(const Tensor& tokens, const TokenGeometry& g) {
  g.validate();
  if (tokens.shape() != Shape{g.num_tokens(), g.token_dim()}) {
    throw ShapeError("fold: tokens " + to_string(tokens.shape()) + " inconsistent with " +
                     std::to_string(g.channels) + "x" + std::to_string(g.height) + "x" +
                     std::to_string(g.width) + " / patch " + std::to_string(g.patch));
  }
  const std::size_t patch = g.patch, gw = g.grid_w();
  Tensor image({g.channels, g.height, g.width});
  const double* src = tokens.data().data();
  double* dst = image.data().data();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t y = 0; y < g.height; ++y) {
      for (std::size_t x = 0; x < g.width; ++x) {
        const std::size_t token = (y / patch) * gw + x / patch;
        const std::size_t offset = (c * patch + y % patch) * patch + x % patch;
        dst[(c * g.height + y) * g.width + x] = src[token * g.token_dim() + offset];
      }
    }
  }
  return image;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, "sub", [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, "mul", [](double x, double y) { return x * y; });
}
Tensor scale(const Tensor& a, double factor) {
  return map(a, "scale", [factor](double x) { return x * factor; });
}
Tensor relu(const Tensor& a) {
  return map(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; });
}
Tensor sigmoid(const Tensor& a) {
  return map(a, "sigmoid", [](double x) { return sigmoid(x); });
}
Tensor softplus(const Tensor& a) {
  return map(a, "softplus", [](double x) { return softplus(x); });
}

double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  const std::size_t rows = a.dim(0), inner = a.dim(1);
  if (b.rank() == 1) {
    if (b.dim(0) != inner) {
      throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    Tensor out({rows});
    for (std::size_t i = 0; i < rows; ++i) {
      out[i] = dot(a.data().data() + i * inner, b.data().data(), inner);
    }
    check_finite(out, "matmul");
    return out;
  }
  require_rank(b, 2, "matmul");
  if (b.dim(0) != inner) {
    throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t cols = b.dim(1);
  Tensor out({rows, cols});
  const double* x = a.data().data();
  const double* y = b.data().data();
  double* dst = out.data().data();
  detail::gemm_nn(rows, cols, inner, x, y, dst);
  check_finite(out, "matmul");
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  require_rank(a, 1, "dot");
  require_same_shape(a, b, "dot");
  const double v = dot(a.data().data(), b.data().data(), a.size());
  if (!std::isfinite(v)) throw NumericError("dot: non-finite value produced");
  return v;
}

double sum(const Tensor& a) {
  if (a.empty()) throw ShapeError("sum: empty tensor");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  if (!std::isfinite(acc)) throw NumericError("sum: non-finite value produced");
  return acc;
}

double mean(const Tensor& a) { return sum(a) / static_cast<double>(a.size()); }

Tensor l2norm_rows(const Tensor& a, double eps) {
  require_rank(a, 2, "l2norm_rows");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = a.data().data() + i * cols;
    const double norm = std::sqrt(dot(row, row, cols));
    const double denom = norm + eps;
    double* dst = out.data().data() + i * cols;
    if (denom == 0.0) {
      std::fill(dst, dst + cols, 0.0);
      continue;
    }
    for (std::size_t j = 0; j < cols; ++j) dst[j] = row[j] / denom;
  }
  check_finite(out, "l2norm_rows");
  return out;
}

Tensor mul_rows(const Tensor& a, const Tensor& factors) {
  require_rank(a, 2, "mul_rows");
  if (factors.shape() != Shape{a.dim(0)}) {
    throw ShapeError("mul_rows: factors " + to_string(factors.shape()) + " for matrix " +
                     to_string(a.shape()));
  }
  const std::size_t cols = a.dim(1);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = factors[i] * a(i, j);
  }
  check_finite(out, "mul_rows");
  return out;
}

Tensor spatial_mean(const Tensor& a) {
  require_rank(a, 3, "spatial_mean");
  const std::size_t channels = a.dim(0), plane = a.dim(1) * a.dim(2);
  Tensor out({channels});
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = a.data().data() + c * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += src[i];
    out[c] = acc / static_cast<double>(plane);
  }
  check_finite(out, "spatial_mean");
  return out;
}

}  // namespace kernels
}  // namespace ersm
