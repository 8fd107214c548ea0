#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ersm {

using Shape = std::vector<std::size_t>;

/// Thrown when operand shapes do not conform to an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a kernel would produce a NaN or infinity.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles with an explicit shape.
///
/// A default-constructed tensor is empty (rank 0, no elements) and is only
/// useful as a placeholder; every kernel rejects it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) {
    assert(i < data_.size());
    return data_[i];
  }
  double operator[](std::size_t i) const {
    assert(i < data_.size());
    return data_[i];
  }

  double& operator()(std::size_t i, std::size_t j) {
    assert(rank() == 2);
    return data_[i * shape_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    assert(rank() == 2);
    return data_[i * shape_[1] + j];
  }
  double& operator()(std::size_t c, std::size_t y, std::size_t x) {
    assert(rank() == 3);
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double operator()(std::size_t c, std::size_t y, std::size_t x) const {
    assert(rank() == 3);
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  /// Value of a single-element tensor.
  double item() const;

  /// Same data under a new shape with the same element count.
  Tensor reshaped(Shape shape) const;

  void fill(double value);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Geometry of a C x H x W feature map partitioned into d x d patches.
struct TokenGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t patch = 1;

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t num_tokens() const { return grid_h() * grid_w(); }
  std::size_t token_dim() const { return channels * patch * patch; }

  /// Throws ShapeError unless H and W are positive multiples of the patch.
  void validate() const;

  static TokenGeometry of(const Shape& feature_shape, std::size_t patch);

  friend bool operator==(const TokenGeometry&, const TokenGeometry&) = default;
};

struct MaxPoolResult {
  Tensor output;
  /// Flat index into the input tensor of each output cell's maximum.
  std::vector<std::size_t> argmax;
};

namespace kernels {

/// Throws NumericError naming `op` if any element is NaN or infinite.
void check_finite(const Tensor& t, const char* op);

// 2-D convolution over a single C x H x W image with zero padding.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              std::size_t stride, std::size_t pad);
/// Validates conv2d operands and returns the Co x H' x W' output shape.
Shape conv2d_output_shape(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                          std::size_t stride, std::size_t pad);
/// conv2d on an input already lowered by im2col.
Tensor conv2d_lowered(const Tensor& cols, const Tensor& kernels, const Tensor& bias,
                      const Shape& out_shape);

/// Lowers a C x H x W image to a (C*k*k) x (H'*W') patch matrix.
Tensor im2col(const Tensor& input, std::size_t kernel, std::size_t stride,
              std::size_t pad);
/// Scatter-adds a patch matrix back onto a C x H x W image (adjoint of im2col).
Tensor col2im(const Tensor& cols, const Shape& image_shape, std::size_t kernel,
              std::size_t stride, std::size_t pad);

/// Non-overlapping max pooling; ties resolve to the lowest flat index.
MaxPoolResult maxpool2d(const Tensor& input, std::size_t window);

Tensor unfold(const Tensor& input, std::size_t patch);
Tensor fold(const Tensor& tokens, const TokenGeometry& geometry);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);

/// [M,K] x [K,N] -> [M,N], or [M,K] x [K] -> [M].
Tensor matmul(const Tensor& a, const Tensor& b);
double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);
double mean(const Tensor& a);

/// Each row divided by (its L2 norm + eps).
Tensor l2norm_rows(const Tensor& a, double eps = 1e-8);

/// Row i of an [N,D] matrix multiplied by factors[i].
Tensor mul_rows(const Tensor& a, const Tensor& factors);

/// Per-channel mean over all spatial positions of a C x H x W map.
Tensor spatial_mean(const Tensor& a);

// Scalar forms shared by the tensor kernels and their derivatives.
double softplus(double x);
double sigmoid(double x);

/// Sum of x[i]*y[i] with a fixed four-way accumulation order.
double dot(const double* x, const double* y, std::size_t n);

}  // namespace kernels
}  // namespace ersm
