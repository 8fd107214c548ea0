#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ersm/tensor.hpp"

namespace ersm {

struct NeighborTable;

namespace ad {

/// Operation tag recorded on each tape node.
enum class Op {
  Leaf,
  Conv2d,
  MaxPool2d,
  Unfold,
  Fold,
  Add,
  Sub,
  Mul,
  Scale,
  MatMul,
  Dot,
  Relu,
  Sigmoid,
  Softplus,
  L2NormRows,
  Sum,
  Mean,
  CrossEntropyLogits,
  NeighborCosineSum,
  MulRows,
  SpatialMean,
  Reshape,
};

const char* op_name(Op op);

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
};

/// Reverse-mode tape. Nodes are appended in creation order, which is a valid
/// topological order; backward() walks them once in reverse.
///
/// A tape is single-owner. Distinct tapes share nothing and may be used from
/// different threads.
class Tape {
 public:
  /// Receives the upstream gradient of the node and accumulates into parents.
  using BackwardFn = std::function<void(Tape&, const Tensor& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const;
  /// Accumulated gradient; zeros until backward() has run. Throws for
  /// nodes that do not require gradients.
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;
  Op op(Var v) const;
  const std::vector<std::size_t>& parents(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Propagates d(root)/d(node) to every node that requires gradients.
  /// Throws ShapeError for a non-scalar root and std::logic_error when called
  /// a second time without zero_grad().
  void backward(Var root);
  void zero_grad();

  /// Appends an op node. `backward` is dropped when no parent requires grad.
  Var push(Op op, Tensor value, std::vector<std::size_t> parents, BackwardFn backward);
  /// Adds `delta` to the gradient of `v` if it requires one.
  void accumulate(std::size_t id, const Tensor& delta);
  void accumulate(std::size_t id, Tensor&& delta);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Tensor value;
    Op op = Op::Leaf;
    std::vector<std::size_t> parents;
    // Allocated on first accumulation; an untouched gradient reads as zeros.
    mutable Tensor grad;
    mutable bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Node& grad_target(std::size_t id, const Tensor& delta);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

Var conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t pad);
Var maxpool2d(Var input, std::size_t window);
Var unfold(Var input, std::size_t patch);
Var fold(Var tokens, const TokenGeometry& geometry);
/// Elementwise; `b` may also be a single element broadcast over `a`.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var matmul(Var a, Var b);
Var dot(Var a, Var b);
Var relu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
/// Gradient treats eps as a constant.
Var l2norm_rows(Var a, double eps = 1e-8);
Var sum(Var a);
Var mean(Var a);
/// log-sum-exp(logits) - logits[label] as a one-element tensor.
Var cross_entropy_logits(Var logits, std::size_t label);
Var mul_rows(Var a, Var factors);
Var spatial_mean(Var a);
Var reshape(Var a, Shape shape);
/// Defined with the energy mask layer.
Var neighbor_cosine_sum(Var normalized_tokens, const NeighborTable& table);

/// Attributes for the tag-dispatched record(); each op reads only its own.
struct OpAttrs {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t window = 2;
  std::size_t patch = 1;
  TokenGeometry geometry{};
  double factor = 1.0;
  double eps = 1e-8;
  std::size_t label = 0;
  const NeighborTable* table = nullptr;
  Shape shape{};
};

/// Records `op` on the inputs' tape. Throws std::invalid_argument for tags
/// outside the differentiable op set, wrong arity, or missing attributes.
Var record(Op op, std::span<const Var> inputs, const OpAttrs& attrs = {});

/// Builds a scalar loss on a fresh tape from leaf variables for `params`.
using ScalarGraph = std::function<Var(Tape&, std::span<const Var>)>;

struct ParamCheck {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Compares tape gradients against central differences with step `h`.
/// Error per element is |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12).
GradCheckReport grad_check(const ScalarGraph& f, std::vector<Tensor> params, double h = 1e-5,
                           double tol = 1e-6);

}  // namespace ad
}  // namespace ersm
