#include "ersm/autodiff.hpp"

#include "gemm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace ersm::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Conv2d: return "conv2d";
    case Op::MaxPool2d: return "maxpool2d";
    case Op::Unfold: return "unfold";
    case Op::Fold: return "fold";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::MatMul: return "matmul";
    case Op::Dot: return "dot";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::L2NormRows: return "l2norm_rows";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::CrossEntropyLogits: return "cross_entropy_logits";
    case Op::NeighborCosineSum: return "neighbor_cosine_sum";
    case Op::MulRows: return "mul_rows";
    case Op::SpatialMean: return "spatial_mean";
    case Op::Reshape: return "reshape";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape->value(*this); }
const Tensor& Var::grad() const { return tape->grad(*this); }

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw std::invalid_argument("variable does not belong to this tape");
  }
  return nodes_[v.id];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (value.empty()) throw ShapeError("tape leaf must not be empty");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::push(Op op, Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  bool needs_grad = false;
  for (std::size_t p : parents) needs_grad = needs_grad || nodes_.at(p).requires_grad;
  Node n;
  n.op = op;
  n.parents = std::move(parents);
  n.requires_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.requires_grad) throw std::invalid_argument("node does not require gradients");
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }
Op Tape::op(Var v) const { return node(v).op; }
const std::vector<std::size_t>& Tape::parents(Var v) const { return node(v).parents; }

Tape::Node& Tape::grad_target(std::size_t id, const Tensor& delta) {
  Node& n = nodes_[id];
  if (delta.shape() != n.value.shape()) {
    throw ShapeError("gradient shape " + to_string(delta.shape()) + " for node of shape " +
                     to_string(n.value.shape()));
  }
  return n;
}

void Tape::accumulate(std::size_t id, const Tensor& delta) {
  if (!nodes_[id].requires_grad) return;
  Node& n = grad_target(id, delta);
  if (!n.has_grad) {
    n.grad = delta;
    n.has_grad = true;
    return;
  }
  auto dst = n.grad.data();
  auto src = delta.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::accumulate(std::size_t id, Tensor&& delta) {
  if (!nodes_[id].requires_grad) return;
  Node& n = grad_target(id, delta);
  if (!n.has_grad) {
    n.grad = std::move(delta);
    n.has_grad = true;
    return;
  }
  auto dst = n.grad.data();
  auto src = delta.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var root) {
  const Node& r = node(root);
  if (r.value.size() != 1) {
    throw ShapeError("backward root must be scalar, got " + to_string(r.value.shape()));
  }
  if (backward_done_) throw std::logic_error("backward already ran on this tape; call zero_grad()");
  backward_done_ = true;
  if (!r.requires_grad) return;
  accumulate(root.id, Tensor::full(r.value.shape(), 1.0));
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    // A node that received no gradient contributes nothing upstream.
    if (n.requires_grad && n.has_grad && n.backward) {
      // Parents always precede a node, so its own gradient is final here.
      n.backward(*this, n.grad);
    }
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    if (n.has_grad) n.grad.fill(0.0);
  }
  backward_done_ = false;
}

namespace {

Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (Var v : vars) {
    if (v.tape == nullptr) throw std::invalid_argument("variable is not bound to a tape");
    if (t != nullptr && v.tape != t) throw std::invalid_argument("variables live on different tapes");
    t = v.tape;
  }
  return *t;
}

}  // namespace

Var conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t pad) {
  Tape& t = tape_of({input, kernels, bias});
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  const Shape out_shape = kernels::conv2d_output_shape(x, k, bias.value(), stride, pad);
  Tensor cols = kernels::im2col(x, k.dim(2), stride, pad);
  Tensor out = kernels::conv2d_lowered(cols, k, bias.value(), out_shape);
  if (!t.requires_grad(kernels.id)) cols = Tensor();
  const std::size_t xi = input.id, ki = kernels.id, bi = bias.id;
  const Shape in_shape = x.shape();
  return t.push(Op::Conv2d, std::move(out), {xi, ki, bi},
                [=, cols = std::move(cols)](Tape& tp, const Tensor& g) {
                  const Tensor& kv = tp.value(Var{&tp, ki});
                  const std::size_t out_c = kv.dim(0);
                  const std::size_t reduce = kv.size() / out_c;
                  const std::size_t positions = g.size() / out_c;
                  const double* gy = g.data().data();
                  if (tp.requires_grad(bi)) {
                    Tensor db({out_c});
                    for (std::size_t co = 0; co < out_c; ++co) {
                      double acc = 0.0;
                      for (std::size_t p = 0; p < positions; ++p) acc += gy[co * positions + p];
                      db[co] = acc;
                    }
                    tp.accumulate(bi, db);
                  }
                  if (tp.requires_grad(ki)) {
                    // dK^T = cols * dY^T, written straight into dK's layout.
                    std::vector<double> gy_t(positions * out_c);
                    detail::transpose(out_c, positions, gy, gy_t.data());
                    Tensor dk(kv.shape());
                    detail::gemm_nn_tc(reduce, out_c, positions, cols.data().data(), gy_t.data(),
                                       dk.data().data());
                    tp.accumulate(ki, dk);
                  }
                  if (tp.requires_grad(xi)) {
                    Tensor dcols({reduce, positions});
                    detail::gemm_tn(reduce, positions, out_c, kv.data().data(), gy,
                                    dcols.data().data());
                    tp.accumulate(xi, kernels::col2im(dcols, in_shape, kv.dim(2), stride, pad));
                  }
                });
}

Var maxpool2d(Var input, std::size_t window) {
  Tape& t = tape_of({input});
  MaxPoolResult r = kernels::maxpool2d(input.value(), window);
  const std::size_t xi = input.id;
  const Shape in_shape = input.value().shape();
  return t.push(Op::MaxPool2d, std::move(r.output), {xi},
                [xi, in_shape, argmax = std::move(r.argmax)](Tape& tp, const Tensor& g) {
                  Tensor dx(in_shape);
                  for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += g[o];
                  tp.accumulate(xi, dx);
                });
}

Var unfold(Var input, std::size_t patch) {
  Tape& t = tape_of({input});
  const TokenGeometry geometry = TokenGeometry::of(input.value().shape(), patch);
  const std::size_t xi = input.id;
  return t.push(Op::Unfold, kernels::unfold(input.value(), patch), {xi},
                [xi, geometry](Tape& tp, const Tensor& g) {
                  tp.accumulate(xi, kernels::fold(g, geometry));
                });
}

Var fold(Var tokens, const TokenGeometry& geometry) {
  Tape& t = tape_of({tokens});
  const std::size_t ti = tokens.id;
  return t.push(Op::Fold, kernels::fold(tokens.value(), geometry), {ti},
                [ti, patch = geometry.patch](Tape& tp, const Tensor& g) {
                  tp.accumulate(ti, kernels::unfold(g, patch));
                });
}

Var add(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t ai = a.id, bi = b.id;
  if (x.shape() == y.shape()) {
    return t.push(Op::Add, kernels::add(x, y), {ai, bi}, [ai, bi](Tape& tp, const Tensor& g) {
      tp.accumulate(ai, g);
      tp.accumulate(bi, g);
    });
  }
  if (y.size() != 1) {
    throw ShapeError("add: shape mismatch " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  }
  Tensor out(x.shape());
  const double s = y[0];
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + s;
  kernels::check_finite(out, "add");
  const Shape b_shape = y.shape();
  return t.push(Op::Add, std::move(out), {ai, bi}, [ai, bi, b_shape](Tape& tp, const Tensor& g) {
    tp.accumulate(ai, g);
    tp.accumulate(bi, Tensor(b_shape, {kernels::sum(g)}));
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const std::size_t ai = a.id, bi = b.id;
  return t.push(Op::Sub, kernels::sub(a.value(), b.value()), {ai, bi},
                [ai, bi](Tape& tp, const Tensor& g) {
                  tp.accumulate(ai, g);
                  tp.accumulate(bi, kernels::scale(g, -1.0));
                });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const std::size_t ai = a.id, bi = b.id;
  return t.push(Op::Mul, kernels::mul(a.value(), b.value()), {ai, bi},
                [ai, bi](Tape& tp, const Tensor& g) {
                  const Tensor& x = tp.value(Var{&tp, ai});
                  const Tensor& y = tp.value(Var{&tp, bi});
                  if (tp.requires_grad(ai)) tp.accumulate(ai, kernels::mul(g, y));
                  if (tp.requires_grad(bi)) tp.accumulate(bi, kernels::mul(g, x));
                });
}

Var scale(Var a, double factor) {
  Tape& t = tape_of({a});
  const std::size_t ai = a.id;
  return t.push(Op::Scale, kernels::scale(a.value(), factor), {ai},
                [ai, factor](Tape& tp, const Tensor& g) {
                  tp.accumulate(ai, kernels::scale(g, factor));
                });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const std::size_t ai = a.id, bi = b.id;
  return t.push(Op::MatMul, kernels::matmul(a.value(), b.value()), {ai, bi},
                [ai, bi](Tape& tp, const Tensor& g) {
                  const Tensor& x = tp.value(Var{&tp, ai});
                  const Tensor& y = tp.value(Var{&tp, bi});
                  const std::size_t rows = x.dim(0), inner = x.dim(1);
                  const std::size_t cols = y.rank() == 1 ? 1 : y.dim(1);
                  // Treat a vector right operand as an [inner, 1] matrix.
                  if (tp.requires_grad(ai)) {
                    Tensor dx(x.shape());
                    for (std::size_t i = 0; i < rows; ++i) {
                      for (std::size_t k = 0; k < inner; ++k) {
                        dx(i, k) = kernels::dot(g.data().data() + i * cols,
                                                y.data().data() + k * cols, cols);
                      }
                    }
                    tp.accumulate(ai, dx);
                  }
                  if (tp.requires_grad(bi)) {
                    Tensor dy(y.shape());
                    double* dst = dy.data().data();
                    for (std::size_t i = 0; i < rows; ++i) {
                      const double* grow = g.data().data() + i * cols;
                      for (std::size_t k = 0; k < inner; ++k) {
                        const double s = x(i, k);
                        double* drow = dst + k * cols;
                        for (std::size_t j = 0; j < cols; ++j) drow[j] += s * grow[j];
                      }
                    }
                    tp.accumulate(bi, dy);
                  }
                });
}

Var dot(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const std::size_t ai = a.id, bi = b.id;
  return t.push(Op::Dot, Tensor::scalar(kernels::dot(a.value(), b.value())), {ai, bi},
                [ai, bi](Tape& tp, const Tensor& g) {
                  const double s = g[0];
                  if (tp.requires_grad(ai)) tp.accumulate(ai, kernels::scale(tp.value(Var{&tp, bi}), s));
                  if (tp.requires_grad(bi)) tp.accumulate(bi, kernels::scale(tp.value(Var{&tp, ai}), s));
                });
}

Var relu(Var a) {
  Tape& t = tape_of({a});
  const std::size_t ai = a.id;
  return t.push(Op::Relu, kernels::relu(a.value()), {ai}, [ai](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(Var{&tp, ai});
    Tensor dx(x.shape());
    // relu'(0) := 0
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
    tp.accumulate(ai, dx);
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of({a});
  const std::size_t ai = a.id;
  return t.push(Op::Sigmoid, kernels::sigmoid(a.value()), {ai}, [ai](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(Var{&tp, ai});
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double s = kernels::sigmoid(x[i]);
      dx[i] = g[i] * s * (1.0 - s);
    }
    tp.accumulate(ai, dx);
  });
}

Var softplus(Var a) {
  Tape& t = tape_of({a});
  const std::size_t ai = a.id;
  return t.push(Op::Softplus, kernels::softplus(a.value()), {ai}, [ai](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(Var{&tp, ai});
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = g[i] * kernels::sigmoid(x[i]);
    tp.accumulate(ai, dx);
  });
}

Var l2norm_rows(Var a, double eps) {
  Tape& t = tape_of({a});
  const std::size_t ai = a.id;
  return t.push(Op::L2NormRows, kernels::l2norm_rows(a.value(), eps), {ai},
                [ai, eps](Tape& tp, const Tensor& g) {
                  const Tensor& x = tp.value(Var{&tp, ai});
                  const std::size_t rows = x.dim(0), cols = x.dim(1);
                  Tensor dx(x.shape());
                  for (std::size_t i = 0; i < rows; ++i) {
                    const double* xr = x.data().data() + i * cols;
                    const double* gr = g.data().data() + i * cols;
                    double* dr = dx.data().data() + i * cols;
                    const double norm = std::sqrt(kernels::dot(xr, xr, cols));
                    const double denom = norm + eps;
                    if (denom == 0.0) continue;
                    const double radial =
                        norm > 0.0 ? kernels::dot(xr, gr, cols) / (norm * denom * denom) : 0.0;
                    for (std::size_t j = 0; j < cols; ++j) dr[j] = gr[j] / denom - xr[j] * radial;
                  }
                  tp.accumulate(ai, dx);
                });
}

Var sum(Var a) {
  Tape& t = tape_of({a});
  const std::size_t ai = a.id;
  const Shape shape = a.value().shape();
  return t.push(Op::Sum, Tensor::scalar(kernels::sum(a.value())), {ai},
                [ai, shape](Tape& tp, const Tensor& g) {
                  tp.accumulate(ai, Tensor::full(shape, g[0]));
                });
}

Var mean(Var a) {
  Tape& t = tape_of({a});
  const std::size_t ai = a.id;
  const Shape shape = a.value().shape();
  const double n = static_cast<double>(a.value().size());
  return t.push(Op::Mean, Tensor::scalar(kernels::mean(a.value())), {ai},
                [ai, shape, n](Tape& tp, const Tensor& g) {
                  tp.accumulate(ai, Tensor::full(shape, g[0] / n));
                });
}

Var cross_entropy_logits(Var logits, std::size_t label) {
  Tape& t = tape_of({logits});
  const Tensor& l = logits.value();
  if (l.rank() != 1) throw ShapeError("cross_entropy_logits: logits must be a vector");
  if (label >= l.size()) {
    throw std::out_of_range("label " + std::to_string(label) + " out of range for " +
                            std::to_string(l.size()) + " classes");
  }
  double peak = l[0];
  for (double v : l.data()) peak = std::max(peak, v);
  double z = 0.0;
  for (double v : l.data()) z += std::exp(v - peak);
  const double lse = peak + std::log(z);
  const double loss = lse - l[label];
  if (!std::isfinite(loss)) throw NumericError("cross_entropy_logits: non-finite loss");
  const std::size_t li = logits.id;
  return t.push(Op::CrossEntropyLogits, Tensor::scalar(loss), {li},
                [li, label, lse](Tape& tp, const Tensor& g) {
                  const Tensor& x = tp.value(Var{&tp, li});
                  Tensor dx(x.shape());
                  for (std::size_t k = 0; k < x.size(); ++k) {
                    dx[k] = g[0] * (std::exp(x[k] - lse) - (k == label ? 1.0 : 0.0));
                  }
                  tp.accumulate(li, dx);
                });
}

Var mul_rows(Var a, Var factors) {
  Tape& t = tape_of({a, factors});
  const std::size_t ai = a.id, fi = factors.id;
  return t.push(Op::MulRows, kernels::mul_rows(a.value(), factors.value()), {ai, fi},
                [ai, fi](Tape& tp, const Tensor& g) {
                  const Tensor& x = tp.value(Var{&tp, ai});
                  const Tensor& f = tp.value(Var{&tp, fi});
                  const std::size_t cols = x.dim(1);
                  if (tp.requires_grad(ai)) tp.accumulate(ai, kernels::mul_rows(g, f));
                  if (tp.requires_grad(fi)) {
                    Tensor df(f.shape());
                    for (std::size_t i = 0; i < f.size(); ++i) {
                      df[i] = kernels::dot(g.data().data() + i * cols, x.data().data() + i * cols, cols);
                    }
                    tp.accumulate(fi, df);
                  }
                });
}

Var spatial_mean(Var a) {
  Tape& t = tape_of({a});
  const std::size_t ai = a.id;
  const Shape shape = a.value().shape();
  return t.push(Op::SpatialMean, kernels::spatial_mean(a.value()), {ai},
                [ai, shape](Tape& tp, const Tensor& g) {
                  const std::size_t plane = shape[1] * shape[2];
                  Tensor dx(shape);
                  for (std::size_t c = 0; c < shape[0]; ++c) {
                    const double v = g[c] / static_cast<double>(plane);
                    std::fill_n(dx.data().data() + c * plane, plane, v);
                  }
                  tp.accumulate(ai, dx);
                });
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of({a});
  const std::size_t ai = a.id;
  const Shape original = a.value().shape();
  return t.push(Op::Reshape, a.value().reshaped(std::move(shape)), {ai},
                [ai, original](Tape& tp, const Tensor& g) {
                  tp.accumulate(ai, g.reshaped(original));
                });
}

namespace {

void require_arity(Op op, std::span<const Var> inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw std::invalid_argument(std::string(op_name(op)) + " takes " + std::to_string(n) +
                                " inputs, got " + std::to_string(inputs.size()));
  }
}

}  // namespace

Var record(Op op, std::span<const Var> in, const OpAttrs& attrs) {
  switch (op) {
    case Op::Conv2d:
      require_arity(op, in, 3);
      return conv2d(in[0], in[1], in[2], attrs.stride, attrs.pad);
    case Op::MaxPool2d:
      require_arity(op, in, 1);
      return maxpool2d(in[0], attrs.window);
    case Op::Unfold:
      require_arity(op, in, 1);
      return unfold(in[0], attrs.patch);
    case Op::Fold:
      require_arity(op, in, 1);
      return fold(in[0], attrs.geometry);
    case Op::Add:
      require_arity(op, in, 2);
      return add(in[0], in[1]);
    case Op::Sub:
      require_arity(op, in, 2);
      return sub(in[0], in[1]);
    case Op::Mul:
      require_arity(op, in, 2);
      return mul(in[0], in[1]);
    case Op::Scale:
      require_arity(op, in, 1);
      return scale(in[0], attrs.factor);
    case Op::MatMul:
      require_arity(op, in, 2);
      return matmul(in[0], in[1]);
    case Op::Dot:
      require_arity(op, in, 2);
      return dot(in[0], in[1]);
    case Op::Relu:
      require_arity(op, in, 1);
      return relu(in[0]);
    case Op::Sigmoid:
      require_arity(op, in, 1);
      return sigmoid(in[0]);
    case Op::Softplus:
      require_arity(op, in, 1);
      return softplus(in[0]);
    case Op::L2NormRows:
      require_arity(op, in, 1);
      return l2norm_rows(in[0], attrs.eps);
    case Op::Sum:
      require_arity(op, in, 1);
      return sum(in[0]);
    case Op::Mean:
      require_arity(op, in, 1);
      return mean(in[0]);
    case Op::CrossEntropyLogits:
      require_arity(op, in, 1);
      return cross_entropy_logits(in[0], attrs.label);
    case Op::NeighborCosineSum:
      require_arity(op, in, 1);
      if (attrs.table == nullptr) throw std::invalid_argument("neighbor_cosine_sum needs a table");
      return neighbor_cosine_sum(in[0], *attrs.table);
    case Op::MulRows:
      require_arity(op, in, 2);
      return mul_rows(in[0], in[1]);
    case Op::SpatialMean:
      require_arity(op, in, 1);
      return spatial_mean(in[0]);
    case Op::Reshape:
      require_arity(op, in, 1);
      return reshape(in[0], attrs.shape);
    case Op::Leaf:
      break;
  }
  throw std::invalid_argument("op '" + std::string(op_name(op)) + "' cannot be recorded");
}

GradCheckReport grad_check(const ScalarGraph& f, std::vector<Tensor> params, double h, double tol) {
  GradCheckReport report;
  report.tolerance = tol;

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Tensor& p : params) vars.push_back(tape.leaf(p));
    const Var loss = f(tape, vars);
    tape.backward(loss);
    for (Var v : vars) analytic.push_back(v.grad());
  }

  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Tensor& p : params) vars.push_back(tape.constant(p));
    return f(tape, vars).value().item();
  };

  for (std::size_t k = 0; k < params.size(); ++k) {
    ParamCheck check;
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double saved = params[k][i];
      params[k][i] = saved + h;
      const double plus = evaluate();
      params[k][i] = saved - h;
      const double minus = evaluate();
      params[k][i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      if (i == 0 || err > check.max_rel_error) {
        check.max_rel_error = err;
        check.worst_index = i;
        check.analytic = a;
        check.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.params.push_back(check);
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace ersm::ad
