#include "ersm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "ersm/binary_io.hpp"
#include "ersm/rng.hpp"

namespace ersm {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (!finite_nonneg(peak_lr) || !finite_nonneg(min_lr)) {
    throw std::invalid_argument("train: learning rates must be finite and >= 0");
  }
  if (min_lr > peak_lr) throw std::invalid_argument("train: min lr exceeds peak lr");
  if (!finite_nonneg(weight_decay)) throw std::invalid_argument("train: weight decay must be >= 0");
  if (!finite_nonneg(lambda_unary) || !finite_nonneg(lambda_pair)) {
    throw std::invalid_argument("train: lambdas must be finite and >= 0");
  }
  if (eval_interval < 1) throw std::invalid_argument("train: eval interval must be >= 1");
}

void adamw_step(std::span<const AdamWParam> params, AdamWState& state, double lr,
                double weight_decay) {
  if (state.m.empty()) {
    for (const AdamWParam& p : params) {
      state.m.emplace_back(p.value->shape());
      state.v.emplace_back(p.value->shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adamw: optimizer state holds " + std::to_string(state.m.size()) +
                     " tensors, got " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& shape = params[i].value->shape();
    if (params[i].grad->shape() != shape || state.m[i].shape() != shape ||
        state.v[i].shape() != shape) {
      throw ShapeError("adamw: gradient " + to_string(params[i].grad->shape()) +
                       " does not match parameter " + to_string(shape));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const AdamWParam& p = params[i];
    if (p.frozen) continue;
    auto x = p.value->data();
    auto g = p.grad->data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (p.decay) x[j] -= lr * weight_decay * x[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double peak, double min) {
  if (step > total_steps) {
    throw std::out_of_range("cosine_lr: step " + std::to_string(step) + " beyond total " +
                            std::to_string(total_steps));
  }
  if (total_steps == 0) return peak;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return min + 0.5 * (peak - min) * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

double cross_entropy(const Tensor& logits, std::size_t label) {
  if (label >= logits.size()) {
    throw std::out_of_range("label " + std::to_string(label) + " outside " +
                            std::to_string(logits.size()) + " classes");
  }
  double top = logits[0];
  for (double v : logits.data()) top = std::max(top, v);
  double s = 0.0;
  for (double v : logits.data()) s += std::exp(v - top);
  return top + std::log(s) - logits[label];
}

void require_compatible(const ModelConfig& model, const Dataset& ds, const char* which) {
  const Shape expected{model.backbone.in_channels, model.backbone.in_height,
                       model.backbone.in_width};
  if (ds.image_shape() != expected) {
    throw ShapeError(std::string(which) + " images are " + to_string(ds.image_shape()) +
                     ", model expects " + to_string(expected));
  }
  if (ds.classes != model.classes) {
    throw std::invalid_argument(std::string(which) + " has " + std::to_string(ds.classes) +
                                " classes, model has " + std::to_string(model.classes));
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

double total_loss(const Tensor& logits, std::size_t label,
                  const std::optional<EnergyDiagnostics>& diagnostics) {
  double loss = cross_entropy(logits, label);
  if (diagnostics) loss += reg_loss(diagnostics->m, diagnostics->energy);
  return loss;
}

LossVars total_loss(const ModelVars& out, std::size_t label) {
  LossVars l;
  l.ce = ad::cross_entropy_logits(out.logits, label);
  l.total = l.ce;
  if (out.mask) {
    l.reg = reg_loss(out.mask->m, out.mask->energy);
    l.total = ad::add(l.ce, *l.reg);
  }
  return l;
}

MaskSummary summarize(const ModelConfig& config, const ModelParams& params,
                      const Dataset& dataset) {
  MaskSummary s;
  if (dataset.empty()) {
    s.mean = s.accuracy = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  std::size_t correct = 0;
  std::size_t tokens = 0;
  double total = 0.0;
  for (const Sample& sample : dataset.samples) {
    const Prediction p = predict(config, params, sample.image, MaskMode::Infer);
    if (argmax(p.logits) == sample.label) ++correct;
    if (!p.diagnostics) continue;
    for (double m : p.diagnostics->m.data()) {
      total += m;
      const auto bin = std::min(kMaskBins - 1, static_cast<std::size_t>(m * kMaskBins));
      s.hist[bin] += 1.0;
      ++tokens;
    }
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  if (config.variant == Variant::Baseline) {
    s.mean = 1.0;
    s.hist[kMaskBins - 1] = 1.0;
  } else {
    s.mean = total / static_cast<double>(tokens);
    for (double& h : s.hist) h /= static_cast<double>(tokens);
  }
  return s;
}

ModelConfig with_lambdas(ModelConfig model, const TrainConfig& config) {
  model.mask.lambda_unary = config.lambda_unary;
  model.mask.lambda_pair = config.lambda_pair;
  return model;
}

TrainResult train(const ModelConfig& model_in, ModelParams params, const Dataset& train_set,
                  const Dataset& test_set, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  const ModelConfig model = with_lambdas(model_in, config);
  model.validate();
  if (train_set.empty()) throw std::invalid_argument("train: training set is empty");
  require_compatible(model, train_set, "training set");
  if (!test_set.empty()) require_compatible(model, test_set, "test set");

  params.frozen.backbone = params.frozen.backbone || config.frozen.backbone;
  params.frozen.mask = params.frozen.mask || config.frozen.mask;
  params.frozen.head = params.frozen.head || config.frozen.head;
  const std::vector<ParamEntry> layout = param_layout(model);
  std::vector<bool> frozen(layout.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    // The bypass never reads the mask parameters, so they are not optimized.
    frozen[i] = params.frozen.frozen(layout[i].group) ||
                (model.variant == Variant::Baseline && layout[i].group == ParamGroup::Mask);
  }

  const std::size_t n = train_set.size();
  const std::size_t batches = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * batches;
  AdamWState state;
  std::size_t step = 0;

  TrainResult result;
  auto evaluate = [&](EpochMetrics& row) {
    const MaskSummary s = summarize(model, params, test_set);
    row.test_acc = s.accuracy;
    row.mean_mask = s.mean;
    row.hist = s.hist;
    row.evaluated = true;
    if (result.metrics.empty() || (!std::isnan(s.accuracy) && s.accuracy > result.best_accuracy)) {
      result.best_accuracy = s.accuracy;
      result.best_epoch = row.epoch;
      result.best_params = params;
    }
  };
  auto check_loss = [](double v, std::size_t epoch) {
    if (!std::isfinite(v)) {
      throw NumericError("training diverged: non-finite loss in epoch " + std::to_string(epoch));
    }
  };

  {
    EpochMetrics row;
    std::size_t correct = 0;
    for (const Sample& sample : train_set.samples) {
      const Prediction p = predict(model, params, sample.image, MaskMode::Train);
      const double ce = cross_entropy(p.logits, sample.label);
      const double reg = p.diagnostics ? reg_loss(p.diagnostics->m, p.diagnostics->energy) : 0.0;
      check_loss(ce + reg, 0);
      row.lce += ce;
      row.lreg += reg;
      row.ltotal += ce + reg;
      if (argmax(p.logits) == sample.label) ++correct;
    }
    row.lce /= static_cast<double>(n);
    row.lreg /= static_cast<double>(n);
    row.ltotal /= static_cast<double>(n);
    row.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    evaluate(row);
    result.metrics.push_back(row);
    if (on_epoch) on_epoch(row);
  }

  std::vector<Tensor*> values = params.tensors();
  std::vector<Tensor> grads;
  for (const Tensor* t : values) grads.emplace_back(t->shape());
  std::vector<AdamWParam> slots(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    slots[i] = AdamWParam{values[i], &grads[i], layout[i].decay, frozen[i]};
  }

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng(config.seed, epoch);
    const std::vector<std::size_t> order = rng.permutation(n);
    EpochMetrics row;
    row.epoch = epoch;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      for (Tensor& g : grads) g.fill(0.0);
      for (std::size_t pos = start; pos < stop; ++pos) {
        const Sample& sample = train_set.samples[order[pos]];
        ad::Tape tape;
        std::vector<ad::Var> vars;
        vars.reserve(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
          vars.push_back(tape.leaf(*values[i], !frozen[i]));
        }
        const ModelVars out = forward(tape, model, vars, tape.constant(sample.image),
                                      MaskMode::Train);
        const LossVars loss = total_loss(out, sample.label);
        const double ce = loss.ce.value().item();
        const double reg = loss.reg ? loss.reg->value().item() : 0.0;
        check_loss(loss.total.value().item(), epoch);
        row.lce += ce;
        row.lreg += reg;
        row.ltotal += loss.total.value().item();
        if (argmax(out.logits.value()) == sample.label) ++correct;
        tape.backward(loss.total);
        for (std::size_t i = 0; i < values.size(); ++i) {
          if (!frozen[i]) add_into(grads[i], vars[i].grad());
        }
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (Tensor& g : grads) {
        for (double& v : g.data()) v *= inv;
      }
      adamw_step(slots, state, cosine_lr(step, total_steps, config.peak_lr, config.min_lr),
                 config.weight_decay);
      ++step;
    }
    row.lce /= static_cast<double>(n);
    row.lreg /= static_cast<double>(n);
    row.ltotal /= static_cast<double>(n);
    row.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    if (epoch % config.eval_interval == 0 || epoch == config.epochs) {
      evaluate(row);
    } else {
      row.test_acc = row.mean_mask = std::numeric_limits<double>::quiet_NaN();
      row.hist.fill(std::numeric_limits<double>::quiet_NaN());
    }
    result.metrics.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  result.final_params = std::move(params);
  return result;
}

std::string metrics_csv(std::span<const EpochMetrics> metrics) {
  std::string out = "epoch,lce,lreg,ltotal,train_acc,test_acc,mean_mask";
  for (std::size_t b = 0; b < kMaskBins; ++b) out += ",hist_" + std::to_string(b);
  out += '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.17g", v);
    out += buf;
  };
  for (const EpochMetrics& m : metrics) {
    out += std::to_string(m.epoch);
    num(m.lce);
    num(m.lreg);
    num(m.ltotal);
    num(m.train_acc);
    num(m.test_acc);
    num(m.mean_mask);
    for (double h : m.hist) num(h);
    out += '\n';
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> metrics) {
  write_file_atomic(path, metrics_csv(metrics));
}

std::optional<std::size_t> best_cell(std::span<const GridCell> cells) {
  double top = -1.0;
  for (const GridCell& c : cells) {
    if (c.ok) top = std::max(top, c.accuracy);
  }
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const GridCell& c = cells[i];
    if (!c.ok || c.accuracy < top - 1e-3) continue;
    if (!best || c.mean_mask < cells[*best].mean_mask) best = i;
  }
  return best;
}

GridResult grid_search(std::span<const double> lambda_unary, std::span<const double> lambda_pair,
                       const ModelConfig& model, const ModelParams& init,
                       const Dataset& train_set, const Dataset& test_set,
                       const TrainConfig& config) {
  if (lambda_unary.empty() || lambda_pair.empty()) {
    throw std::invalid_argument("grid search: empty lambda grid");
  }
  GridResult result;
  for (double lu : lambda_unary) {
    for (double lp : lambda_pair) {
      GridCell cell;
      cell.lambda_unary = lu;
      cell.lambda_pair = lp;
      try {
        TrainConfig run = config;
        run.lambda_unary = lu;
        run.lambda_pair = lp;
        const TrainResult r = train(model, init, train_set, test_set, run);
        cell.ok = true;
        cell.accuracy = r.best_accuracy;
        cell.best_epoch = r.best_epoch;
        cell.mean_mask = r.metrics[r.best_epoch].mean_mask;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      result.cells.push_back(cell);
    }
  }
  result.best = best_cell(result.cells);
  return result;
}

std::string grid_csv(const GridResult& result) {
  std::string out = "lambda_unary,lambda_pair,status,accuracy,mean_mask,best_epoch,error\n";
  char buf[160];
  for (const GridCell& c : result.cells) {
    std::string error = c.error;
    std::replace(error.begin(), error.end(), ',', ';');
    std::replace(error.begin(), error.end(), '\n', ' ');
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%s,%.17g,%.17g,%zu,", c.lambda_unary,
                  c.lambda_pair, c.ok ? "ok" : "failed", c.ok ? c.accuracy : 0.0,
                  c.ok ? c.mean_mask : 0.0, c.best_epoch);
    out += buf;
    out += error;
    out += '\n';
  }
  return out;
}

}  // namespace ersm
