#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ersm/autodiff.hpp"
#include "ersm/data.hpp"
#include "ersm/energy_mask.hpp"
#include "ersm/model.hpp"

namespace ersm {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double peak_lr = 3e-3;
  double min_lr = 1e-5;
  double weight_decay = 1e-4;
  /// Override the model's mask energy weights for this run.
  double lambda_unary = 1e-3;
  double lambda_pair = 1e-3;
  std::uint64_t seed = 0;
  FrozenGroups frozen;
  /// Evaluate on the test split every this many epochs (and always on the last).
  std::size_t eval_interval = 1;

  void validate() const;
};

struct AdamWState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

struct AdamWParam {
  Tensor* value = nullptr;
  const Tensor* grad = nullptr;
  bool decay = true;
  bool frozen = false;
};

/// One decoupled-weight-decay Adam update (decay applied first, then the
/// bias-corrected moment step). Moments are sized on the first call; frozen
/// entries are left bitwise untouched. Throws ShapeError when a gradient or
/// stored moment disagrees with its parameter.
void adamw_step(std::span<const AdamWParam> params, AdamWState& state, double lr,
                double weight_decay);

/// min + (peak - min) * (1 + cos(pi * step / total)) / 2.
double cosine_lr(std::size_t step, std::size_t total_steps, double peak, double min);

/// Cross-entropy plus mean(m * E) when diagnostics are present.
double total_loss(const Tensor& logits, std::size_t label,
                  const std::optional<EnergyDiagnostics>& diagnostics);

struct LossVars {
  ad::Var ce;
  std::optional<ad::Var> reg;
  ad::Var total;
};
LossVars total_loss(const ModelVars& out, std::size_t label);

constexpr std::size_t kMaskBins = 10;

struct EpochMetrics {
  std::size_t epoch = 0;
  double lce = 0.0;
  double lreg = 0.0;
  double ltotal = 0.0;
  double train_acc = 0.0;
  /// NaN on epochs that skip evaluation.
  double test_acc = 0.0;
  double mean_mask = 0.0;
  std::array<double, kMaskBins> hist{};
  bool evaluated = false;
};

/// Mean keep probability and normalized 10-bin histogram over every token of
/// every image (Infer mode). The bypass variant keeps everything: E[m] = 1.
struct MaskSummary {
  double mean = 0.0;
  std::array<double, kMaskBins> hist{};
  double accuracy = 0.0;
};
MaskSummary summarize(const ModelConfig& config, const ModelParams& params,
                      const Dataset& dataset);

struct TrainResult {
  ModelParams final_params;
  ModelParams best_params;
  std::size_t best_epoch = 0;
  double best_accuracy = 0.0;
  std::vector<EpochMetrics> metrics;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Mini-batch AdamW on L_CE + L_reg. Row 0 of the metrics is the untrained
/// model; later rows average losses and accuracy over that epoch's training
/// steps. The returned best parameters maximize test accuracy over evaluated
/// epochs (earliest wins ties). Throws NumericError if the loss diverges.
TrainResult train(const ModelConfig& model, ModelParams params, const Dataset& train_set,
                  const Dataset& test_set, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Model config with the run's energy weights applied.
ModelConfig with_lambdas(ModelConfig model, const TrainConfig& config);

std::string metrics_csv(std::span<const EpochMetrics> metrics);
void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> metrics);

struct GridCell {
  double lambda_unary = 0.0;
  double lambda_pair = 0.0;
  bool ok = false;
  std::string error;
  double accuracy = 0.0;
  double mean_mask = 0.0;
  std::size_t best_epoch = 0;
};

struct GridResult {
  std::vector<GridCell> cells;  ///< row-major: lambda_unary outer, lambda_pair inner
  std::optional<std::size_t> best;
};

/// Index of the most accurate cell; cells within 0.001 of the top accuracy
/// compete on lower E[m], then on order.
std::optional<std::size_t> best_cell(std::span<const GridCell> cells);

GridResult grid_search(std::span<const double> lambda_unary, std::span<const double> lambda_pair,
                       const ModelConfig& model, const ModelParams& init,
                       const Dataset& train_set, const Dataset& test_set,
                       const TrainConfig& config);

std::string grid_csv(const GridResult& result);

}  // namespace ersm
