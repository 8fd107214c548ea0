#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ersm/autodiff.hpp"
#include "ersm/energy_mask.hpp"
#include "ersm/tensor.hpp"

namespace ersm {

struct ConvLayerSpec {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  bool relu = true;
  /// Max-pool window after the activation; 1 disables pooling.
  std::size_t pool = 2;
};

struct BackboneConfig {
  std::size_t in_channels = 1;
  std::size_t in_height = 32;
  std::size_t in_width = 32;
  std::vector<ConvLayerSpec> layers;

  /// Shape of the final feature map. Throws ShapeError if a layer does not fit.
  Shape feature_shape() const;

  /// Three 3x3 conv blocks with ReLU and 2x2 pooling over 1x32x32 inputs.
  static BackboneConfig desk_scale();
};

enum class Variant {
  Baseline,  ///< mask layer bypassed
  Unary,     ///< unary energy only
  Full,      ///< unary + pairwise energy
};

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct ModelConfig {
  BackboneConfig backbone = BackboneConfig::desk_scale();
  MaskConfig mask;
  Variant variant = Variant::Full;
  std::size_t classes = 4;

  /// Mask settings actually used: the Unary variant forces lambda_pair = 0.
  MaskConfig effective_mask() const;
  TokenGeometry feature_geometry() const;
  /// Input pixels spanned by one feature-map cell along each axis.
  std::size_t feature_stride() const;
  void validate() const;
};

enum class ParamGroup { Backbone, Mask, Head };

struct FrozenGroups {
  bool backbone = false;
  bool mask = false;
  bool head = false;

  bool frozen(ParamGroup group) const;
};

struct ConvParams {
  Tensor weight;
  Tensor bias;
};

struct HeadParams {
  Tensor weight;  ///< [K, C]
  Tensor bias;    ///< [K]
};

struct ModelParams {
  std::vector<ConvParams> backbone;
  MaskLayerParams mask;
  HeadParams head;
  FrozenGroups frozen;

  /// Parameter tensors in canonical order (see param_layout()).
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
};

struct ParamEntry {
  std::string name;
  ParamGroup group;
  /// Eligible for decoupled weight decay (biases are exempt).
  bool decay;
  Shape shape;
};

/// Names, groups and shapes of every parameter, in canonical order:
/// backbone.<i>.weight/bias, mask.w, mask.b, head.weight, head.bias.
std::vector<ParamEntry> param_layout(const ModelConfig& config);

/// He-uniform conv weights, zero biases, mask w ~ U(-1e-3, 1e-3), b = 0.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

struct ModelVars {
  ad::Var features;
  ad::Var pooled;
  ad::Var logits;
  std::optional<MaskVars> mask;
};

/// Tape forward. `params` are tape variables in canonical order.
ModelVars forward(ad::Tape& tape, const ModelConfig& config, std::span<const ad::Var> params,
                  ad::Var input, MaskMode mode);

struct Prediction {
  Tensor logits;
  /// Absent for the Baseline variant.
  std::optional<EnergyDiagnostics> diagnostics;
};

Prediction predict(const ModelConfig& config, const ModelParams& params, const Tensor& input,
                   MaskMode mode = MaskMode::Infer);

/// Backbone feature map for one input.
Tensor backbone_features(const ModelConfig& config, const ModelParams& params,
                         const Tensor& input);

/// Head over an ungated feature map with the given tokens hard-zeroed and the
/// pooled vector rescaled by N / (N - k).
Tensor classify_with_deletion(const ModelConfig& config, const ModelParams& params,
                              const Tensor& features, std::span<const std::size_t> delete_set);

Tensor predict_with_deletion(const ModelConfig& config, const ModelParams& params,
                             const Tensor& input, std::span<const std::size_t> delete_set);

std::size_t argmax(const Tensor& logits);

std::vector<std::uint8_t> encode_params(const ModelConfig& config, const ModelParams& params);
ModelParams decode_params(std::span<const std::uint8_t> bytes, const ModelConfig& config,
                          const std::string& context = "checkpoint");

void save_params(const std::filesystem::path& path, const ModelConfig& config,
                 const ModelParams& params);
/// Throws FormatError on bad magic/version/truncation or when an entry's name
/// or shape disagrees with `config`.
ModelParams load_params(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace ersm
