#include "ersm/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "ersm/binary_io.hpp"
#include "ersm/rng.hpp"

namespace ersm {

namespace {

constexpr char kParamMagic[] = "ERSM";
constexpr std::uint32_t kParamVersion = 1;

std::size_t conv_out(std::size_t in, const ConvLayerSpec& l) {
  if (l.stride == 0 || l.kernel == 0 || l.kernel > in + 2 * l.pad) {
    throw ShapeError("conv layer with kernel " + std::to_string(l.kernel) +
                     " does not fit input extent " + std::to_string(in));
  }
  return (in + 2 * l.pad - l.kernel) / l.stride + 1;
}

}  // namespace

Shape BackboneConfig::feature_shape() const {
  if (in_channels == 0 || in_height == 0 || in_width == 0) {
    throw ShapeError("backbone input extents must be positive");
  }
  std::size_t c = in_channels, h = in_height, w = in_width;
  for (const ConvLayerSpec& l : layers) {
    if (l.out_channels == 0) throw ShapeError("conv layer needs at least one output channel");
    h = conv_out(h, l);
    w = conv_out(w, l);
    c = l.out_channels;
    if (l.pool == 0 || h % l.pool != 0 || w % l.pool != 0) {
      throw ShapeError("pool window " + std::to_string(l.pool) + " does not divide " +
                       std::to_string(h) + "x" + std::to_string(w));
    }
    h /= l.pool;
    w /= l.pool;
  }
  return {c, h, w};
}

BackboneConfig BackboneConfig::desk_scale() {
  BackboneConfig cfg;
  cfg.layers = {ConvLayerSpec{16}, ConvLayerSpec{32}, ConvLayerSpec{64}};
  return cfg;
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::Unary: return "unary";
    case Variant::Full: return "full";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  if (name == "baseline") return Variant::Baseline;
  if (name == "unary") return Variant::Unary;
  if (name == "full") return Variant::Full;
  throw std::invalid_argument("unknown variant '" + name + "' (expected baseline, unary, full)");
}

MaskConfig ModelConfig::effective_mask() const {
  MaskConfig m = mask;
  if (variant == Variant::Unary) m.lambda_pair = 0.0;
  return m;
}

TokenGeometry ModelConfig::feature_geometry() const {
  return TokenGeometry::of(backbone.feature_shape(), mask.patch);
}

std::size_t ModelConfig::feature_stride() const {
  return backbone.in_height / backbone.feature_shape()[1];
}

void ModelConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("model needs at least 2 classes");
  mask.validate();
  feature_geometry();
}

bool FrozenGroups::frozen(ParamGroup group) const {
  switch (group) {
    case ParamGroup::Backbone: return backbone;
    case ParamGroup::Mask: return mask;
    case ParamGroup::Head: return head;
  }
  return false;
}

std::vector<Tensor*> ModelParams::tensors() {
  std::vector<Tensor*> out;
  for (ConvParams& l : backbone) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  out.push_back(&mask.w);
  out.push_back(&mask.b);
  out.push_back(&head.weight);
  out.push_back(&head.bias);
  return out;
}

std::vector<const Tensor*> ModelParams::tensors() const {
  std::vector<const Tensor*> out;
  for (Tensor* t : const_cast<ModelParams*>(this)->tensors()) out.push_back(t);
  return out;
}

std::vector<ParamEntry> param_layout(const ModelConfig& config) {
  std::vector<ParamEntry> layout;
  std::size_t in = config.backbone.in_channels;
  for (std::size_t i = 0; i < config.backbone.layers.size(); ++i) {
    const ConvLayerSpec& l = config.backbone.layers[i];
    const std::string prefix = "backbone." + std::to_string(i);
    layout.push_back({prefix + ".weight", ParamGroup::Backbone, true,
                      {l.out_channels, in, l.kernel, l.kernel}});
    layout.push_back({prefix + ".bias", ParamGroup::Backbone, false, {l.out_channels}});
    in = l.out_channels;
  }
  const TokenGeometry g = config.feature_geometry();
  layout.push_back({"mask.w", ParamGroup::Mask, true, {g.token_dim()}});
  layout.push_back({"mask.b", ParamGroup::Mask, false, {1}});
  layout.push_back({"head.weight", ParamGroup::Head, true, {config.classes, g.channels}});
  layout.push_back({"head.bias", ParamGroup::Head, false, {config.classes}});
  return layout;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  auto uniform = [&rng](Shape shape, double bound) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
  };
  ModelParams p;
  std::size_t in = config.backbone.in_channels;
  for (const ConvLayerSpec& l : config.backbone.layers) {
    const double fan_in = static_cast<double>(in * l.kernel * l.kernel);
    p.backbone.push_back(ConvParams{uniform({l.out_channels, in, l.kernel, l.kernel},
                                            std::sqrt(6.0 / fan_in)),
                                    Tensor({l.out_channels})});
    in = l.out_channels;
  }
  const TokenGeometry g = config.feature_geometry();
  p.mask.config = config.mask;
  p.mask.w = uniform({g.token_dim()}, 1e-3);
  p.mask.b = Tensor::scalar(0.0);
  p.head.weight = uniform({config.classes, g.channels}, 1.0 / std::sqrt(static_cast<double>(g.channels)));
  p.head.bias = Tensor({config.classes});
  return p;
}

ModelVars forward(ad::Tape& tape, const ModelConfig& config, std::span<const ad::Var> params,
                  ad::Var input, MaskMode mode) {
  (void)tape;
  const std::size_t layers = config.backbone.layers.size();
  if (params.size() != 2 * layers + 4) {
    throw std::invalid_argument("expected " + std::to_string(2 * layers + 4) +
                                " parameter variables, got " + std::to_string(params.size()));
  }
  const Shape expected_in{config.backbone.in_channels, config.backbone.in_height,
                          config.backbone.in_width};
  if (input.value().shape() != expected_in) {
    throw ShapeError("model input " + to_string(input.value().shape()) + ", expected " +
                     to_string(expected_in));
  }
  ModelVars out;
  ad::Var x = input;
  for (std::size_t i = 0; i < layers; ++i) {
    const ConvLayerSpec& l = config.backbone.layers[i];
    x = ad::conv2d(x, params[2 * i], params[2 * i + 1], l.stride, l.pad);
    if (l.relu) x = ad::relu(x);
    if (l.pool > 1) x = ad::maxpool2d(x, l.pool);
  }
  out.features = x;
  const ad::Var w = params[2 * layers];
  const ad::Var b = params[2 * layers + 1];
  ad::Var stage = x;
  if (config.variant != Variant::Baseline) {
    out.mask = forward(x, w, b, config.effective_mask(), mode);
    stage = out.mask->masked;
  }
  out.pooled = ad::spatial_mean(stage);
  out.logits = ad::add(ad::matmul(params[2 * layers + 2], out.pooled), params[2 * layers + 3]);
  return out;
}

namespace {

std::vector<ad::Var> constant_params(ad::Tape& tape, const ModelParams& params) {
  std::vector<ad::Var> vars;
  for (const Tensor* t : params.tensors()) vars.push_back(tape.constant(*t));
  return vars;
}

Tensor head(const ModelParams& params, const Tensor& pooled) {
  return kernels::add(kernels::matmul(params.head.weight, pooled), params.head.bias);
}

}  // namespace

Prediction predict(const ModelConfig& config, const ModelParams& params, const Tensor& input,
                   MaskMode mode) {
  ad::Tape tape;
  const auto vars = constant_params(tape, params);
  const ModelVars out = forward(tape, config, vars, tape.constant(input), mode);
  Prediction p{out.logits.value(), std::nullopt};
  if (out.mask) p.diagnostics = out.mask->diagnostics();
  return p;
}

Tensor backbone_features(const ModelConfig& config, const ModelParams& params,
                         const Tensor& input) {
  Tensor x = input;
  for (std::size_t i = 0; i < config.backbone.layers.size(); ++i) {
    const ConvLayerSpec& l = config.backbone.layers[i];
    x = kernels::conv2d(x, params.backbone[i].weight, params.backbone[i].bias, l.stride, l.pad);
    if (l.relu) x = kernels::relu(x);
    if (l.pool > 1) x = kernels::maxpool2d(x, l.pool).output;
  }
  return x;
}

Tensor classify_with_deletion(const ModelConfig& config, const ModelParams& params,
                              const Tensor& features, std::span<const std::size_t> delete_set) {
  const TokenGeometry g = TokenGeometry::of(features.shape(), config.mask.patch);
  const std::size_t n = g.num_tokens();
  std::vector<bool> removed(n, false);
  for (std::size_t idx : delete_set) {
    if (idx >= n) {
      throw std::out_of_range("token " + std::to_string(idx) + " outside grid of " +
                              std::to_string(n));
    }
    removed[idx] = true;
  }
  const auto k = static_cast<std::size_t>(std::count(removed.begin(), removed.end(), true));
  if (k >= n) throw std::invalid_argument("cannot delete all " + std::to_string(n) + " tokens");

  Tensor pooled;
  if (k == 0) {
    pooled = kernels::spatial_mean(features);
  } else {
    Tensor tokens = kernels::unfold(features, g.patch);
    for (std::size_t i = 0; i < n; ++i) {
      if (!removed[i]) continue;
      std::fill_n(tokens.data().data() + i * g.token_dim(), g.token_dim(), 0.0);
    }
    pooled = kernels::scale(kernels::spatial_mean(kernels::fold(tokens, g)),
                            static_cast<double>(n) / static_cast<double>(n - k));
  }
  return head(params, pooled);
}

Tensor predict_with_deletion(const ModelConfig& config, const ModelParams& params,
                             const Tensor& input, std::span<const std::size_t> delete_set) {
  return classify_with_deletion(config, params, backbone_features(config, params, input),
                                delete_set);
}

std::size_t argmax(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

std::vector<std::uint8_t> encode_params(const ModelConfig& config, const ModelParams& params) {
  const auto layout = param_layout(config);
  const auto tensors = params.tensors();
  if (layout.size() != tensors.size()) throw ShapeError("parameter set does not match config");
  ByteWriter out;
  out.raw(std::string_view(kParamMagic, 4));
  out.u32(kParamVersion);
  out.u32(static_cast<std::uint32_t>(layout.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const Tensor& t = *tensors[i];
    if (t.shape() != layout[i].shape) {
      throw ShapeError(layout[i].name + " has shape " + to_string(t.shape()) + ", config expects " +
                       to_string(layout[i].shape));
    }
    out.u16(static_cast<std::uint16_t>(layout[i].name.size()));
    out.raw(layout[i].name);
    out.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) out.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) out.f64(v);
  }
  return out.bytes();
}

ModelParams decode_params(std::span<const std::uint8_t> bytes, const ModelConfig& config,
                          const std::string& context) {
  ByteReader in(bytes, context);
  if (in.raw(4) != std::string_view(kParamMagic, 4)) throw FormatError(context + ": bad magic");
  const std::uint32_t version = in.u32();
  if (version != kParamVersion) {
    throw FormatError(context + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = in.u32();

  std::map<std::string, Tensor> entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint16_t name_len = in.u16();
    std::string name = in.raw(name_len);
    const std::uint8_t rank = in.u8();
    if (rank == 0) throw FormatError(context + ": entry '" + name + "' has rank 0");
    Shape shape;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const std::uint32_t d = in.u32();
      if (d == 0) throw FormatError(context + ": entry '" + name + "' has a zero extent");
      shape.push_back(d);
    }
    const std::size_t n = numel(shape);
    in.require(n * 8, "tensor payload");
    std::vector<double> data(n);
    for (double& v : data) v = in.f64();
    entries.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  in.expect_end();

  ModelParams params;
  const auto layout = param_layout(config);
  if (entries.size() != layout.size()) {
    throw FormatError(context + ": " + std::to_string(entries.size()) + " entries, config expects " +
                      std::to_string(layout.size()));
  }
  params.backbone.resize(config.backbone.layers.size());
  params.mask.config = config.mask;
  auto slots = params.tensors();
  for (std::size_t i = 0; i < layout.size(); ++i) {
    auto it = entries.find(layout[i].name);
    if (it == entries.end()) throw FormatError(context + ": missing entry '" + layout[i].name + "'");
    if (it->second.shape() != layout[i].shape) {
      throw FormatError(context + ": entry '" + layout[i].name + "' has shape " +
                        to_string(it->second.shape()) + ", config expects " +
                        to_string(layout[i].shape));
    }
    *slots[i] = std::move(it->second);
  }
  return params;
}

void save_params(const std::filesystem::path& path, const ModelConfig& config,
                 const ModelParams& params) {
  write_file_atomic(path, encode_params(config, params));
}

ModelParams load_params(const std::filesystem::path& path, const ModelConfig& config) {
  return decode_params(read_file(path), config, path.string());
}

}  // namespace ersm
