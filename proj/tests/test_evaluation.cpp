#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "ersm/binary_io.hpp"
#include "ersm/energy_mask.hpp"
#include "ersm/evaluation.hpp"
#include "oracles.hpp"

using namespace ersm;
using oracle::random_tensor;

namespace {

// 12x12 inputs, two pooled conv blocks: 3x3 token grid, feature stride 4.
ModelConfig small_config(Variant v = Variant::Full) {
  ModelConfig c;
  c.backbone.in_channels = 1;
  c.backbone.in_height = c.backbone.in_width = 12;
  c.backbone.layers = {ConvLayerSpec{4, 3, 1, 1, true, 2}, ConvLayerSpec{5, 3, 1, 1, true, 2}};
  c.variant = v;
  c.classes = 3;
  return c;
}

Dataset small_data(std::size_t n = 30, std::uint64_t seed = 2) {
  GeneratorConfig g;
  g.height = g.width = 12;
  g.object_size = 5;
  g.classes = 3;
  g.grating_period = 3.0;
  g.seed = seed;
  return generate(g, n);
}

ModelParams random_params(const ModelConfig& c, std::uint64_t seed) {
  ModelParams p = init_params(c, seed);
  std::uint64_t s = seed * 100;
  for (Tensor* t : p.tensors()) *t = random_tensor(t->shape(), ++s, -0.8, 0.8);
  return p;
}

// Zero conv kernels with positive biases: every feature cell is identical.
ModelParams constant_feature_params(const ModelConfig& c, std::uint64_t seed) {
  ModelParams p = random_params(c, seed);
  for (ConvParams& layer : p.backbone) {
    layer.weight = Tensor(layer.weight.shape());
    for (double& b : layer.bias.data()) b = std::abs(b) + 0.1;
  }
  return p;
}

bool is_permutation(const std::vector<std::size_t>& order, std::size_t n) {
  if (order.size() != n) return false;
  std::vector<bool> seen(n, false);
  for (std::size_t i : order) {
    if (i >= n || seen[i]) return false;
    seen[i] = true;
  }
  return true;
}

}  // namespace

TEST(Ranking, EqualScoresGiveIdentity) {
  const std::vector<std::size_t> order = energy_ranking(Tensor({9}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(order[i], i);

  const ModelConfig c = small_config();
  ModelParams p = init_params(c, 1);
  p.mask.w = Tensor(p.mask.w.shape());
  const auto model_order = energy_ranking(c, p, small_data(1).samples[0].image);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(model_order[i], i);
}

TEST(Ranking, DescendingWithStableTies) {
  const Tensor z({5}, {0.1, 0.7, 0.1, 0.9, 0.7});
  EXPECT_EQ(energy_ranking(z), (std::vector<std::size_t>{3, 1, 4, 0, 2}));
}

TEST(Ranking, AlignedTokenComesFirst) {
  // 3 channels on a 3x3 grid; token 5 points exactly along w.
  Tensor f({3, 3, 3});
  for (std::size_t t = 0; t < 9; ++t) {
    f[0 * 9 + t] = 0.2;
    f[1 * 9 + t] = 1.0;
    f[2 * 9 + t] = 0.5 + 0.1 * static_cast<double>(t);
  }
  f[0 * 9 + 5] = 2.0;
  f[1 * 9 + 5] = 0.0;
  f[2 * 9 + 5] = 0.0;
  MaskLayerParams mp;
  mp.w = Tensor({3}, {1.0, 0.0, 0.0});
  const Tokens t = tokenize(f, 1);
  const auto order = energy_ranking(unary_scores(t.normalized, mp));
  EXPECT_EQ(order[0], 5u);
}

TEST(Ranking, RandomInputsGivePermutations) {
  const ModelConfig c = small_config();
  const ModelParams p = random_params(c, 3);
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Tensor x = random_tensor({1, 12, 12}, s, -1, 1);
    ASSERT_TRUE(is_permutation(energy_ranking(c, p, x), 9)) << s;
  }
  for (std::uint64_t s = 0; s < 100; ++s)
    ASSERT_TRUE(is_permutation(energy_ranking(random_tensor({37}, s, -1, 1)), 37));
}

TEST(Curve, EndpointsAndShape) {
  const ModelConfig c = small_config();
  const ModelParams p = random_params(c, 4);
  const Dataset ds = small_data();
  const std::uint64_t seeds[] = {1, 2, 3};
  const RobustnessCurve e = deletion_curve(c, p, ds, DeletionPolicy::Energy, seeds);
  const RobustnessCurve r = deletion_curve(c, p, ds, DeletionPolicy::Random, seeds);
  ASSERT_EQ(e.points.size(), 9u);
  ASSERT_EQ(r.points.size(), 9u);
  for (std::size_t k = 0; k < 9; ++k) {
    EXPECT_EQ(e.points[k].k, k);
    EXPECT_EQ(e.points[k].stderr_, 0.0);
    EXPECT_GE(r.points[k].accuracy, 0.0);
    EXPECT_LE(r.points[k].accuracy, 1.0);
  }
  EXPECT_EQ(e.points[0].accuracy, r.points[0].accuracy);
  EXPECT_EQ(r.points[0].stderr_, 0.0);
  EXPECT_TRUE(e.seeds.empty());
  EXPECT_EQ(r.seeds.size(), 3u);

  // k = 0 is the ungated forward.
  std::size_t correct = 0;
  for (const Sample& s : ds.samples)
    correct += argmax(classify_with_deletion(c, p, backbone_features(c, p, s.image), {})) == s.label;
  EXPECT_EQ(e.points[0].accuracy, static_cast<double>(correct) / static_cast<double>(ds.size()));
}

TEST(Curve, ConstantFeatureMapIsInvariantUnderBothPolicies) {
  for (Variant v : {Variant::Full, Variant::Unary, Variant::Baseline}) {
    const ModelConfig c = small_config(v);
    const ModelParams p = constant_feature_params(c, 5);
    const Dataset ds = small_data(40, 6);
    const std::uint64_t seeds[] = {7, 8};
    for (DeletionPolicy policy : {DeletionPolicy::Energy, DeletionPolicy::Random}) {
      const RobustnessCurve curve = deletion_curve(c, p, ds, policy, seeds);
      for (const CurvePoint& pt : curve.points) EXPECT_EQ(pt.accuracy, curve.points[0].accuracy);
    }
  }
}

TEST(Curve, RandomPolicyDeterministicPerSeed) {
  const ModelConfig c = small_config();
  const ModelParams p = random_params(c, 9);
  const Dataset ds = small_data();
  const std::uint64_t seeds[] = {4, 5};
  const RobustnessCurve a = deletion_curve(c, p, ds, DeletionPolicy::Random, seeds);
  const RobustnessCurve b = deletion_curve(c, p, ds, DeletionPolicy::Random, seeds);
  const RobustnessCurve one[] = {a}, two[] = {b};
  EXPECT_EQ(curves_csv(one), curves_csv(two));
}

TEST(Curve, Errors) {
  const ModelConfig c = small_config();
  const ModelParams p = random_params(c, 9);
  EXPECT_THROW(deletion_curve(c, p, Dataset{3, 1, 12, 12, {}}, DeletionPolicy::Energy, {}),
               std::invalid_argument);
  EXPECT_THROW(deletion_curve(c, p, small_data(2), DeletionPolicy::Random, {}),
               std::invalid_argument);
  EXPECT_EQ(parse_policy("random"), DeletionPolicy::Random);
  EXPECT_STREQ(policy_name(parse_policy("energy")), "energy");
  EXPECT_THROW(parse_policy("greedy"), std::invalid_argument);
}

TEST(Compare, WindowMeansAndPointwise) {
  RobustnessCurve e, r;
  e.num_tokens = r.num_tokens = 6;
  const double ea[] = {1.0, 0.9, 0.8, 0.6, 0.4, 0.3};
  const double ra[] = {1.0, 0.8, 0.7, 0.7, 0.3, 0.2};
  for (std::size_t k = 0; k < 6; ++k) {
    e.points.push_back({k, ea[k], 0});
    r.points.push_back({k, ra[k], 0});
  }
  const CurveComparison cmp = compare_curves(e, r);
  EXPECT_NEAR(cmp.energy_mean, (0.9 + 0.8 + 0.6) / 3, 1e-15);
  EXPECT_NEAR(cmp.random_mean, (0.8 + 0.7 + 0.7) / 3, 1e-15);
  EXPECT_NEAR(cmp.gap, cmp.energy_mean - cmp.random_mean, 1e-15);
  EXPECT_NEAR(cmp.pointwise_fraction, 5.0 / 6.0, 1e-15);
  r.points.pop_back();
  EXPECT_THROW(compare_curves(e, r), std::invalid_argument);
}

TEST(Sparsity, NeutralInitIsHalf) {
  const ModelConfig c = small_config();
  const SparsityReport s = sparsity_report(c, init_params(c, 3), small_data());
  EXPECT_NEAR(s.mean, 0.5, 1e-3);
  EXPECT_EQ(s.per_image.size(), 30u);
  double total = 0.0;
  for (double h : s.hist) total += h;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_NEAR(s.hist[4] + s.hist[5], 1.0, 1e-12);
}

TEST(Sparsity, LargeBiasSuppressesEverything) {
  const ModelConfig c = small_config();
  ModelParams p = init_params(c, 3);
  p.mask.b = Tensor::scalar(40.0);
  const SparsityReport s = sparsity_report(c, p, small_data());
  EXPECT_LT(s.mean, 1e-15);
  EXPECT_EQ(s.hist[0], 1.0);
}

TEST(Sparsity, ExactMeanOverTokensAndBaseline) {
  const ModelConfig c = small_config(Variant::Unary);
  const ModelParams p = random_params(c, 12);
  const Dataset ds = small_data(10);
  double total = 0.0;
  for (const Sample& s : ds.samples) {
    const Prediction pred = predict(c, p, s.image, MaskMode::Infer);
    for (double m : pred.diagnostics->m.data()) total += m;
  }
  const SparsityReport s = sparsity_report(c, p, ds);
  EXPECT_NEAR(s.mean, total / 90.0, 1e-15);
  EXPECT_EQ(sparsity_report(c, p, ds).mean, s.mean);

  const ModelConfig b = small_config(Variant::Baseline);
  const SparsityReport sb = sparsity_report(b, init_params(b, 1), ds);
  EXPECT_EQ(sb.mean, 1.0);
  EXPECT_EQ(sb.hist[kMaskBins - 1], 1.0);
}

TEST(Alignment, TruthTokensUseQuarterThreshold) {
  const ModelConfig c = small_config();
  Sample s;
  s.truth_mask.assign(144, 0);
  // Token (0,0) covers pixels [0,4)x[0,4): 4 of 16 object pixels is exactly 25%.
  for (std::size_t x = 0; x < 4; ++x) s.truth_mask[x] = 1;
  // Token (1,1) gets 3 pixels, below threshold.
  for (std::size_t x = 4; x < 7; ++x) s.truth_mask[5 * 12 + x] = 1;
  const auto t = truth_tokens(s, c.feature_geometry(), c.feature_stride());
  EXPECT_TRUE(t[0]);
  for (std::size_t i = 1; i < 9; ++i) EXPECT_FALSE(t[i]) << i;
  s.truth_mask.pop_back();
  EXPECT_THROW(truth_tokens(s, c.feature_geometry(), c.feature_stride()), ShapeError);
}

TEST(Alignment, SetIou) {
  EXPECT_EQ(set_iou({true, false, true}, {true, true, false}), 1.0 / 3.0);
  EXPECT_EQ(set_iou({false, false}, {false, false}), 0.0);
  EXPECT_THROW(set_iou({true}, {true, false}), std::invalid_argument);
}

TEST(Alignment, FullKeepGivesObjectShare) {
  const ModelConfig c = small_config();
  const ModelParams p = random_params(c, 13);
  const Dataset ds = small_data(12);
  const AlignmentReport r = alignment_report(c, p, ds, 1.0, 10, 0);
  EXPECT_EQ(r.kept, 9u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto truth = truth_tokens(ds.samples[i], c.feature_geometry(), c.feature_stride());
    const double share = static_cast<double>(std::count(truth.begin(), truth.end(), true)) / 9.0;
    EXPECT_EQ(r.overlap[i], share);
    EXPECT_NEAR(r.random_overlap[i], share, 1e-15);
  }
}

TEST(Alignment, FullTruthGivesKeepFraction) {
  const ModelConfig c = small_config();
  const ModelParams p = random_params(c, 14);
  Dataset ds = small_data(8);
  for (Sample& s : ds.samples) s.truth_mask.assign(s.truth_mask.size(), 1);
  const AlignmentReport r = alignment_report(c, p, ds, 1.0 / 3.0, 20, 5);
  EXPECT_EQ(r.kept, 3u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_NEAR(r.overlap[i], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(r.random_overlap[i], 1.0 / 3.0, 1e-15);
  }
}

TEST(Alignment, OverlapsInUnitIntervalAndErrors) {
  const ModelConfig c = small_config();
  const ModelParams p = random_params(c, 15);
  const Dataset ds = small_data(25);
  for (double kf : {0.1, 0.3, 0.5, 0.9}) {
    const AlignmentReport r = alignment_report(c, p, ds, kf, 50, 1);
    EXPECT_EQ(r.kept, static_cast<std::size_t>(std::ceil(kf * 9 - 1e-9)));
    for (std::size_t i = 0; i < ds.size(); ++i) {
      EXPECT_GE(r.overlap[i], 0.0);
      EXPECT_LE(r.overlap[i], 1.0);
      EXPECT_GE(r.random_overlap[i], 0.0);
      EXPECT_LE(r.random_overlap[i], 1.0);
    }
  }
  EXPECT_THROW(alignment_report(c, p, ds, 0.0), std::invalid_argument);
  EXPECT_THROW(alignment_report(c, p, ds, 1.5), std::invalid_argument);
  EXPECT_THROW(alignment_report(c, p, ds, 0.3, 0), std::invalid_argument);
}

TEST(Csv, Formats) {
  RobustnessCurve e;
  e.points = {{0, 0.5, 0.0}, {1, 0.25, 0.0}};
  RobustnessCurve r;
  r.policy = DeletionPolicy::Random;
  r.points = {{0, 0.5, 0.125}};
  const RobustnessCurve both[] = {e, r};
  EXPECT_EQ(curves_csv(both), "policy,k,accuracy,stderr\nenergy,0,0.5,0\nenergy,1,0.25,0\nrandom,0,0.5,0.125\n");

  SparsityReport s;
  s.per_image = {0.5, 0.75};
  EXPECT_EQ(sparsity_csv(s), "image,mean_mask\n0,0.5\n1,0.75\n");

  AlignmentReport a;
  a.overlap = {0.25};
  a.random_overlap = {0.125};
  EXPECT_EQ(alignment_csv(a), "image,overlap,random_overlap\n0,0.25,0.125\n");
}

TEST(Export, WritesOnePgmPerImage) {
  const ModelConfig c = small_config();
  const ModelParams p = random_params(c, 16);
  const Dataset ds = small_data(5);
  const auto dir = oracle::temp_dir("export");
  const auto paths = export_masks(c, p, ds, 3, dir);
  ASSERT_EQ(paths.size(), 3u);
  const std::string header = "P5\n12 12\n255\n";
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(paths[i].filename(), "mask_" + std::to_string(i) + ".pgm");
    const auto bytes = read_file(paths[i]);
    ASSERT_EQ(bytes.size(), header.size() + 144);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + header.size()), header);
  }
  EXPECT_EQ(export_masks(c, p, ds, 50, dir).size(), 5u);
  const ModelConfig b = small_config(Variant::Baseline);
  EXPECT_THROW(export_masks(b, init_params(b, 0), ds, 1, dir), std::invalid_argument);
}
