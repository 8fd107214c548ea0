// Acceptance suite: one PASS/FAIL line per criterion on stdout, progress and
// per-seed details on stderr. Exit status is nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "../oracles.hpp"
#include "ersm/autodiff.hpp"
#include "ersm/cli.hpp"
#include "ersm/energy_mask.hpp"
#include "ersm/evaluation.hpp"
#include "ersm/training.hpp"

using namespace ersm;
using oracle::random_tensor;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void fail(const std::string& why) {
    if (pass) detail = why;
    pass = false;
  }
};

int failures = 0;
int criteria = 0;

void report(const std::string& name, const std::function<Verdict()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = check();
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail = std::string("exception: ") + e.what();
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ++criteria;
  if (!v.pass) ++failures;
  std::printf("%s %s (%.1fs)%s%s\n", v.pass ? "PASS" : "FAIL", name.c_str(), secs,
              v.detail.empty() ? "" : ": ", v.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// ---------------------------------------------------------------- gradients

ModelConfig toy_config(Variant v, std::size_t side) {
  ModelConfig c;
  c.backbone.in_channels = 2;
  c.backbone.in_height = c.backbone.in_width = side;
  c.backbone.layers = {ConvLayerSpec{3, 3, 1, 1, true, 2}};
  c.variant = v;
  c.classes = 3;
  c.mask.lambda_unary = 0.5;
  c.mask.lambda_pair = 0.3;
  return c;
}

Verdict gradient_fidelity() {
  Verdict v;
  std::size_t instances = 0;
  double worst = 0.0;
  for (Variant variant : {Variant::Unary, Variant::Full}) {
    for (std::size_t side : {6u, 8u}) {  // 3x3 and 4x4 token grids
      for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const ModelConfig cfg = toy_config(variant, side);
        // Re-seed until every ReLU input and pooling comparison is clear of a kink.
        ModelParams p;
        Tensor x;
        std::uint64_t s = seed * 1000;
        for (;; ++s) {
          p = init_params(cfg, s);
          std::uint64_t k = s * 10;
          for (Tensor* t : p.tensors()) *t = random_tensor(t->shape(), ++k, -0.8, 0.8);
          x = random_tensor({2, side, side}, s + 7, -1, 1);
          const oracle::Forward f = oracle::model_forward(cfg, p, x, true);
          if (f.relu_margin > 1e-3 && f.pool_margin > 1e-3) break;
        }
        const std::size_t label = seed % 3;
        const ad::ScalarGraph graph = [&](ad::Tape& tape, std::span<const ad::Var> vars) {
          const ad::Var input = tape.constant(x);
          return total_loss(forward(tape, cfg, vars, input, MaskMode::Train), label).total;
        };
        std::vector<Tensor> values;
        for (const Tensor* t : std::as_const(p).tensors()) values.push_back(*t);
        const ad::GradCheckReport r = ad::grad_check(graph, values, 1e-5, 1e-4);
        worst = std::max(worst, r.max_rel_error);
        ++instances;
        if (!r.passed) {
          v.fail(std::string(variant_name(variant)) + " N=" + std::to_string((side / 2) * (side / 2)) +
                 " seed " + std::to_string(seed) + fmt(" rel err %.3g", r.max_rel_error));
        }
      }
    }
  }
  if (instances < 20) v.fail("only " + std::to_string(instances) + " instances");
  if (v.pass) v.detail = std::to_string(instances) + " instances" + fmt(", max rel err %.3g", worst);
  return v;
}

// ------------------------------------------------------- branch equivalence

ModelConfig small_model(Variant v) {
  ModelConfig c;
  c.backbone.in_channels = 1;
  c.backbone.in_height = c.backbone.in_width = 12;
  c.backbone.layers = {ConvLayerSpec{6, 3, 1, 1, true, 2}, ConvLayerSpec{8, 3, 1, 1, true, 1}};
  c.variant = v;
  c.classes = 3;
  return c;
}

Dataset small_dataset(std::size_t n, std::uint64_t seed) {
  GeneratorConfig g;
  g.height = g.width = 12;
  g.object_size = 5;
  g.classes = 3;
  g.grating_period = 3.0;
  g.seed = seed;
  return generate(g, n);
}

bool same_bits(const Tensor& a, const Tensor& b) { return a == b; }

Verdict branch_equivalence() {
  Verdict v;
  ModelConfig full = small_model(Variant::Full);
  full.mask.lambda_pair = 0.0;
  const ModelConfig unary = small_model(Variant::Unary);
  for (std::uint64_t s = 0; s < 50; ++s) {
    ModelParams p = init_params(full, s);
    std::uint64_t k = s * 10;
    for (Tensor* t : p.tensors()) *t = random_tensor(t->shape(), ++k, -0.8, 0.8);
    const Tensor x = random_tensor({1, 12, 12}, s + 500, -1, 1);
    std::vector<Tensor> outs[2];
    for (int side = 0; side < 2; ++side) {
      ad::Tape tape;
      std::vector<ad::Var> vars;
      for (const Tensor* t : std::as_const(p).tensors()) vars.push_back(tape.leaf(*t));
      const ModelVars mv = forward(tape, side == 0 ? full : unary, vars, tape.constant(x),
                                   MaskMode::Train);
      for (ad::Var var : {mv.mask->masked, mv.mask->z, mv.mask->m, mv.mask->e_unary_plus,
                          mv.mask->energy, mv.logits})
        outs[side].push_back(tape.value(var));
    }
    for (std::size_t i = 0; i < outs[0].size(); ++i) {
      if (!same_bits(outs[0][i], outs[1][i])) v.fail("forward output " + std::to_string(i) +
                                                     " differs on input " + std::to_string(s));
    }
  }

  const Dataset ds = small_dataset(240, 11);
  const auto [train_set, test_set] = split(ds, 0.8, 11);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 16;
  tc.peak_lr = 1e-2;
  tc.seed = 11;
  TrainConfig tc_full = tc;
  tc_full.lambda_pair = 0.0;
  const TrainResult a = train(full, init_params(full, 11), train_set, test_set, tc_full);
  const TrainResult b = train(unary, init_params(unary, 11), train_set, test_set, tc);
  if (metrics_csv(a.metrics) != metrics_csv(b.metrics)) v.fail("3-epoch metrics differ");
  if (encode_params(full, a.final_params) != encode_params(unary, b.final_params))
    v.fail("3-epoch final parameters differ");
  if (v.pass) v.detail = "50 forward inputs bitwise, 3-epoch trajectory identical";
  return v;
}

// ------------------------------------------------------ structural identity

Verdict structural_identities() {
  Verdict v;
  const std::pair<std::size_t, Shape> cases[] = {
      {1, {3, 5, 7}}, {2, {4, 8, 6}}, {7, {2, 14, 21}}, {7, {1, 7, 7}}};
  for (const auto& [d, shape] : cases) {
    const Tensor x = random_tensor(shape, d * 31 + shape[1], -3, 3);
    if (!(kernels::fold(kernels::unfold(x, d), TokenGeometry::of(shape, d)) == x))
      v.fail("fold(unfold) not identity for d=" + std::to_string(d));
  }

  for (std::uint64_t s = 0; s < 1000; ++s) {
    const std::size_t c = 1 + s % 5, h = 2 + s % 4, w = 2 + (s / 4) % 4;
    MaskLayerParams mp;
    mp.w = random_tensor({c}, s * 3 + 1, -3, 3);
    mp.b = random_tensor({1}, s * 3 + 2, -3, 3);
    mp.config.lambda_unary = 1e-3 * static_cast<double>(1 + s % 7);
    mp.config.lambda_pair = 1e-3 * static_cast<double>(s % 3);
    const Tensor x = random_tensor({c, h, w}, s * 3 + 3, -2, 2);
    const MaskOutput out = forward(x, mp, s % 2 ? MaskMode::Train : MaskMode::Infer);
    const EnergyDiagnostics& d = out.diagnostics;
    for (std::size_t i = 0; i < d.m.size(); ++i) {
      if (!(d.m[i] > 0.0 && d.m[i] < 1.0)) v.fail(fmt("m=%.17g outside (0,1)", d.m[i]));
      if (!(d.energy[i] >= 0.0 && d.e_unary_plus[i] >= 0.0 && d.e_pair_plus[i] >= 0.0))
        v.fail(fmt("negative energy %.17g", d.energy[i]));
    }
    if (!(reg_loss(d.m, d.energy) >= 0.0)) v.fail("negative L_reg");
  }

  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor x = random_tensor({4, 6, 6}, s + 9000, -5, 5);
    MaskLayerParams mp;
    mp.w = Tensor({4 * 4});
    mp.config.patch = 2;
    const MaskOutput out = forward(x, mp, MaskMode::Train);
    Tensor half = x;
    for (double& e : half.data()) e *= 0.5;
    if (!(out.masked == half)) v.fail("w=0,b=0 does not give 0.5*X exactly");
  }
  if (v.pass) v.detail = "fold/unfold d in {1,2,7}; 1000 random inputs; half-gate exact";
  return v;
}

// --------------------------------------------------------- pairwise energy

Verdict pairwise_correctness() {
  Verdict v;
  Tensor same({9, 4});
  for (double& e : same.data()) e = 0.5;
  const Tensor pair = neighbor_cosine_sum(same, NeighborTable::moore(3, 3));
  const double want[9] = {3, 5, 3, 5, 8, 5, 3, 5, 3};
  for (std::size_t i = 0; i < 9; ++i)
    if (pair[i] != want[i]) v.fail(fmt("token %g: got %.17g", double(i), pair[i]));

  double worst = 0.0;
  const std::pair<std::size_t, std::size_t> grids[] = {{1, 1}, {1, 6}, {5, 1}, {3, 3},
                                                       {4, 7}, {8, 8}, {2, 9}};
  std::uint64_t s = 0;
  for (const auto& [gh, gw] : grids) {
    for (int rep = 0; rep < 5; ++rep, ++s) {
      const Tensor phat = oracle::normalize_rows(random_tensor({gh * gw, 6}, 700 + s, -1, 1));
      const Tensor got = neighbor_cosine_sum(phat, NeighborTable::moore(gh, gw));
      const std::vector<double> ref = oracle::neighbor_sum(phat, gh, gw);
      worst = std::max(worst, oracle::max_abs_diff(got.data(), ref));
    }
  }
  if (worst > 1e-12) v.fail(fmt("oracle mismatch %.3g", worst));
  if (v.pass) v.detail = fmt("{3,5,8} exact; 35 random grids, max diff %.3g", worst);
  return v;
}

// -------------------------------------------------------- deletion rescale

Verdict deletion_rescaling() {
  Verdict v;
  ModelConfig cfg;  // desk scale
  GeneratorConfig g;
  g.seed = 21;
  const Dataset ds = generate(g, 200);
  ModelParams p = init_params(cfg, 21);
  std::uint64_t k = 2100;
  for (Tensor* t : p.tensors()) *t = random_tensor(t->shape(), ++k, -0.5, 0.5);
  for (ConvParams& layer : p.backbone) {
    layer.weight = Tensor(layer.weight.shape());
    for (double& b : layer.bias.data()) b = std::abs(b) + 0.05;
  }
  const std::uint64_t seeds[] = {0, 1, 2, 3, 4};
  std::size_t n = 0;
  for (DeletionPolicy policy : {DeletionPolicy::Energy, DeletionPolicy::Random}) {
    const RobustnessCurve c = deletion_curve(cfg, p, ds, policy, seeds);
    n = c.points.size();
    for (const CurvePoint& pt : c.points) {
      if (pt.accuracy != c.points[0].accuracy)
        v.fail(std::string(policy_name(policy)) + " k=" + std::to_string(pt.k) +
               fmt(" accuracy %.6g vs %.6g", pt.accuracy, c.points[0].accuracy));
    }
  }
  if (v.pass) v.detail = "k = 0.." + std::to_string(n - 1) + " invariant under energy and random";
  return v;
}

// ------------------------------------------------------------ trained runs

struct SeedRun {
  std::uint64_t seed = 0;
  ModelConfig model;
  Dataset test_set;
  TrainResult full;
  TrainResult baseline;
};

SeedRun train_seed(std::uint64_t seed) {
  RunConfig rc;
  rc.seed = seed;
  GeneratorConfig g = rc.generator;
  g.seed = seed;
  const Dataset ds = generate(g, rc.samples);
  auto [train_set, test_set] = split(ds, rc.train_fraction, seed);
  TrainConfig tc = rc.train;
  tc.seed = seed;

  SeedRun run;
  run.seed = seed;
  run.model = rc.model_for(train_set);
  run.model.variant = Variant::Full;
  const auto progress = [seed](const char* tag) {
    return [seed, tag](const EpochMetrics& m) {
      std::fprintf(stderr, "  seed %llu %s epoch %zu lce=%.4f test_acc=%.4f E[m]=%.4f\n",
                   static_cast<unsigned long long>(seed), tag, m.epoch, m.lce, m.test_acc,
                   m.mean_mask);
    };
  };
  run.full = train(run.model, init_params(run.model, seed), train_set, test_set, tc,
                   progress("full"));
  ModelConfig base = run.model;
  base.variant = Variant::Baseline;
  run.baseline = train(base, init_params(base, seed), train_set, test_set, tc,
                       progress("baseline"));
  run.test_set = std::move(test_set);
  return run;
}

Verdict emergent_sparsity(const std::vector<SeedRun>& runs) {
  Verdict v;
  std::string detail;
  for (const SeedRun& r : runs) {
    const double first = r.full.metrics.front().mean_mask;
    const double last = r.full.metrics.back().mean_mask;
    const double acc = r.full.metrics.back().test_acc;
    const double base = r.baseline.metrics.back().test_acc;
    detail += fmt("seed %g: E[m] %.4f -> %.4f, ", double(r.seed), first, last) +
              fmt("acc %.4f vs baseline %.4f; ", acc, base);
    const std::string s = "seed " + std::to_string(r.seed);
    if (!(last > 0.05 && last < 0.95)) v.fail(s + fmt(" final E[m] %.4f outside (0.05, 0.95)", last));
    if (!(last < first)) v.fail(s + fmt(" final E[m] %.4f not below epoch 0 %.4f", last, first));
    if (!(acc >= 0.9 * base)) v.fail(s + fmt(" accuracy %.4f below 0.9 x baseline %.4f", acc, base));
  }
  std::fprintf(stderr, "  %s\n", detail.c_str());
  if (v.pass) v.detail = detail.substr(0, detail.size() - 2);
  return v;
}

Verdict energy_dominance(const std::vector<SeedRun>& runs) {
  Verdict v;
  std::string detail;
  const std::uint64_t seeds[] = {0, 1, 2, 3, 4};
  for (const SeedRun& r : runs) {
    const RobustnessCurve e =
        deletion_curve(r.model, r.full.final_params, r.test_set, DeletionPolicy::Energy, seeds);
    const RobustnessCurve rnd =
        deletion_curve(r.model, r.full.final_params, r.test_set, DeletionPolicy::Random, seeds);
    const CurveComparison c = compare_curves(e, rnd);
    detail += fmt("seed %g: gap %.4f pointwise %.3f; ", double(r.seed), c.gap, c.pointwise_fraction);
    const std::string s = "seed " + std::to_string(r.seed);
    if (!(c.gap >= 0.02)) v.fail(s + fmt(" gap %.4f < 0.02", c.gap));
    if (!(c.pointwise_fraction >= 0.8)) v.fail(s + fmt(" pointwise %.3f < 0.8", c.pointwise_fraction));
  }
  std::fprintf(stderr, "  %s\n", detail.c_str());
  if (v.pass) v.detail = detail.substr(0, detail.size() - 2);
  return v;
}

Verdict alignment(const std::vector<SeedRun>& runs) {
  Verdict v;
  std::string detail;
  for (const SeedRun& r : runs) {
    const AlignmentReport a =
        alignment_report(r.model, r.full.final_params, r.test_set, 0.3, 100, r.seed);
    detail += fmt("seed %g: %.4f vs random %.4f; ", double(r.seed), a.mean, a.random_mean);
    if (!(a.mean > a.random_mean))
      v.fail("seed " + std::to_string(r.seed) + fmt(" overlap %.4f <= random %.4f", a.mean, a.random_mean));
  }
  std::fprintf(stderr, "  %s\n", detail.c_str());
  if (v.pass) v.detail = detail.substr(0, detail.size() - 2);
  return v;
}

// -------------------------------------------------------------- determinism

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Verdict determinism() {
  Verdict v;
  const auto dir = oracle::temp_dir("acceptance_determinism");
  std::ostringstream out, err;
  const std::string data = (dir / "d.ersd").string();
  if (run_cli({"generate", "--out", data, "--samples", "400", "--seed", "5"}, out, err) != 0) {
    v.fail("generate failed: " + err.str());
    return v;
  }
  for (const char* run : {"a", "b"}) {
    if (run_cli({"train", "--data", data, "--out", (dir / run).string(), "--epochs", "2",
                 "--seed", "5"},
                out, err) != 0) {
      v.fail("train failed: " + err.str());
      return v;
    }
  }
  for (const char* f : {"metrics.csv", "init.ersm", "final.ersm", "best.ersm"}) {
    const std::string a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
    if (a.empty() || a != b) v.fail(std::string(f) + " differs");
  }
  if (v.pass) v.detail = "metrics.csv and checkpoints byte-identical";
  return v;
}

}  // namespace

int main() {
  tune_allocator();
  report("gradient fidelity", gradient_fidelity);
  report("branch equivalence", branch_equivalence);
  report("structural identities", structural_identities);
  report("pairwise energy correctness", pairwise_correctness);
  report("deletion rescaling", deletion_rescaling);

  std::vector<SeedRun> runs;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    for (std::uint64_t seed : {1, 2, 3}) runs.push_back(train_seed(seed));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "training failed: %s\n", e.what());
    runs.clear();
  }
  const double train_secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::fprintf(stderr, "  trained 3 seeds x {full, baseline} in %.1fs\n", train_secs);
  const auto need_runs = [&](Verdict (*f)(const std::vector<SeedRun>&)) {
    return [&runs, f] {
      Verdict v;
      if (runs.size() != 3) {
        v.fail("training did not complete");
        return v;
      }
      return f(runs);
    };
  };
  report("emergent sparsity", [&] {
    Verdict v = need_runs(emergent_sparsity)();
    v.detail += fmt(" [training %.0fs]", train_secs);
    return v;
  });
  report("energy dominance", need_runs(energy_dominance));
  report("alignment", need_runs(alignment));
  report("determinism", determinism);

  std::printf("%d/%d criteria passed\n", criteria - failures, criteria);
  return failures ? 1 : 0;
}
