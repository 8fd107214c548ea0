#include "ersm/cli.hpp"

#include <CLI11.hpp>

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ersm/binary_io.hpp"
#include "ersm/evaluation.hpp"

namespace ersm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t.empty() || t[0] == '-' || t[0] == '+') {
    throw std::invalid_argument(key + ": expected a non-negative integer, got '" + v + "'");
  }
  errno = 0;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(t.c_str(), &end, 10);
  if (errno != 0 || end != t.c_str() + t.size()) {
    throw std::invalid_argument(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return x;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_double(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(t.c_str(), &end);
  if (t.empty() || errno != 0 || end != t.c_str() + t.size() || !std::isfinite(x)) {
    throw std::invalid_argument(key + ": expected a finite number, got '" + v + "'");
  }
  return x;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> items;
  std::stringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

template <typename T>
std::string join(const std::vector<T>& items) {
  std::ostringstream out;
  for (std::size_t i = 0; i < items.size(); ++i) out << (i ? "," : "") << items[i];
  return out.str();
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

enum Group : unsigned {
  kGenerate = 1,
  kModel = 2,
  kTrain = 4,
  kEval = 8,
  kAll = 15,
};

struct Key {
  std::string name;
  unsigned groups;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Field>
Key size_key(std::string name, unsigned groups, std::string help, Field field) {
  return {name, groups, std::move(help),
          [name, field](RunConfig& c, const std::string& v) { field(c) = parse_size(name, v); },
          [field](const RunConfig& c) {
            return std::to_string(field(const_cast<RunConfig&>(c)));
          }};
}

template <typename Field>
Key double_key(std::string name, unsigned groups, std::string help, Field field) {
  return {name, groups, std::move(help),
          [name, field](RunConfig& c, const std::string& v) { field(c) = parse_double(name, v); },
          [field](const RunConfig& c) { return format_double(field(const_cast<RunConfig&>(c))); }};
}

const std::vector<Key>& key_table() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back(size_key("classes", kGenerate, "number of glyph classes K",
                         [](RunConfig& c) -> std::size_t& { return c.generator.classes; }));
    k.push_back(size_key("channels", kGenerate, "image channels",
                         [](RunConfig& c) -> std::size_t& { return c.generator.channels; }));
    k.push_back(size_key("height", kGenerate, "image height",
                         [](RunConfig& c) -> std::size_t& { return c.generator.height; }));
    k.push_back(size_key("width", kGenerate, "image width",
                         [](RunConfig& c) -> std::size_t& { return c.generator.width; }));
    k.push_back(size_key("object_size", kGenerate, "side of the planted square object",
                         [](RunConfig& c) -> std::size_t& { return c.generator.object_size; }));
    k.push_back({"background", kGenerate, "background field: constant or lowfreq",
                 [](RunConfig& c, const std::string& v) {
                   c.generator.background = parse_background(trim(v));
                 },
                 [](const RunConfig& c) { return std::string(background_name(c.generator.background)); }});
    k.push_back(double_key("noise_amplitude", kGenerate, "std of per-pixel Gaussian noise",
                           [](RunConfig& c) -> double& { return c.generator.noise_amplitude; }));
    k.push_back(double_key("grating_period", kGenerate, "pixels per glyph grating cycle",
                           [](RunConfig& c) -> double& { return c.generator.grating_period; }));
    k.push_back(size_key("samples", kGenerate, "number of images to generate",
                         [](RunConfig& c) -> std::size_t& { return c.samples; }));

    k.push_back(double_key("train_fraction", kModel, "share of each class used for training",
                           [](RunConfig& c) -> double& { return c.train_fraction; }));
    k.push_back({"backbone_channels", kModel, "comma-separated conv block widths",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<std::size_t> widths;
                   for (const std::string& s : split_list(v)) {
                     widths.push_back(parse_size("backbone_channels", s));
                   }
                   if (widths.empty()) {
                     throw std::invalid_argument("backbone_channels: need at least one layer");
                   }
                   c.backbone_channels = widths;
                 },
                 [](const RunConfig& c) { return join(c.backbone_channels); }});
    k.push_back(size_key("backbone_kernel", kModel, "conv kernel size (odd; same padding)",
                         [](RunConfig& c) -> std::size_t& { return c.backbone_kernel; }));
    k.push_back(size_key("backbone_pool", kModel, "max-pool window after each block (1 = none)",
                         [](RunConfig& c) -> std::size_t& { return c.backbone_pool; }));
    k.push_back(size_key("patch", kModel, "token patch size d",
                         [](RunConfig& c) -> std::size_t& { return c.patch; }));
    k.push_back({"variant", kModel, "baseline, unary or full",
                 [](RunConfig& c, const std::string& v) { c.variant = parse_variant(trim(v)); },
                 [](const RunConfig& c) { return std::string(variant_name(c.variant)); }});

    k.push_back(size_key("epochs", kTrain, "training epochs",
                         [](RunConfig& c) -> std::size_t& { return c.train.epochs; }));
    k.push_back(size_key("batch_size", kTrain, "mini-batch size",
                         [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }));
    k.push_back(double_key("peak_lr", kTrain, "cosine schedule start",
                           [](RunConfig& c) -> double& { return c.train.peak_lr; }));
    k.push_back(double_key("min_lr", kTrain, "cosine schedule floor",
                           [](RunConfig& c) -> double& { return c.train.min_lr; }));
    k.push_back(double_key("weight_decay", kTrain, "decoupled weight decay",
                           [](RunConfig& c) -> double& { return c.train.weight_decay; }));
    k.push_back(double_key("lambda_unary", kTrain, "unary energy weight",
                           [](RunConfig& c) -> double& { return c.train.lambda_unary; }));
    k.push_back(double_key("lambda_pair", kTrain, "pairwise energy weight",
                           [](RunConfig& c) -> double& { return c.train.lambda_pair; }));
    k.push_back(size_key("eval_interval", kTrain, "evaluate the test split every N epochs",
                         [](RunConfig& c) -> std::size_t& { return c.train.eval_interval; }));
    k.push_back({"freeze", kTrain, "comma-separated groups to freeze: backbone, mask, head",
                 [](RunConfig& c, const std::string& v) {
                   FrozenGroups f;
                   for (const std::string& g : split_list(v)) {
                     if (g == "backbone") f.backbone = true;
                     else if (g == "mask") f.mask = true;
                     else if (g == "head") f.head = true;
                     else if (g != "none") throw std::invalid_argument("freeze: unknown group '" + g + "'");
                   }
                   c.train.frozen = f;
                 },
                 [](const RunConfig& c) {
                   std::vector<std::string> g;
                   if (c.train.frozen.backbone) g.push_back("backbone");
                   if (c.train.frozen.mask) g.push_back("mask");
                   if (c.train.frozen.head) g.push_back("head");
                   return g.empty() ? std::string("none") : join(g);
                 }});

    k.push_back({"random_seeds", kEval, "comma-separated seeds for the random deletion baseline",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<std::uint64_t> seeds;
                   for (const std::string& s : split_list(v)) seeds.push_back(parse_u64("random_seeds", s));
                   if (seeds.empty()) throw std::invalid_argument("random_seeds: need at least one seed");
                   c.random_seeds = seeds;
                 },
                 [](const RunConfig& c) { return join(c.random_seeds); }});
    k.push_back(double_key("keep_fraction", kEval, "retained share of tokens for alignment",
                           [](RunConfig& c) -> double& { return c.keep_fraction; }));
    k.push_back(size_key("random_sets", kEval, "random token sets per image for the alignment baseline",
                         [](RunConfig& c) -> std::size_t& { return c.random_sets; }));
    k.push_back(size_key("mask_count", kEval, "images exported by --masks-out",
                         [](RunConfig& c) -> std::size_t& { return c.mask_count; }));

    k.push_back({"seed", kAll, "seed for generation, splitting, init and shuffling",
                 [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    return k;
  }();
  return table;
}

const Key& find_key(const std::string& name) {
  for (const Key& k : key_table()) {
    if (k.name == name) return k;
  }
  throw std::invalid_argument("unknown config key '" + name + "'");
}

std::string dashed(std::string name) {
  for (char& c : name) {
    if (c == '_') c = '-';
  }
  return name;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  find_key(key).set(*this, value);
}

std::string RunConfig::get(const std::string& key) const { return find_key(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const Key& k : key_table()) n.push_back(k.name);
    return n;
  }();
  return names;
}

void RunConfig::validate() const {
  GeneratorConfig g = generator;
  g.seed = seed;
  g.validate();
  if (samples == 0) throw std::invalid_argument("samples must be >= 1");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("train_fraction must lie in (0, 1)");
  }
  if (backbone_kernel == 0 || backbone_kernel % 2 == 0) {
    throw std::invalid_argument("backbone_kernel must be odd");
  }
  if (backbone_pool == 0) throw std::invalid_argument("backbone_pool must be >= 1");
  for (std::size_t w : backbone_channels) {
    if (w == 0) throw std::invalid_argument("backbone_channels must be positive");
  }
  if (patch == 0) throw std::invalid_argument("patch must be >= 1");
  train.validate();
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw std::invalid_argument("keep_fraction must lie in (0, 1]");
  }
  if (random_sets == 0) throw std::invalid_argument("random_sets must be >= 1");
  if (random_seeds.empty()) throw std::invalid_argument("random_seeds must not be empty");
}

ModelConfig RunConfig::model(std::size_t classes, std::size_t channels, std::size_t height,
                             std::size_t width) const {
  ModelConfig m;
  m.backbone.in_channels = channels;
  m.backbone.in_height = height;
  m.backbone.in_width = width;
  m.backbone.layers.clear();
  for (std::size_t w : backbone_channels) {
    ConvLayerSpec l;
    l.out_channels = w;
    l.kernel = backbone_kernel;
    l.pad = backbone_kernel / 2;
    l.pool = backbone_pool;
    m.backbone.layers.push_back(l);
  }
  m.mask.patch = patch;
  m.mask.lambda_unary = train.lambda_unary;
  m.mask.lambda_pair = train.lambda_pair;
  m.variant = variant;
  m.classes = classes;
  m.validate();
  return m;
}

ModelConfig RunConfig::model_for(const Dataset& dataset) const {
  return model(dataset.classes, dataset.channels, dataset.height, dataset.width);
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) +
                                  ": expected key = value");
    }
    try {
      config.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

namespace {

class Usage : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Command {
  CLI::App* app = nullptr;
  unsigned groups = 0;
  std::string config_path;
  std::map<std::string, std::string> flags;
};

void add_config_flags(Command& cmd, const RunConfig& defaults) {
  cmd.app->add_option("--config", cmd.config_path, "flat key = value config file");
  for (const Key& k : key_table()) {
    if (!(k.groups & cmd.groups)) continue;
    cmd.app->add_option("--" + dashed(k.name), cmd.flags[k.name], k.help)
        ->default_str(k.get(defaults))
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
}

RunConfig resolve(const Command& cmd) {
  RunConfig config;
  if (!cmd.config_path.empty()) apply_config_file(config, cmd.config_path);
  for (const auto& [name, value] : cmd.flags) {
    if (cmd.app->count("--" + dashed(name)) > 0) config.set(name, value);
  }
  config.validate();
  return config;
}

std::pair<Dataset, Dataset> load_split(const RunConfig& config, const std::string& path) {
  const Dataset ds = read_dataset(path);
  if (ds.empty()) throw std::invalid_argument(path + ": dataset is empty");
  return split(ds, config.train_fraction, config.seed);
}

void print_epoch(std::ostream& err, const EpochMetrics& m, std::size_t epochs) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "epoch %zu/%zu  lce=%.5f lreg=%.6f train_acc=%.4f test_acc=%.4f E[m]=%.4f", m.epoch,
                epochs, m.lce, m.lreg, m.train_acc, m.test_acc, m.mean_mask);
  err << buf << std::endl;
}

int cmd_generate(const Command& cmd, const std::string& out_path, std::ostream& out) {
  const RunConfig config = resolve(cmd);
  GeneratorConfig g = config.generator;
  g.seed = config.seed;
  const Dataset ds = generate(g, config.samples);
  write_dataset(out_path, ds);
  out << "wrote " << out_path << ": n=" << ds.size() << " K=" << ds.classes
      << " shape=" << ds.channels << "x" << ds.height << "x" << ds.width << " seed=" << g.seed
      << '\n';
  return kExitOk;
}

int cmd_train(const Command& cmd, const std::string& data, const std::string& out_dir,
              const std::string& init_path, std::ostream& out, std::ostream& err) {
  const RunConfig config = resolve(cmd);
  const auto [train_set, test_set] = load_split(config, data);
  const ModelConfig model = config.model_for(train_set);
  ModelParams init = init_path.empty() ? init_params(model, config.seed)
                                       : load_params(init_path, model);
  TrainConfig tc = config.train;
  tc.seed = config.seed;

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  save_params(dir / "init.ersm", model, init);
  err << "train: " << train_set.size() << " train / " << test_set.size() << " test images, variant "
      << variant_name(model.variant) << '\n';
  const TrainResult r = train(model, std::move(init), train_set, test_set, tc,
                              [&](const EpochMetrics& m) { print_epoch(err, m, tc.epochs); });
  save_params(dir / "final.ersm", model, r.final_params);
  save_params(dir / "best.ersm", model, r.best_params);
  write_metrics_csv(dir / "metrics.csv", r.metrics);

  char buf[256];
  std::snprintf(buf, sizeof buf,
                "peak_accuracy=%.4f best_epoch=%zu mean_mask=%.4f final_mean_mask=%.4f\n",
                r.best_accuracy, r.best_epoch, r.metrics[r.best_epoch].mean_mask,
                r.metrics.back().mean_mask);
  out << buf;
  return kExitOk;
}

std::vector<double> parse_grid(const std::string& name, const std::string& spec) {
  std::vector<double> values;
  for (const std::string& s : split_list(spec)) values.push_back(parse_double(name, s));
  if (values.empty()) throw std::invalid_argument(name + ": empty grid");
  for (double v : values) {
    if (v < 0.0) throw std::invalid_argument(name + ": lambdas must be >= 0");
  }
  return values;
}

int cmd_ablate(const Command& cmd, const std::string& data, const std::string& out_dir,
               const std::string& grid_unary, const std::string& grid_pair, std::ostream& out,
               std::ostream& err) {
  const RunConfig config = resolve(cmd);
  const std::vector<double> lu = parse_grid("--grid-unary", grid_unary);
  const std::vector<double> lp = parse_grid("--grid-pair", grid_pair);
  const auto [train_set, test_set] = load_split(config, data);
  const ModelConfig model = config.model_for(train_set);
  TrainConfig tc = config.train;
  tc.seed = config.seed;
  const GridResult result =
      grid_search(lu, lp, model, init_params(model, config.seed), train_set, test_set, tc);
  std::filesystem::create_directories(out_dir);
  const std::string csv = grid_csv(result);
  write_file_atomic(std::filesystem::path(out_dir) / "grid.csv", csv);
  out << csv;
  if (result.best) {
    const GridCell& b = result.cells[*result.best];
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "best cell: lambda_unary=%g lambda_pair=%g accuracy=%.4f E[m]=%.4f\n",
                  b.lambda_unary, b.lambda_pair, b.accuracy, b.mean_mask);
    err << buf;
  } else {
    err << "every grid cell failed\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_eval(const Command& cmd, const std::string& data, const std::string& checkpoint,
             const std::string& out_dir, const std::string& masks_out, const std::string& which,
             std::ostream& out) {
  const RunConfig config = resolve(cmd);
  if (which != "test" && which != "all") {
    throw std::invalid_argument("--split must be test or all");
  }
  if (!masks_out.empty() && config.variant == Variant::Baseline) {
    throw std::invalid_argument("--masks-out needs a masked variant");
  }
  Dataset ds = read_dataset(data);
  if (ds.empty()) throw std::invalid_argument(data + ": dataset is empty");
  const ModelConfig model = config.model_for(ds);
  if (!std::filesystem::exists(checkpoint)) {
    throw std::runtime_error("checkpoint " + checkpoint + " does not exist");
  }
  const ModelParams params = load_params(checkpoint, model);
  if (which == "test") ds = split(ds, config.train_fraction, config.seed).second;

  const RobustnessCurve energy =
      deletion_curve(model, params, ds, DeletionPolicy::Energy, config.random_seeds);
  const RobustnessCurve random =
      deletion_curve(model, params, ds, DeletionPolicy::Random, config.random_seeds);
  const CurveComparison cmp = compare_curves(energy, random);
  const SparsityReport sparsity = sparsity_report(model, params, ds);
  const AlignmentReport alignment =
      alignment_report(model, params, ds, config.keep_fraction, config.random_sets, config.seed);

  const std::filesystem::path dir(out_dir);
  std::filesystem::create_directories(dir);
  const RobustnessCurve both[] = {energy, random};
  write_file_atomic(dir / "curves.csv", curves_csv(both));
  write_file_atomic(dir / "sparsity.csv", sparsity_csv(sparsity));
  write_file_atomic(dir / "alignment.csv", alignment_csv(alignment));
  if (!masks_out.empty()) {
    std::filesystem::create_directories(masks_out);
    export_masks(model, params, ds, config.mask_count, masks_out);
  }

  char buf[320];
  std::snprintf(buf, sizeof buf,
                "images=%zu tokens=%zu mean_mask=%.4f alignment=%.4f random_alignment=%.4f\n"
                "energy_mean=%.4f random_mean=%.4f gap=%.4f pointwise=%.3f\n",
                ds.size(), energy.num_tokens, sparsity.mean, alignment.mean,
                alignment.random_mean, cmp.energy_mean, cmp.random_mean, cmp.gap,
                cmp.pointwise_fraction);
  out << buf;
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const RunConfig defaults;
  CLI::App app("Energy-regularized spatial masking: data, training and evaluation", "ersm");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every command");

  Command gen{app.add_subcommand("generate", "write a synthetic planted-object dataset"),
              kGenerate, {}, {}};
  std::string gen_out;
  add_config_flags(gen, defaults);
  gen.app->add_option("--out", gen_out, "dataset file to write")->required();

  Command tr{app.add_subcommand("train", "train one model and write checkpoints and metrics"),
             kModel | kTrain, {}, {}};
  std::string tr_data, tr_out, tr_init;
  add_config_flags(tr, defaults);
  tr.app->add_option("--data", tr_data, "dataset file")->required();
  tr.app->add_option("--out", tr_out, "output directory")->required();
  tr.app->add_option("--init", tr_init, "start from this checkpoint instead of a fresh init");

  Command ab{app.add_subcommand("ablate", "grid search over the two energy weights"),
             kModel | kTrain, {}, {}};
  std::string ab_data, ab_out, grid_unary, grid_pair;
  add_config_flags(ab, defaults);
  ab.app->add_option("--data", ab_data, "dataset file")->required();
  ab.app->add_option("--out", ab_out, "output directory")->required();
  ab.app->add_option("--grid-unary", grid_unary, "comma-separated lambda_unary values")->required();
  ab.app->add_option("--grid-pair", grid_pair, "comma-separated lambda_pair values")->required();

  Command ev{app.add_subcommand("eval", "deletion curves, sparsity, alignment and mask export"),
             kModel | kEval, {}, {}};
  std::string ev_data, ev_ckpt, ev_out, ev_masks, ev_split = "test";
  add_config_flags(ev, defaults);
  ev.app->add_option("--data", ev_data, "dataset file")->required();
  ev.app->add_option("--checkpoint", ev_ckpt, "parameter checkpoint")->required();
  ev.app->add_option("--out", ev_out, "output directory")->required();
  ev.app->add_option("--masks-out", ev_masks, "directory for PGM keep-probability maps");
  ev.app->add_option("--split", ev_split, "evaluate the test split or all images")
      ->default_str("test");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    // Subcommand --help surfaces here with the subcommand as the active app.
    if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) {
      for (CLI::App* sub : app.get_subcommands()) out << sub->help();
      if (app.get_subcommands().empty()) out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    if (*gen.app) return cmd_generate(gen, gen_out, out);
    if (*tr.app) return cmd_train(tr, tr_data, tr_out, tr_init, out, err);
    if (*ab.app) return cmd_ablate(ab, ab_data, ab_out, grid_unary, grid_pair, out, err);
    if (*ev.app) return cmd_eval(ev, ev_data, ev_ckpt, ev_out, ev_masks, ev_split, out);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const FormatError& e) {
    err << "invalid input: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    err << "invalid configuration: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::out_of_range& e) {
    err << "invalid configuration: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace ersm
