#include "cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "dain/angular.hpp"
#include "dain/data.hpp"
#include "dain/gradsuite.hpp"
#include "dain/models.hpp"
#include "dain/train.hpp"

namespace dain::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum Group : unsigned {
  kCommon = 1u << 0,
  kGen = 1u << 1,
  kInput = 1u << 2,
  kSplit = 1u << 3,
  kModel = 1u << 4,
  kTrain = 1u << 5,
  kEval = 1u << 6,
  kDiff = 1u << 7,
  kGrad = 1u << 8,
  kSumm = 1u << 9,
};

// The single list of fields; JSON I/O and flags are derived from it.
template <class C, class F>
void visit(C& c, F&& f) {
  f("output_dir", c.output_dir, kCommon, "output directory (env DAIN_OUTPUT_DIR overrides the config file)");
  f("seed", c.seed, kCommon, "seed for every random stream");

  f("dataset", c.dataset, kGen, "synthetic class family: angular | spatial | mixed");
  f("samples_per_class", c.samples_per_class, kGen, "samples per class");
  f("views", c.views, kGen, "viewing angles in degrees");
  f("delta_deg", c.delta_deg, kGen, "angular offset of the partner image");
  f("image_size", c.image_size, kGen, "image side in pixels");
  f("gain_lo", c.gain_lo, kGen, "lower per-sample gain");
  f("gain_hi", c.gain_hi, kGen, "upper per-sample gain");
  f("noise_sigma", c.noise_sigma, kGen, "pixel noise std");
  f("rho1", c.rho1, kGen, "angular response amplitude for every class");
  f("image_format", c.image_format, kGen, "f32 | png8 | png16");
  f("illumination", c.illumination, kGen, "illumination tag in file names");

  f("manifest", c.manifest, kInput, "dataset manifest (manifest.tsv)");
  f("gtos_root", c.gtos_root, kInput, "GTOS-style directory tree to ingest instead of a manifest");
  f("split_file", c.split_file, kInput, "sample split file from the splits command");
  f("train_fraction", c.train_fraction, kSplit, "fraction of samples per class used for training");
  f("n_splits", c.n_splits, kSplit, "number of random splits");

  f("arch", c.arch, kModel, "baseline | deepten | bilinearcnn | dep | dain | tean");
  f("backbone", c.backbone, kModel, "backbone spec, e.g. 1x28:8k3s1p1m2,16k3s1p1m2,16k3s1p1m1");
  f("n_classes", c.n_classes, kModel, "number of classes (0: from the manifest)");
  f("n_codewords", c.n_codewords, kModel, "encoding codewords (DEP, TEAN)");
  f("deepten_codewords", c.deepten_codewords, kModel, "encoding codewords (DeepTEN head)");
  f("reduce_dim", c.reduce_dim, kModel, "reduction width");
  f("embed_dim", c.embed_dim, kModel, "embedding width");
  f("dropout", c.dropout, kModel, "dropout before the classifier");
  f("share_dain_heads", c.share_dain_heads, kModel, "DAIN heads share one classifier");
  f("feature_combine", c.feature_combine, kModel, "stream fusion: sum | max");
  f("multiview_mode", c.multiview_mode, kModel, "voting | pooling | filter3d");
  f("n_views", c.n_views, kModel, "views per multiview window");
  f("voting_rule", c.voting_rule, kModel, "mean | majority");
  f("dtype", c.dtype, kModel, "f32 | f64");

  f("epochs", c.epochs, kTrain, "maximum epochs");
  f("batch_size", c.batch_size, kTrain, "mini-batch size");
  f("lr", c.lr, kTrain, "initial learning rate");
  f("momentum", c.momentum, kTrain, "SGD momentum");
  f("weight_decay", c.weight_decay, kTrain, "L2 weight decay");
  f("stage1_epochs", c.stage1_epochs, kTrain, "epochs training the classifier only");
  f("stage2_epochs", c.stage2_epochs, kTrain, "epochs training classifier and head");
  f("decay_window", c.decay_window, kTrain, "epochs compared by the decay rule");
  f("decay_tau", c.decay_tau, kTrain, "minimum accuracy gain over the window");
  f("decay_factor", c.decay_factor, kTrain, "learning-rate decay factor");
  f("max_decays", c.max_decays, kTrain, "stop after this many decays (0: never)");
  f("target_train_acc", c.target_train_acc, kTrain, "stop at this train accuracy (0: off)");
  f("stretch_pct", c.stretch_pct, kTrain, "random stretch, percent");
  f("flip_prob", c.flip_prob, kTrain, "mirror probability per axis");
  f("multiview", c.multiview, kTrain, "train through the multiview feature path");
  f("windows_per_sample", c.windows_per_sample, kTrain, "multiview windows drawn per sample per epoch");

  f("checkpoint", c.checkpoint, kEval, "model checkpoint");
  f("eval_mode", c.eval_mode, kEval, "single | voting | pooling | filter3d");
  f("eval_split", c.eval_split, kEval, "train | test | all");

  f("image_v", c.image_v, kDiff, "image at angle v");
  f("image_v_delta", c.image_v_delta, kDiff, "image at angle v + delta");
  f("out_image", c.out_image, kDiff, "output .f32 file");

  f("gradcheck_h", c.gradcheck_h, kGrad, "finite-difference step");
  f("gradcheck_tol", c.gradcheck_tol, kGrad, "maximum relative error");
  f("gradcheck_seeds", c.gradcheck_seeds, kGrad, "number of seeds checked");

  f("reports", c.reports, kSumm, "eval report JSON files, one per split");
}

std::string dashed(std::string s) {
  for (auto& ch : s)
    if (ch == '_') ch = '-';
  return s;
}

template <class T>
struct is_optional : std::false_type {};
template <class T>
struct is_optional<std::optional<T>> : std::true_type {};

}  // namespace

json to_json(const RunConfig& c) {
  json j;
  j["command"] = c.command;
  visit(c, [&](const char* key, const auto& v, unsigned, const char*) {
    using T = std::decay_t<decltype(v)>;
    if constexpr (is_optional<T>::value) {
      j[key] = v ? json(*v) : json(nullptr);
    } else {
      j[key] = v;
    }
  });
  return j;
}

RunConfig from_json(const json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  RunConfig c;
  std::set<std::string> known = {"command"};
  visit(c, [&](const char* key, auto& v, unsigned, const char*) { known.insert(key); (void)v; });
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw UsageError("unknown config key: " + it.key());
  if (j.contains("command")) c.command = j.at("command").get<std::string>();
  visit(c, [&](const char* key, auto& v, unsigned, const char*) {
    if (!j.contains(key)) return;
    using T = std::decay_t<decltype(v)>;
    const json& x = j.at(key);
    try {
      if constexpr (is_optional<T>::value) {
        if (x.is_null())
          v.reset();
        else
          v = x.get<typename T::value_type>();
      } else {
        v = x.get<T>();
      }
    } catch (const json::exception& e) {
      throw UsageError(std::string("config key ") + key + ": " + e.what());
    }
  });
  return c;
}

namespace {

// ---------------------------------------------------------------------------
// Validation and conversion

void require(bool ok, const std::string& msg) {
  if (!ok) throw UsageError(msg);
}

template <class F>
auto parse_enum(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(what + ": " + e.what());
  }
}

void require_file(const std::string& path, const std::string& what) {
  require(!path.empty(), "missing --" + dashed(what));
  require(fs::exists(path), what + " not found: " + path);
}

models::ModelConfig model_config(const RunConfig& c, std::size_t n_classes) {
  models::ModelConfig m;
  m.arch = parse_enum("arch", [&] { return models::parse_arch(c.arch); });
  m.backbone = parse_enum("backbone", [&] { return models::BackboneConfig::parse(c.backbone); });
  m.dims.n_codewords = c.n_codewords;
  m.dims.deepten_codewords = c.deepten_codewords;
  m.dims.reduce_dim = c.reduce_dim;
  m.dims.embed_dim = c.embed_dim;
  m.dims.n_classes = n_classes;
  m.dims.dropout = c.dropout;
  m.dims.share_dain_heads = c.share_dain_heads;
  m.fusion.feature_combine = parse_enum("feature_combine", [&] { return angular::parse_feature_combine(c.feature_combine); });
  m.fusion.multiview_mode = parse_enum("multiview_mode", [&] { return angular::parse_multiview_mode(c.multiview_mode); });
  m.fusion.voting_rule = parse_enum("voting_rule", [&] { return angular::parse_voting_rule(c.voting_rule); });
  m.fusion.n_views = c.n_views;
  m.dtype = parse_enum("dtype", [&] { return parse_dtype(c.dtype); });
  m.seed = c.seed;
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return m;
}

train::TrainConfig train_config(const RunConfig& c) {
  require(c.epochs >= 1, "epochs must be >= 1");
  require(c.batch_size >= 1, "batch_size must be >= 1");
  require(c.lr >= 0.0 && std::isfinite(c.lr), "lr must be finite and >= 0");
  require(c.momentum >= 0.0 && c.momentum < 1.0, "momentum must be in [0, 1)");
  require(c.weight_decay >= 0.0, "weight_decay must be >= 0");
  require(c.decay_window >= 1, "decay_window must be >= 1");
  require(c.decay_factor > 0.0 && c.decay_factor <= 1.0, "decay_factor must be in (0, 1]");
  require(c.target_train_acc >= 0.0 && c.target_train_acc <= 1.0, "target_train_acc must be in [0, 1]");
  require(c.stretch_pct >= 0.0 && c.stretch_pct < 100.0, "stretch_pct must be in [0, 100)");
  require(c.flip_prob >= 0.0 && c.flip_prob <= 1.0, "flip_prob must be in [0, 1]");
  require(c.windows_per_sample >= 1, "windows_per_sample must be >= 1");
  train::TrainConfig t;
  t.epochs = c.epochs;
  t.batch_size = c.batch_size;
  t.lr = c.lr;
  t.momentum = c.momentum;
  t.weight_decay = c.weight_decay;
  t.stage1_epochs = c.stage1_epochs;
  t.stage2_epochs = c.stage2_epochs;
  t.decay_window = c.decay_window;
  t.decay_tau = c.decay_tau;
  t.decay_factor = c.decay_factor;
  t.max_decays = c.max_decays;
  t.target_train_acc = c.target_train_acc;
  t.stretch_pct = c.stretch_pct;
  t.flip_prob = c.flip_prob;
  t.multiview = c.multiview;
  t.windows_per_sample = c.windows_per_sample;
  t.seed = c.seed;
  return t;
}

data::GeneratorConfig generator_config(const RunConfig& c) {
  data::GeneratorConfig g;
  if (c.dataset == "angular")
    g.specs = data::angular_only_specs();
  else if (c.dataset == "spatial")
    g.specs = data::spatial_only_specs();
  else if (c.dataset == "mixed")
    g.specs = data::mixed_specs();
  else
    throw UsageError("dataset: unknown family '" + c.dataset + "' (angular | spatial | mixed)");
  if (c.rho1)
    for (auto& s : g.specs) s.rho1 = *c.rho1;
  g.samples_per_class = c.samples_per_class;
  g.views_deg = c.views;
  g.delta_deg = c.delta_deg;
  g.image_size = c.image_size;
  g.gain_lo = c.gain_lo;
  g.gain_hi = c.gain_hi;
  g.noise_sigma = c.noise_sigma;
  g.seed = c.seed;
  g.format = parse_enum("image_format", [&] { return data::parse_image_format(c.image_format); });
  g.illumination = c.illumination;
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return g;
}

std::optional<data::Split> eval_split(const RunConfig& c) {
  if (c.eval_split == "train") return data::Split::Train;
  if (c.eval_split == "test") return data::Split::Test;
  if (c.eval_split == "all") return std::nullopt;
  throw UsageError("eval_split: expected train | test | all, got '" + c.eval_split + "'");
}

// Manifest with splits applied from --split-file when given.
data::DatasetManifest load_dataset(const RunConfig& c, bool need_split) {
  require_file(c.manifest, "manifest");
  auto m = data::read_manifest(c.manifest);
  if (!c.split_file.empty()) {
    require_file(c.split_file, "split_file");
    m = data::apply_split(m, data::read_split(c.split_file));
  } else if (need_split) {
    for (const auto& r : m.records)
      require(r.split != data::Split::Unassigned, "manifest has unassigned records; pass --split-file");
  }
  return m;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
  if (!f) throw std::runtime_error("write failed: " + p.string());
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw UsageError("cannot read " + p.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw UsageError(p.string() + ": " + e.what());
  }
}

void echo_config(const RunConfig& c) {
  fs::create_directories(c.output_dir);
  write_json(fs::path(c.output_dir) / (c.command + ".config.json"), to_json(c));
}

json report_json(const train::EvalReport& r) {
  json j;
  j["n_classes"] = r.n_classes;
  j["total"] = r.total;
  j["correct"] = r.correct;
  j["overall"] = r.overall;
  j["per_class"] = r.per_class;
  j["per_class_count"] = r.per_class_count;
  j["confusion"] = r.confusion;
  j["warnings"] = r.warnings;
  j["per_angle"] = json::array();
  for (const auto& a : r.per_angle)
    j["per_angle"].push_back({{"theta_deg", a.theta_deg}, {"correct", a.correct}, {"total", a.total}});
  return j;
}

train::EvalReport report_from_json(const json& j) {
  train::EvalReport r;
  try {
    r.n_classes = j.at("n_classes").get<std::size_t>();
    r.total = j.at("total").get<std::size_t>();
    r.correct = j.at("correct").get<std::size_t>();
    r.overall = j.at("overall").get<double>();
    r.per_class = j.at("per_class").get<std::vector<double>>();
    r.per_class_count = j.at("per_class_count").get<std::vector<std::size_t>>();
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    for (const auto& a : j.at("per_angle"))
      r.per_angle.push_back({a.at("theta_deg").get<double>(), a.at("correct").get<std::size_t>(),
                             a.at("total").get<std::size_t>()});
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad report: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_generate(const RunConfig& c) {
  const auto g = generator_config(c);
  echo_config(c);
  const auto res = data::generate_synthetic(g, c.output_dir);
  std::cout << "generated " << res.manifest.records.size() << " records, " << g.specs.size() << " classes, "
            << res.clamped_pixels << " clamped pixels -> " << (fs::path(c.output_dir) / "manifest.tsv").string() << "\n";
  return 0;
}

int cmd_splits(const RunConfig& c) {
  require(c.train_fraction > 0.0 && c.train_fraction < 1.0, "train_fraction must be in (0, 1)");
  require(c.n_splits >= 1, "n_splits must be >= 1");
  data::DatasetManifest m;
  fs::create_directories(c.output_dir);
  if (!c.gtos_root.empty()) {
    require(fs::is_directory(c.gtos_root), "gtos_root is not a directory: " + c.gtos_root);
    auto ing = data::ingest_gtos(c.gtos_root);
    for (const auto& w : ing.warnings) std::cerr << "warning: " << w << "\n";
    for (const auto& e : ing.errors) std::cerr << "skipped: " << e << "\n";
    m = std::move(ing.manifest);
    data::write_manifest(fs::path(c.output_dir) / "manifest.tsv", m);
    std::string names;
    for (std::size_t i = 0; i < ing.class_names.size(); ++i) names += std::to_string(i) + "\t" + ing.class_names[i] + "\n";
    write_text(fs::path(c.output_dir) / "classes.tsv", names);
  } else {
    require_file(c.manifest, "manifest");
    m = data::read_manifest(c.manifest);
  }
  echo_config(c);
  const auto splits = data::make_splits(m, c.train_fraction, c.n_splits, c.seed);
  for (std::size_t i = 0; i < splits.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "split_%zu.tsv", i);
    data::write_split(fs::path(c.output_dir) / name, splits[i]);
    std::size_t n_train = 0;
    for (const auto& [id, s] : splits[i]) n_train += s == data::Split::Train;
    std::cout << name << ": " << n_train << " train / " << splits[i].size() - n_train << " test samples\n";
  }
  return 0;
}

int cmd_train(const RunConfig& c, bool dry_run) {
  const auto tc = train_config(c);
  std::size_t n_classes = c.n_classes;
  std::optional<data::DatasetManifest> m;
  if (!dry_run || n_classes == 0) {
    m = load_dataset(c, !dry_run);
    if (n_classes == 0) n_classes = m->n_classes();
    require(n_classes >= m->n_classes(), "n_classes is smaller than the number of classes in the manifest");
  }
  const auto mc = model_config(c, n_classes);
  if (dry_run) {
    std::cout << "config ok: arch=" << models::to_string(mc.arch) << " parameters=" << models::expected_parameter_count(mc)
              << "\n";
    return 0;
  }
  auto model = models::ModelGraph::build(mc);
  echo_config(c);
  const auto tr = data::load_items(*m, data::Split::Train);
  const auto te = data::load_items(*m, data::Split::Test);
  require(!tr.empty(), "no training records");
  const auto& shp = tr.front().image.shape();
  require(shp[0] == mc.backbone.in_channels, "backbone expects " + std::to_string(mc.backbone.in_channels) +
                                                 " channels, images have " + std::to_string(shp[0]));
  require(shp[1] >= mc.backbone.input_size && shp[2] >= mc.backbone.input_size,
          "backbone input " + std::to_string(mc.backbone.input_size) + " exceeds the image size");
  const fs::path out(c.output_dir);
  auto t = tc;
  t.metrics_csv = out / "metrics.csv";
  t.divergence_checkpoint = out / "last_good.ckpt";
  t.eval_test_each_epoch = !te.empty();
  const auto res = train::train(model, tr, te.empty() ? nullptr : &te, t);
  model.save(out / "model.ckpt");
  const auto& last = res.epochs.back();
  json s;
  s["arch"] = models::to_string(mc.arch);
  s["parameters"] = model.parameter_count();
  s["epochs_run"] = res.epochs.size();
  s["decays"] = res.decays;
  s["stop_reason"] = res.stop_reason;
  s["final_lr"] = last.lr;
  s["final_train_acc"] = last.train_acc;
  s["final_test_acc"] = last.test_acc ? json(*last.test_acc) : json(nullptr);
  write_json(out / "train_summary.json", s);
  std::cout << "trained " << models::to_string(mc.arch) << " for " << res.epochs.size() << " epochs (" << res.stop_reason
            << "), train acc " << last.train_acc;
  if (last.test_acc) std::cout << ", test acc " << *last.test_acc;
  std::cout << "\n";
  return 0;
}

train::EvalConfig eval_config(const RunConfig& c) {
  train::EvalConfig e;
  e.seed = c.seed;
  if (c.eval_mode == "single") {
    e.mode = train::EvalMode::SingleView;
  } else {
    e.mode = train::EvalMode::Multiview;
    e.multiview_mode = parse_enum("eval_mode", [&] { return angular::parse_multiview_mode(c.eval_mode); });
    e.voting_rule = parse_enum("voting_rule", [&] { return angular::parse_voting_rule(c.voting_rule); });
    require(c.n_views >= 1, "n_views must be >= 1");
    e.n_views = c.n_views;
  }
  return e;
}

int cmd_eval(const RunConfig& c) {
  const auto ec = eval_config(c);
  const auto split = eval_split(c);
  require_file(c.checkpoint, "checkpoint");
  const auto m = load_dataset(c, split.has_value());
  auto model = models::ModelGraph::load(c.checkpoint);
  const auto items = data::load_items(m, split);
  require(!items.empty(), "no records in the " + c.eval_split + " split");
  echo_config(c);
  const auto r = train::evaluate(model, items, ec);
  r.check_consistency();
  const fs::path out(c.output_dir);
  const std::string stem = "eval_" + c.eval_mode;
  write_json(out / (stem + "_report.json"), report_json(r));
  train::write_confusion_csv(out / (stem + "_confusion.csv"), r);
  if (ec.mode == train::EvalMode::SingleView) train::write_per_angle_csv(out / (stem + "_per_angle.csv"), r);
  const auto text = train::eval_summary_text(r);
  write_text(out / (stem + "_summary.txt"), text);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << text;
  return 0;
}

int cmd_export_features(const RunConfig& c) {
  const auto split = eval_split(c);
  require_file(c.checkpoint, "checkpoint");
  const auto m = load_dataset(c, split.has_value());
  auto model = models::ModelGraph::load(c.checkpoint);
  const auto items = data::load_items(m, split);
  echo_config(c);
  const auto rows = train::export_features(model, items);
  const auto path = fs::path(c.output_dir) / "features.csv";
  train::write_feature_csv(path, rows);
  std::cout << "wrote " << rows.size() << " feature rows (" << (rows.empty() ? 0 : rows[0].features.size())
            << " dims) -> " << path.string() << "\n";
  return 0;
}

int cmd_diffimg(const RunConfig& c) {
  require_file(c.image_v, "image_v");
  require_file(c.image_v_delta, "image_v_delta");
  require(!c.out_image.empty(), "missing --out-image");
  require(fs::path(c.out_image).extension() == ".f32", "out_image must be a .f32 file (differential images are signed)");
  const auto a = data::read_image(c.image_v);
  const auto b = data::read_image(c.image_v_delta);
  require(a.shape() == b.shape(), "image shapes differ");
  const auto d = angular::differential_image(a.astype(DType::f64), b.astype(DType::f64));
  if (const auto parent = fs::path(c.out_image).parent_path(); !parent.empty()) fs::create_directories(parent);
  data::write_image(c.out_image, d.astype(DType::f32));
  std::cout << "wrote " << c.out_image << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& c) {
  const auto arch = parse_enum("arch", [&] { return models::parse_arch(c.arch); });
  require(c.gradcheck_h > 0.0, "gradcheck_h must be > 0");
  require(c.gradcheck_seeds >= 1, "gradcheck_seeds must be >= 1");
  ad::GradcheckOptions o;
  o.h = c.gradcheck_h;
  o.tol = c.gradcheck_tol;
  double worst = 0.0;
  bool ok = true;
  json runs = json::array();
  for (std::size_t s = 0; s < c.gradcheck_seeds; ++s) {
    const auto seed = c.seed + s;
    const auto r = models::gradcheck_model(models::toy_config(arch, seed), seed + 1000, o);
    worst = std::max(worst, r.max_rel);
    ok = ok && r.passed;
    std::printf("seed %llu: %s max_rel_err=%.3e (%zu checked, %zu at kinks)\n", static_cast<unsigned long long>(seed),
                r.passed ? "ok" : "FAILED", r.max_rel, r.checked, r.skipped_nonsmooth);
    for (const auto& t : r.tensors)
      if (!t.passed) std::printf("  %s max_rel_err=%.3e\n", t.name.c_str(), t.max_rel);
    runs.push_back({{"seed", seed}, {"passed", r.passed}, {"max_rel_err", r.max_rel}, {"checked", r.checked}});
  }
  std::printf("%s %s max_rel_err=%.3e tol=%.1e\n", ok ? "PASS" : "FAIL", std::string(models::to_string(arch)).c_str(),
              worst, o.tol);
  fs::create_directories(c.output_dir);
  write_json(fs::path(c.output_dir) / "gradcheck.json",
             {{"arch", models::to_string(arch)}, {"passed", ok}, {"max_rel_err", worst}, {"runs", runs}});
  return ok ? 0 : 1;
}

int cmd_summarize(const RunConfig& c) {
  require(!c.reports.empty(), "missing --reports");
  std::vector<train::EvalReport> rs;
  for (const auto& p : c.reports) {
    require_file(p, "reports");
    rs.push_back(report_from_json(read_json(p)));
  }
  const auto text = train::multi_split_summary(rs);
  fs::create_directories(c.output_dir);
  write_text(fs::path(c.output_dir) / "summary.txt", text);
  std::cout << text;
  return 0;
}

struct Command {
  const char* name;
  const char* help;
  unsigned groups;
};

constexpr Command kCommands[] = {
    {"generate", "render a synthetic multiview dataset", kCommon | kGen},
    {"splits", "make train/test splits (optionally ingesting a GTOS-style tree)", kCommon | kInput | kSplit},
    {"train", "train a model", kCommon | kInput | kModel | kTrain},
    {"eval", "evaluate a checkpoint", kCommon | kInput | kModel | kEval},
    {"export-features", "write pre-classifier features as CSV", kCommon | kInput | kEval},
    {"diffimg", "write the differential image of two views", kCommon | kDiff},
    {"gradcheck", "finite-difference check of an architecture at toy width", kCommon | kModel | kGrad},
    {"summarize", "mean and std over per-split eval reports", kCommon | kSumm},
};

void write_error(const std::string& dir, const std::string& command, const std::string& kind, const std::string& msg,
                 int code) {
  try {
    fs::create_directories(dir);
    write_json(fs::path(dir) / "error.json", {{"command", command}, {"kind", kind}, {"message", msg}, {"exit_code", code}});
  } catch (const std::exception&) {
  }
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Differential angular imaging for material recognition"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  RunConfig flags;
  std::map<std::string, std::map<std::string, CLI::Option*>> bound;  // command -> key -> option
  std::map<std::string, std::string> config_files;
  std::map<std::string, CLI::App*> subs;
  bool dry_run = false;
  for (const auto& cmd : kCommands) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    subs[cmd.name] = sub;
    sub->add_option("--config", config_files[cmd.name], "JSON config file; flags override it");
    if (std::string(cmd.name) == "train") sub->add_flag("--dry-run", dry_run, "validate and print the parameter count");
    visit(flags, [&](const char* key, auto& v, unsigned group, const char* help) {
      if (!(group & cmd.groups)) return;
      using T = std::decay_t<decltype(v)>;
      const std::string name = "--" + dashed(key);
      if constexpr (std::is_same_v<T, bool>) {
        bound[cmd.name][key] = sub->add_flag(name, v, help);
      } else if constexpr (is_optional<T>::value) {
        bound[cmd.name][key] =
            sub->add_option_function<typename T::value_type>(name, [&v](const typename T::value_type& x) { v = x; }, help);
      } else if constexpr (std::is_same_v<T, std::vector<double>> || std::is_same_v<T, std::vector<std::string>>) {
        bound[cmd.name][key] = sub->add_option(name, v, help)->delimiter(',');
      } else {
        bound[cmd.name][key] = sub->add_option(name, v, help);
      }
    });
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  std::string command;
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) command = name;

  std::string out_dir = flags.output_dir;
  try {
    json j = to_json(RunConfig{});
    if (!config_files[command].empty()) {
      const json file = read_json(config_files[command]);
      if (!file.is_object()) throw UsageError("config file must hold a JSON object");
      for (auto it = file.begin(); it != file.end(); ++it) {
        if (!j.contains(it.key())) throw UsageError("unknown config key: " + it.key());
        j[it.key()] = it.value();
      }
    }
    if (const char* env = std::getenv("DAIN_OUTPUT_DIR"); env && *env) j["output_dir"] = env;
    const json given = to_json(flags);
    for (const auto& [key, opt] : bound[command])
      if (opt->count() > 0) j[key] = given.at(key);
    j["command"] = command;
    RunConfig c = from_json(j);
    out_dir = c.output_dir;

    if (command == "generate") return cmd_generate(c);
    if (command == "splits") return cmd_splits(c);
    if (command == "train") return cmd_train(c, dry_run);
    if (command == "eval") return cmd_eval(c);
    if (command == "export-features") return cmd_export_features(c);
    if (command == "diffimg") return cmd_diffimg(c);
    if (command == "gradcheck") return cmd_gradcheck(c);
    if (command == "summarize") return cmd_summarize(c);
    throw UsageError("unknown command");
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_error(out_dir, command, "usage", e.what(), 2);
    return 2;
  } catch (const train::TrainingDiverged& e) {
    std::cerr << "error: training diverged: " << e.what() << "\n";
    write_error(out_dir, command, "diverged", e.what(), 1);
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_error(out_dir, command, "runtime", e.what(), 1);
    return 1;
  }
}

}  // namespace dain::cli
