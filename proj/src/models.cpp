#include "dain/models.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <regex>
#include <sstream>
#include <stdexcept>

#include "dain/bilinear.hpp"
#include "dain/encoding.hpp"

namespace dain::models {

using ad::ParamGroup;
using ad::Tape;
using ad::Var;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

double u01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += fmt_double(v[i]);
  }
  return s;
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

std::size_t to_size(const std::string& s, const std::string& key) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("config key " + key + ": not an integer: " + s);
  return v;
}

const std::string& need(const ad::ConfigMap& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw std::invalid_argument("model config missing key: " + key);
  return it->second;
}

std::size_t conv_params(std::size_t out_c, std::size_t in_c, std::size_t k) { return out_c * in_c * k * k + out_c; }
std::size_t linear_params(std::size_t out_f, std::size_t in_f) { return out_f * in_f + out_f; }

std::size_t backbone_params(const BackboneConfig& b) {
  std::size_t n = 0, in = b.in_channels;
  for (const auto& blk : b.blocks) {
    n += conv_params(blk.out_channels, in, blk.kernel);
    in = blk.out_channels;
  }
  return n;
}

std::size_t dep_head_params(const ModelConfig& c) {
  const std::size_t D = c.backbone.out_channels(), n = c.dims.n_codewords, r = c.dims.reduce_dim,
                    e = c.dims.embed_dim;
  return n * D + n + linear_params(r, n * D) + linear_params(r, D) + linear_params(e, r * r);
}

}  // namespace

std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::Baseline: return "baseline";
    case Arch::DeepTEN: return "deepten";
    case Arch::BilinearCNN: return "bilinearcnn";
    case Arch::DEP: return "dep";
    case Arch::DAIN: return "dain";
    case Arch::TEAN: return "tean";
  }
  return "?";
}

Arch parse_arch(std::string_view s) {
  const std::string l = lower(s);
  for (Arch a : kAllArchs)
    if (l == to_string(a)) return a;
  if (l == "deep-ten") return Arch::DeepTEN;
  if (l == "bilinear" || l == "bilinear-cnn") return Arch::BilinearCNN;
  throw std::invalid_argument("unknown architecture: " + std::string(s));
}

bool is_two_stream(Arch a) { return a == Arch::DAIN || a == Arch::TEAN; }

// ---------------------------------------------------------------------------

BackboneConfig BackboneConfig::default_config(std::size_t in_channels) {
  BackboneConfig b;
  b.in_channels = in_channels;
  b.input_size = 56;
  b.blocks = {{8, 3, 1, 1, 2}, {16, 3, 1, 1, 2}, {16, 3, 1, 1, 2}};
  return b;
}

std::size_t BackboneConfig::out_channels() const { return blocks.empty() ? in_channels : blocks.back().out_channels; }

std::size_t BackboneConfig::out_extent() const {
  std::size_t h = input_size;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    if (b.kernel == 0 || b.stride == 0 || b.pool == 0 || b.out_channels == 0)
      throw std::invalid_argument("backbone block " + std::to_string(i) + ": zero-sized setting");
    if (h + 2 * b.pad < b.kernel) throw std::invalid_argument("backbone block " + std::to_string(i) + ": kernel larger than input");
    const std::size_t span = h + 2 * b.pad - b.kernel;
    if (span % b.stride != 0)
      throw std::invalid_argument("backbone block " + std::to_string(i) + ": stride does not divide the output extent");
    h = span / b.stride + 1;
    if (b.pool > 1) h /= b.pool;
    if (h == 0) throw std::invalid_argument("backbone block " + std::to_string(i) + ": feature map vanished");
  }
  return h;
}

void BackboneConfig::validate() const {
  if (in_channels == 0 || input_size == 0) throw std::invalid_argument("backbone: zero input size or channels");
  if (blocks.empty()) throw std::invalid_argument("backbone: at least one conv block is required");
  if (out_extent() < 3)
    throw std::invalid_argument("backbone: final feature map is " + std::to_string(out_extent()) + " wide, need >= 3");
}

std::string BackboneConfig::to_string() const {
  std::string s = std::to_string(in_channels) + "x" + std::to_string(input_size) + ":";
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    if (i) s += ',';
    s += std::to_string(b.out_channels) + "k" + std::to_string(b.kernel) + "s" + std::to_string(b.stride) + "p" +
         std::to_string(b.pad) + "m" + std::to_string(b.pool);
  }
  return s;
}

BackboneConfig BackboneConfig::parse(std::string_view text) {
  static const std::regex head(R"(^(\d+)x(\d+):(.+)$)");
  static const std::regex block(R"(^(\d+)k(\d+)s(\d+)p(\d+)m(\d+)$)");
  const std::string s(text);
  std::smatch m;
  if (!std::regex_match(s, m, head)) throw std::invalid_argument("bad backbone spec: " + s);
  BackboneConfig b;
  b.in_channels = std::stoul(m[1]);
  b.input_size = std::stoul(m[2]);
  std::stringstream ss(m[3].str());
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::smatch bm;
    if (!std::regex_match(tok, bm, block)) throw std::invalid_argument("bad backbone block: " + tok);
    b.blocks.push_back({std::stoul(bm[1]), std::stoul(bm[2]), std::stoul(bm[3]), std::stoul(bm[4]), std::stoul(bm[5])});
  }
  return b;
}

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  backbone.validate();
  fusion.validate();
  if (dims.n_classes < 2) throw std::invalid_argument("n_classes must be >= 2");
  if (dims.n_codewords == 0 || dims.deepten_codewords == 0 || dims.reduce_dim == 0 || dims.embed_dim == 0)
    throw std::invalid_argument("head dimensions must be positive");
  if (!(dims.dropout >= 0.0 && dims.dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
  if (norm_mean.size() != norm_std.size()) throw std::invalid_argument("norm_mean/norm_std length mismatch");
  if (!norm_mean.empty() && norm_mean.size() != backbone.in_channels)
    throw std::invalid_argument("normalization stats must have one entry per input channel");
  for (double s : norm_std)
    if (!(s > 0.0)) throw std::invalid_argument("norm_std entries must be positive");
}

ad::ConfigMap ModelConfig::to_config_map() const {
  ad::ConfigMap m;
  m["arch"] = std::string(to_string(arch));
  m["backbone"] = backbone.to_string();
  m["dims.n_codewords"] = std::to_string(dims.n_codewords);
  m["dims.deepten_codewords"] = std::to_string(dims.deepten_codewords);
  m["dims.reduce_dim"] = std::to_string(dims.reduce_dim);
  m["dims.embed_dim"] = std::to_string(dims.embed_dim);
  m["dims.n_classes"] = std::to_string(dims.n_classes);
  m["dims.dropout"] = fmt_double(dims.dropout);
  m["dims.share_dain_heads"] = dims.share_dain_heads ? "1" : "0";
  m["fusion.feature_combine"] = std::string(angular::to_string(fusion.feature_combine));
  m["fusion.layer_tag"] = fusion.layer_tag;
  m["fusion.multiview_mode"] = std::string(angular::to_string(fusion.multiview_mode));
  m["fusion.n_views"] = std::to_string(fusion.n_views);
  m["fusion.voting_rule"] = std::string(angular::to_string(fusion.voting_rule));
  m["dtype"] = std::string(dtype_name(dtype));
  m["seed"] = std::to_string(seed);
  m["norm.mean"] = join_doubles(norm_mean);
  m["norm.std"] = join_doubles(norm_std);
  return m;
}

ModelConfig ModelConfig::from_config_map(const ad::ConfigMap& m) {
  ModelConfig c;
  c.arch = parse_arch(need(m, "arch"));
  c.backbone = BackboneConfig::parse(need(m, "backbone"));
  c.dims.n_codewords = to_size(need(m, "dims.n_codewords"), "dims.n_codewords");
  c.dims.deepten_codewords = to_size(need(m, "dims.deepten_codewords"), "dims.deepten_codewords");
  c.dims.reduce_dim = to_size(need(m, "dims.reduce_dim"), "dims.reduce_dim");
  c.dims.embed_dim = to_size(need(m, "dims.embed_dim"), "dims.embed_dim");
  c.dims.n_classes = to_size(need(m, "dims.n_classes"), "dims.n_classes");
  c.dims.dropout = std::stod(need(m, "dims.dropout"));
  c.dims.share_dain_heads = need(m, "dims.share_dain_heads") == "1";
  c.fusion.feature_combine = angular::parse_feature_combine(need(m, "fusion.feature_combine"));
  c.fusion.layer_tag = need(m, "fusion.layer_tag");
  c.fusion.multiview_mode = angular::parse_multiview_mode(need(m, "fusion.multiview_mode"));
  c.fusion.n_views = to_size(need(m, "fusion.n_views"), "fusion.n_views");
  c.fusion.voting_rule = angular::parse_voting_rule(need(m, "fusion.voting_rule"));
  c.dtype = parse_dtype(need(m, "dtype"));
  c.seed = std::stoull(need(m, "seed"));
  c.norm_mean = split_doubles(need(m, "norm.mean"));
  c.norm_std = split_doubles(need(m, "norm.std"));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

std::size_t expected_parameter_count(const ModelConfig& c) {
  c.validate();
  const std::size_t D = c.backbone.out_channels(), K = c.dims.n_classes, r = c.dims.reduce_dim;
  const std::size_t S = c.backbone.out_extent();
  const std::size_t bb = backbone_params(c.backbone);
  const std::size_t filt = 27 * D * D + D;
  const bool f3d = c.fusion.multiview_mode == angular::MultiviewMode::Filter3D;
  switch (c.arch) {
    case Arch::Baseline:
      return bb + linear_params(K, D) + (f3d ? filt : 0);
    case Arch::DeepTEN: {
      const std::size_t n = c.dims.deepten_codewords;
      return bb + conv_params(r, D, 1) + n * r + n + linear_params(K, n * r) + (f3d ? filt : 0);
    }
    case Arch::BilinearCNN:
      return bb + conv_params(r, D, 1) + linear_params(K, r * r) + (f3d ? filt : 0);
    case Arch::DEP:
      return bb + dep_head_params(c) + linear_params(K, c.dims.embed_dim) + (f3d ? filt : 0);
    case Arch::DAIN:
      return 2 * bb + linear_params(K, D) * (c.dims.share_dain_heads ? 1 : 2) + (f3d ? 2 * filt : 0);
    case Arch::TEAN: {
      const std::size_t e = c.dims.embed_dim;
      return 2 * bb + dep_head_params(c) + linear_params(e, D * S * S) + linear_params(K, 2 * e) + (f3d ? 2 * filt : 0);
    }
  }
  return 0;
}

std::size_t feature_dim(const ModelConfig& c) {
  const std::size_t D = c.backbone.out_channels(), r = c.dims.reduce_dim;
  switch (c.arch) {
    case Arch::Baseline: return D;
    case Arch::DeepTEN: return c.dims.deepten_codewords * r;
    case Arch::BilinearCNN: return r * r;
    case Arch::DEP: return c.dims.embed_dim;
    case Arch::DAIN: return 2 * D;
    case Arch::TEAN: return 2 * c.dims.embed_dim;
  }
  return 0;
}

// ---------------------------------------------------------------------------

ad::Parameter& ModelGraph::add_param(std::string name, Shape shape, ParamGroup group, std::size_t fan_in,
                                     std::mt19937_64& rng) {
  if (has_param(name)) throw std::logic_error("duplicate parameter name: " + name);
  Tensor t(std::move(shape), cfg_.dtype);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, -bound + 2.0 * bound * u01(rng));
  params_.push_back(std::make_unique<ad::Parameter>(std::move(name), std::move(t), group));
  return *params_.back();
}

void ModelGraph::add_conv(const std::string& prefix, std::size_t out_c, std::size_t in_c, std::size_t k,
                          ParamGroup g, std::mt19937_64& rng) {
  add_param(prefix + ".weight", {out_c, in_c, k, k}, g, in_c * k * k, rng);
  add_param(prefix + ".bias", {out_c}, g, in_c * k * k, rng);
}

void ModelGraph::add_linear(const std::string& prefix, std::size_t out_f, std::size_t in_f, ParamGroup g,
                            std::mt19937_64& rng) {
  add_param(prefix + ".weight", {out_f, in_f}, g, in_f, rng);
  add_param(prefix + ".bias", {out_f}, g, in_f, rng);
}

// Identity delta at the centre tap plus a little noise, so training starts
// from plain max-pooling over views.
void ModelGraph::add_view_filter(const std::string& prefix, std::mt19937_64& rng) {
  const std::size_t D = cfg_.backbone.out_channels();
  auto& w = add_param(prefix + ".weight", {D, D, 3, 3, 3}, ParamGroup::Head, 27 * D, rng);
  w.value.scale_(0.05);
  for (std::size_t c = 0; c < D; ++c) {
    const std::size_t centre = (((c * D + c) * 3 + 1) * 3 + 1) * 3 + 1;
    w.value.set(centre, w.value.at(centre) + 1.0);
  }
  auto& b = add_param(prefix + ".bias", {D}, ParamGroup::Head, 27 * D, rng);
  b.value.scale_(0.05);
}

ModelGraph ModelGraph::build(const ModelConfig& cfg) {
  cfg.validate();
  ModelGraph g(cfg);
  std::mt19937_64 rng(cfg.seed);
  const auto& bb = cfg.backbone;
  const std::size_t D = bb.out_channels(), K = cfg.dims.n_classes, r = cfg.dims.reduce_dim, e = cfg.dims.embed_dim;
  const std::size_t S = bb.out_extent();

  auto add_backbone = [&](const std::string& prefix) {
    std::size_t in = bb.in_channels;
    for (std::size_t i = 0; i < bb.blocks.size(); ++i) {
      g.add_conv(prefix + ".conv" + std::to_string(i + 1), bb.blocks[i].out_channels, in, bb.blocks[i].kernel,
                 ParamGroup::Backbone, rng);
      in = bb.blocks[i].out_channels;
    }
  };
  auto add_encoding = [&](std::size_t n, std::size_t d) {
    auto p = encoding::EncodingLayerParams::random_init(n, d, cfg.dtype, rng);
    g.params_.push_back(std::make_unique<ad::Parameter>(encoding::kCodewordsName, std::move(p.codewords), ParamGroup::Head));
    g.params_.push_back(std::make_unique<ad::Parameter>(encoding::kSmoothingName, std::move(p.smoothing), ParamGroup::Head));
  };
  auto add_dep_head = [&] {
    add_encoding(cfg.dims.n_codewords, D);
    g.add_linear("dep.fc1_1", r, cfg.dims.n_codewords * D, ParamGroup::Head, rng);
    g.add_linear("dep.fc1_2", r, D, ParamGroup::Head, rng);
    g.add_linear("dep.fc2", e, r * r, ParamGroup::Head, rng);
  };
  const bool f3d = cfg.fusion.multiview_mode == angular::MultiviewMode::Filter3D;

  switch (cfg.arch) {
    case Arch::Baseline:
      add_backbone("backbone");
      if (f3d) g.add_view_filter("multiview.filter", rng);
      g.add_linear("classifier", K, D, ParamGroup::Classifier, rng);
      break;
    case Arch::DeepTEN:
      add_backbone("backbone");
      if (f3d) g.add_view_filter("multiview.filter", rng);
      g.add_conv("reduce", r, D, 1, ParamGroup::Head, rng);
      add_encoding(cfg.dims.deepten_codewords, r);
      g.add_linear("classifier", K, cfg.dims.deepten_codewords * r, ParamGroup::Classifier, rng);
      break;
    case Arch::BilinearCNN:
      add_backbone("backbone");
      if (f3d) g.add_view_filter("multiview.filter", rng);
      g.add_conv("reduce", r, D, 1, ParamGroup::Head, rng);
      g.add_linear("classifier", K, r * r, ParamGroup::Classifier, rng);
      break;
    case Arch::DEP:
      add_backbone("backbone");
      if (f3d) g.add_view_filter("multiview.filter", rng);
      add_dep_head();
      g.add_linear("classifier", K, e, ParamGroup::Classifier, rng);
      break;
    case Arch::DAIN:
      add_backbone("backbone_rgb");
      add_backbone("backbone_diff");
      if (f3d) {
        g.add_view_filter("multiview.filter_rgb", rng);
        g.add_view_filter("multiview.filter_fused", rng);
      }
      g.add_linear("dain.head_a.fc", K, D, ParamGroup::Classifier, rng);
      if (!cfg.dims.share_dain_heads) g.add_linear("dain.head_b.fc", K, D, ParamGroup::Classifier, rng);
      break;
    case Arch::TEAN:
      add_backbone("backbone_rgb");
      add_backbone("backbone_diff");
      if (f3d) {
        g.add_view_filter("multiview.filter_rgb", rng);
        g.add_view_filter("multiview.filter_fused", rng);
      }
      add_dep_head();
      g.add_linear("tean.fuse_fc", e, D * S * S, ParamGroup::Head, rng);
      g.add_linear("classifier", K, 2 * e, ParamGroup::Classifier, rng);
      break;
  }
  return g;
}

ModelGraph ModelGraph::from_checkpoint(const ad::Checkpoint& ck) {
  ModelGraph g = build(ModelConfig::from_config_map(ck.config));
  if (ck.tensors.size() != g.params_.size())
    throw ad::CheckpointError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                              std::to_string(g.params_.size()));
  for (auto& p : g.params_) {
    const Tensor& t = ck.tensor(p->name);
    if (t.shape() != p->value.shape() || t.dtype() != p->value.dtype())
      throw ad::CheckpointError("checkpoint tensor " + p->name + " has shape " + shape_str(t.shape()) + ", expected " +
                                shape_str(p->value.shape()));
    p->value = t;
  }
  return g;
}

ModelGraph ModelGraph::load(const std::filesystem::path& path) { return from_checkpoint(ad::load_checkpoint(path)); }

void ModelGraph::save(const std::filesystem::path& path) const {
  auto ps = parameters();
  ad::save_checkpoint(path, cfg_.to_config_map(), ps);
}

std::string ModelGraph::encode() const {
  auto ps = parameters();
  return ad::encode_checkpoint(cfg_.to_config_map(), ps);
}

std::vector<ad::Parameter*> ModelGraph::parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const ad::Parameter*> ModelGraph::parameters() const {
  std::vector<const ad::Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

ad::Parameter& ModelGraph::param(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw std::out_of_range("no parameter named " + name);
}

const ad::Parameter& ModelGraph::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return *p;
  throw std::out_of_range("no parameter named " + name);
}

bool ModelGraph::has_param(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p->name == name; });
}

std::size_t ModelGraph::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

void ModelGraph::set_normalization(std::vector<double> mean, std::vector<double> std) {
  ModelConfig c = cfg_;
  c.norm_mean = std::move(mean);
  c.norm_std = std::move(std);
  c.validate();
  cfg_ = std::move(c);
}

void ModelGraph::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

// ---------------------------------------------------------------------------

Var ModelGraph::P(Tape& tape, const std::string& name) { return tape.param(param(name)); }

Var ModelGraph::backbone(Tape& tape, Var x, const std::string& prefix) {
  const auto& blocks = cfg_.backbone.blocks;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = prefix + ".conv" + std::to_string(i + 1);
    x = ad::relu(ad::conv2d(x, P(tape, p + ".weight"), P(tape, p + ".bias"), blocks[i].stride, blocks[i].pad));
    if (blocks[i].pool > 1) x = ad::max_pool2d(x, blocks[i].pool, blocks[i].pool);
  }
  return x;
}

Var ModelGraph::linear(Tape& tape, Var x, const std::string& prefix) {
  return ad::linear(x, P(tape, prefix + ".weight"), P(tape, prefix + ".bias"));
}

Var ModelGraph::dep_embedding(Tape& tape, Var map) {
  Var enc = encoding::encoding_forward(map, P(tape, encoding::kCodewordsName), P(tape, encoding::kSmoothingName));
  Var tex = linear(tape, enc, "dep.fc1_1");
  Var spa = linear(tape, ad::global_avg_pool(map), "dep.fc1_2");
  Var bil = ad::l2_normalize(bilinear::bilinear_outer(tex, spa));
  return ad::relu(linear(tape, bil, "dep.fc2"));
}

ModelGraph::Maps ModelGraph::compute_maps(Tape& tape, const Batch& batch) {
  auto input = [&](const Tensor& t) {
    if (t.rank() != 4 || t.dim(1) != cfg_.backbone.in_channels || t.dim(2) != cfg_.backbone.input_size ||
        t.dim(3) != cfg_.backbone.input_size)
      throw ShapeError("model input must be [N," + std::to_string(cfg_.backbone.in_channels) + "," +
                       std::to_string(cfg_.backbone.input_size) + "," + std::to_string(cfg_.backbone.input_size) +
                       "], got " + shape_str(t.shape()));
    return tape.constant(t.dtype() == cfg_.dtype ? t : t.astype(cfg_.dtype));
  };
  Maps m;
  if (!is_two_stream(cfg_.arch)) {
    m.rgb = backbone(tape, input(batch.rgb), "backbone");
    return m;
  }
  if (!batch.diff) throw std::invalid_argument(std::string(to_string(cfg_.arch)) + " needs the differential image stream");
  if (batch.diff->shape() != batch.rgb.shape()) throw ShapeError("image and differential batches differ in shape");
  m.rgb = backbone(tape, input(batch.rgb), "backbone_rgb");
  Var d = backbone(tape, input(*batch.diff), "backbone_diff");
  m.fused = angular::fuse_features(m.rgb, d, cfg_.fusion.feature_combine);
  return m;
}

ForwardOut ModelGraph::head(Tape& tape, const Maps& maps, bool train, std::mt19937_64& rng) {
  const double p = cfg_.dims.dropout;
  ForwardOut out;
  switch (cfg_.arch) {
    case Arch::Baseline:
      out.features = ad::global_avg_pool(maps.rgb);
      out.logits = linear(tape, ad::dropout(out.features, p, train, rng), "classifier");
      break;
    case Arch::DeepTEN: {
      Var red = ad::conv2d(maps.rgb, P(tape, "reduce.weight"), P(tape, "reduce.bias"));
      out.features = encoding::encoding_forward(red, P(tape, encoding::kCodewordsName), P(tape, encoding::kSmoothingName));
      out.logits = linear(tape, ad::dropout(out.features, p, train, rng), "classifier");
      break;
    }
    case Arch::BilinearCNN: {
      Var red = ad::conv2d(maps.rgb, P(tape, "reduce.weight"), P(tape, "reduce.bias"));
      out.features = ad::l2_normalize(bilinear::pooled_bilinear(red));
      out.logits = linear(tape, ad::dropout(out.features, p, train, rng), "classifier");
      break;
    }
    case Arch::DEP:
      out.features = dep_embedding(tape, maps.rgb);
      out.logits = linear(tape, ad::dropout(out.features, p, train, rng), "classifier");
      break;
    case Arch::DAIN: {
      Var ga = ad::global_avg_pool(maps.rgb);
      Var gb = ad::global_avg_pool(maps.fused);
      out.features = ad::concat({ga, gb}, 1);
      Var la = linear(tape, ad::dropout(ga, p, train, rng), "dain.head_a.fc");
      Var lb = linear(tape, ad::dropout(gb, p, train, rng), cfg_.dims.share_dain_heads ? "dain.head_a.fc" : "dain.head_b.fc");
      out.head_logits = {la, lb};
      // log of the mean of the two softmaxes, via a stable log-sum-exp
      Var sa = ad::log_softmax(la), sb = ad::log_softmax(lb);
      Var mx = ad::maximum(sa, sb);
      Var lse = ad::log(ad::add(ad::exp(ad::sub(sa, mx)), ad::exp(ad::sub(sb, mx))));
      Var shift = tape.constant(Tensor::full(la.shape(), -std::log(2.0), cfg_.dtype));
      out.logits = ad::add(ad::add(mx, lse), shift);
      return out;
    }
    case Arch::TEAN: {
      Var tex = dep_embedding(tape, maps.rgb);
      Var ang = ad::relu(linear(tape, ad::flatten(maps.fused), "tean.fuse_fc"));
      out.features = ad::concat({tex, ang}, 1);
      out.logits = linear(tape, ad::dropout(out.features, p, train, rng), "classifier");
      break;
    }
  }
  out.head_logits = {out.logits};
  return out;
}

ForwardOut ModelGraph::forward(Tape& tape, const Batch& batch, bool train, std::mt19937_64& rng) {
  return head(tape, compute_maps(tape, batch), train, rng);
}

Var ModelGraph::combine_views(Tape& tape, const std::vector<Var>& maps, const std::string& filter_prefix) {
  Var stack = ad::stack(maps);
  if (cfg_.fusion.multiview_mode == angular::MultiviewMode::Filter3D)
    return angular::view_filter3d(stack, P(tape, filter_prefix + ".weight"), P(tape, filter_prefix + ".bias"));
  return angular::multiview_pool_features(stack);
}

ForwardOut ModelGraph::forward_multiview(Tape& tape, std::span<const Batch> views, bool train, std::mt19937_64& rng) {
  if (views.empty()) throw std::invalid_argument("forward_multiview: no views");
  if (cfg_.fusion.multiview_mode == angular::MultiviewMode::Voting)
    throw std::invalid_argument("forward_multiview: voting combines per-view predictions, not feature maps");
  std::vector<Var> rgb, fused;
  for (const auto& b : views) {
    Maps m = compute_maps(tape, b);
    rgb.push_back(m.rgb);
    if (m.fused.valid()) fused.push_back(m.fused);
  }
  Maps combined;
  if (is_two_stream(cfg_.arch)) {
    combined.rgb = combine_views(tape, rgb, "multiview.filter_rgb");
    combined.fused = combine_views(tape, fused, "multiview.filter_fused");
  } else {
    combined.rgb = combine_views(tape, rgb, "multiview.filter");
  }
  return head(tape, combined, train, rng);
}

Var ModelGraph::loss(const ForwardOut& out, std::span<const int> labels) const {
  if (out.head_logits.size() <= 1) return ad::cross_entropy(out.logits, labels);
  Var total = ad::cross_entropy(out.head_logits[0], labels);
  for (std::size_t i = 1; i < out.head_logits.size(); ++i) total = ad::add(total, ad::cross_entropy(out.head_logits[i], labels));
  return total;
}

}  // namespace dain::models
