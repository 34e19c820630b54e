#include "dain/data.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <regex>
#include <set>
#include <sstream>
#include <tuple>

#include "dain/angular.hpp"

namespace dain::data {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

double u01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double gauss(std::mt19937_64& rng) {
  double u = u01(rng);
  while (u <= 0.0) u = u01(rng);
  const double v = u01(rng);
  return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * kPi * v);
}

std::mt19937_64 stream(std::uint64_t seed, std::initializer_list<std::uint32_t> keys) {
  std::vector<std::uint32_t> v = {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  v.insert(v.end(), keys);
  std::seed_seq sq(v.begin(), v.end());
  return std::mt19937_64(sq);
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Sum of random plane waves with frequencies in [lo, hi] cycles per image, unit variance.
std::vector<double> band_noise(std::size_t S, double lo, double hi, std::mt19937_64& rng, std::size_t components = 12) {
  std::vector<double> f(S * S, 0.0);
  for (std::size_t k = 0; k < components; ++k) {
    const double fr = lo + (hi - lo) * u01(rng);
    const double ang = kPi * u01(rng);
    const double ph = 2.0 * kPi * u01(rng);
    const double kx = 2.0 * kPi * fr * std::cos(ang) / static_cast<double>(S);
    const double ky = 2.0 * kPi * fr * std::sin(ang) / static_cast<double>(S);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) f[y * S + x] += std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + ph);
  }
  const double norm = std::sqrt(static_cast<double>(components) / 2.0);
  for (auto& v : f) v /= norm;
  return f;
}

std::vector<double> stripes(std::size_t S, const SpatialSpec& sp, std::mt19937_64& rng) {
  const double fr = sp.freq_lo + (sp.freq_hi - sp.freq_lo) * u01(rng);
  const double ang = (sp.orientation_deg + 10.0 * (u01(rng) - 0.5)) * kPi / 180.0;
  const double ph = 2.0 * kPi * u01(rng);
  const double kx = 2.0 * kPi * fr * std::cos(ang) / static_cast<double>(S);
  const double ky = 2.0 * kPi * fr * std::sin(ang) / static_cast<double>(S);
  std::vector<double> f(S * S);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) f[y * S + x] = std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + ph);
  return f;
}

std::vector<double> blobs(std::size_t S, const SpatialSpec& sp, std::mt19937_64& rng) {
  const double fr = sp.freq_lo + (sp.freq_hi - sp.freq_lo) * u01(rng);
  const double radius = static_cast<double>(S) / (2.0 * fr);
  const auto count = static_cast<std::size_t>(std::max(1.0, std::round(fr * fr * 0.6)));
  std::vector<double> f(S * S, 0.0);
  const double Sd = static_cast<double>(S);
  for (std::size_t b = 0; b < count; ++b) {
    const double cx = Sd * u01(rng), cy = Sd * u01(rng);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        // periodic distance so the field tiles
        double dx = std::fabs(static_cast<double>(x) - cx), dy = std::fabs(static_cast<double>(y) - cy);
        dx = std::min(dx, Sd - dx);
        dy = std::min(dy, Sd - dy);
        f[y * S + x] += std::exp(-(dx * dx + dy * dy) / (2.0 * radius * radius));
      }
  }
  double mean = 0.0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  const auto [mn, mx] = std::minmax_element(f.begin(), f.end());
  const double range = std::max(*mx - *mn, 1e-12);
  for (auto& v : f) v = 2.0 * (v - mean) / range;
  return f;
}

std::string theta_tag(double theta) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%+03d", static_cast<int>(std::lround(theta)));
  return buf;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

int to_int(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    throw DataError("bad " + what + ": '" + s + "'");
  }
  if (used != s.size()) throw DataError("bad " + what + ": '" + s + "'");
  return v;
}

double to_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw DataError("bad " + what + ": '" + s + "'");
  }
  if (used != s.size()) throw DataError("bad " + what + ": '" + s + "'");
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(TextureFamily f) {
  switch (f) {
    case TextureFamily::BandNoise: return "band-noise";
    case TextureFamily::Stripes: return "stripes";
    case TextureFamily::Blobs: return "blobs";
  }
  return "?";
}

TextureFamily parse_texture_family(std::string_view s) {
  const auto l = lower(s);
  if (l == "band-noise" || l == "bandnoise") return TextureFamily::BandNoise;
  if (l == "stripes") return TextureFamily::Stripes;
  if (l == "blobs") return TextureFamily::Blobs;
  throw std::invalid_argument("unknown texture family: " + std::string(s));
}

std::string_view to_string(ImageFormat f) {
  switch (f) {
    case ImageFormat::F32Raw: return "f32";
    case ImageFormat::Png8: return "png8";
    case ImageFormat::Png16: return "png16";
  }
  return "?";
}

ImageFormat parse_image_format(std::string_view s) {
  const auto l = lower(s);
  if (l == "f32") return ImageFormat::F32Raw;
  if (l == "png8") return ImageFormat::Png8;
  if (l == "png16" || l == "png") return ImageFormat::Png16;
  throw std::invalid_argument("unknown image format: " + std::string(s));
}

void SynthClassSpec::validate() const {
  if (!(rho0 > 0.0)) throw std::invalid_argument("class " + std::to_string(class_id) + ": rho0 must be positive");
  if (rho0 + std::fabs(rho1) > 1.0) throw std::invalid_argument("class " + std::to_string(class_id) + ": rho0 + |rho1| must be <= 1");
  if (rho0 - std::fabs(rho1) < 0.0) throw std::invalid_argument("class " + std::to_string(class_id) + ": rho0 - |rho1| must be >= 0");
  if (!(spatial.freq_lo > 0.0) || spatial.freq_hi < spatial.freq_lo)
    throw std::invalid_argument("class " + std::to_string(class_id) + ": bad frequency band");
  if (spatial.contrast < 0.0 || spatial.contrast > 1.0)
    throw std::invalid_argument("class " + std::to_string(class_id) + ": contrast must be in [0, 1]");
  if (relief_amp < 0.0) throw std::invalid_argument("class " + std::to_string(class_id) + ": relief_amp must be >= 0");
}

void GeneratorConfig::validate() const {
  if (specs.empty()) throw std::invalid_argument("generator: no classes");
  std::set<int> ids;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    specs[i].validate();
    if (specs[i].class_id != static_cast<int>(i)) throw std::invalid_argument("generator: class ids must be 0..K-1 in order");
    ids.insert(specs[i].class_id);
  }
  if (samples_per_class == 0) throw std::invalid_argument("generator: samples_per_class must be >= 1");
  if (views_deg.empty()) throw std::invalid_argument("generator: no views");
  std::set<long> tags;
  for (double v : views_deg) {
    if (!(v > -90.0 && v < 90.0) || !(v + delta_deg > -90.0 && v + delta_deg < 90.0))
      throw std::invalid_argument("generator: view angles must lie in (-90, 90) degrees");
    if (std::fabs(v - std::round(v)) > 1e-9) throw std::invalid_argument("generator: view angles must be whole degrees");
    if (!tags.insert(std::lround(v)).second) throw std::invalid_argument("generator: duplicate view angle");
  }
  if (!(delta_deg > 0.0)) throw std::invalid_argument("generator: delta must be positive");
  if (image_size < 4) throw std::invalid_argument("generator: image_size must be >= 4");
  if (channels != 1 && channels != 3) throw std::invalid_argument("generator: channels must be 1 or 3");
  if (!(gain_lo > 0.0) || gain_hi < gain_lo) throw std::invalid_argument("generator: bad gain range");
  if (noise_sigma < 0.0) throw std::invalid_argument("generator: noise_sigma must be >= 0");
  if (illumination.empty() || illumination.find_first_of("_/\t\n") != std::string::npos)
    throw std::invalid_argument("generator: illumination tag must be non-empty without '_', '/' or whitespace");
}

std::vector<SynthClassSpec> angular_only_specs() {
  const double rho1[] = {-0.15, -0.05, 0.05, 0.15};
  const char* names[] = {"ang_neg_strong", "ang_neg_weak", "ang_pos_weak", "ang_pos_strong"};
  std::vector<SynthClassSpec> out;
  for (int k = 0; k < 4; ++k) {
    SynthClassSpec s;
    s.class_id = k;
    s.name = names[k];
    s.spatial = {TextureFamily::BandNoise, 2.0, 6.0, 0.0, 0.3};
    s.rho0 = 0.5;
    s.rho1 = rho1[k];
    s.theta0_deg = 90.0;
    out.push_back(s);
  }
  return out;
}

std::vector<SynthClassSpec> spatial_only_specs() {
  const std::vector<std::pair<std::string, SpatialSpec>> defs = {
      {"stripes_h_low", {TextureFamily::Stripes, 3.0, 4.0, 0.0, 0.35}},
      {"stripes_v_low", {TextureFamily::Stripes, 3.0, 4.0, 90.0, 0.35}},
      {"stripes_h_high", {TextureFamily::Stripes, 7.0, 8.0, 0.0, 0.35}},
      {"stripes_v_high", {TextureFamily::Stripes, 7.0, 8.0, 90.0, 0.35}},
      {"blobs_small", {TextureFamily::Blobs, 7.0, 8.0, 0.0, 0.35}},
      {"blobs_large", {TextureFamily::Blobs, 2.5, 3.0, 0.0, 0.35}},
      {"noise_low", {TextureFamily::BandNoise, 1.5, 3.0, 0.0, 0.35}},
      {"noise_high", {TextureFamily::BandNoise, 8.0, 11.0, 0.0, 0.35}},
  };
  std::vector<SynthClassSpec> out;
  for (std::size_t k = 0; k < defs.size(); ++k) {
    SynthClassSpec s;
    s.class_id = static_cast<int>(k);
    s.name = defs[k].first;
    s.spatial = defs[k].second;
    s.rho0 = 0.5;
    s.rho1 = 0.0;
    out.push_back(s);
  }
  return out;
}

std::vector<SynthClassSpec> mixed_specs() {
  auto all = spatial_only_specs();
  std::vector<SynthClassSpec> out = {all[0], all[5], all[7], all[3]};
  const double rho1[] = {0.1, -0.1, 0.2, -0.2};
  for (int k = 0; k < 4; ++k) {
    out[k].class_id = k;
    out[k].rho1 = rho1[k];
    out[k].relief_amp = 0.05;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> stratified_gains(const GeneratorConfig& cfg, int class_id) {
  const std::size_t n = cfg.samples_per_class;
  auto rng = stream(cfg.seed, {static_cast<std::uint32_t>(class_id), 3u});
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i-- > 1;) std::swap(perm[i], perm[rng() % (i + 1)]);
  const double llo = std::log(cfg.gain_lo), lhi = std::log(cfg.gain_hi);
  std::vector<double> g(n);
  for (std::size_t s = 0; s < n; ++s)
    g[s] = std::exp(llo + (lhi - llo) * (static_cast<double>(perm[s]) + u01(rng)) / static_cast<double>(n));
  return g;
}

SampleRealization realize_sample(const SynthClassSpec& spec, const GeneratorConfig& cfg, std::size_t sample_index,
                                 double gain) {
  const std::size_t S = cfg.image_size;
  auto rng = stream(cfg.seed, {static_cast<std::uint32_t>(spec.class_id), static_cast<std::uint32_t>(sample_index), 1u});
  std::vector<double> f;
  switch (spec.spatial.family) {
    case TextureFamily::BandNoise: f = band_noise(S, spec.spatial.freq_lo, spec.spatial.freq_hi, rng); break;
    case TextureFamily::Stripes: f = stripes(S, spec.spatial, rng); break;
    case TextureFamily::Blobs: f = blobs(S, spec.spatial, rng); break;
  }
  SampleRealization r;
  r.gain = gain;
  r.texture = Tensor({S, S}, DType::f64);
  auto T = r.texture.data<double>();
  double mean = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) mean += (T[i] = std::max(1.0 + spec.spatial.contrast * f[i], 0.05));
  mean /= static_cast<double>(f.size());
  for (auto& v : T) v /= mean;

  auto hrng = stream(cfg.seed, {static_cast<std::uint32_t>(spec.class_id), static_cast<std::uint32_t>(sample_index), 4u});
  const auto h = band_noise(S, 2.0, 6.0, hrng);
  r.height_dx = Tensor({S, S}, DType::f64);
  auto d = r.height_dx.data<double>();
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) d[y * S + x] = 0.5 * (h[y * S + (x + 1) % S] - h[y * S + (x + S - 1) % S]);
  return r;
}

Tensor render_view(const SynthClassSpec& spec, const SampleRealization& r, double theta_deg, double noise_sigma,
                   std::size_t channels, std::mt19937_64& noise_rng, std::size_t* clamped) {
  const std::size_t H = r.texture.dim(0), W = r.texture.dim(1);
  const double th = theta_deg * kPi / 180.0;
  const double factor = spec.rho0 + spec.rho1 * std::cos(th - spec.theta0_deg * kPi / 180.0);
  const double shade = spec.relief_amp * std::tan(th);
  auto T = r.texture.data<double>();
  auto D = r.height_dx.data<double>();
  Tensor out({channels, H, W}, DType::f64);
  auto o = out.data<double>();
  std::size_t nclamp = 0;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < H * W; ++i) {
      double v = r.gain * (T[i] * factor + shade * D[i]);
      if (noise_sigma > 0.0) v += noise_sigma * gauss(noise_rng);
      if (v < 0.0 || v > 1.0) {
        ++nclamp;
        v = std::clamp(v, 0.0, 1.0);
      }
      o[c * H * W + i] = v;
    }
  if (clamped) *clamped += nclamp;
  return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s == "unassigned") return Split::Unassigned;
  throw DataError("unknown split: " + std::string(s));
}

void DatasetManifest::validate() const {
  std::set<std::tuple<std::string, int, std::string>> keys;
  std::map<std::string, std::pair<Split, int>> per_sample;
  for (const auto& r : records) {
    if (r.class_id < 0) throw DataError("negative class id for " + r.path);
    if (!(r.delta_deg > 0.0)) throw DataError("non-positive delta for " + r.path);
    if (r.sample_id.empty()) throw DataError("empty sample id for " + r.path);
    if (!keys.emplace(r.sample_id, r.view_index, r.illumination).second)
      throw DataError("duplicate record (" + r.sample_id + ", view " + std::to_string(r.view_index) + ", " +
                      r.illumination + ")");
    auto [it, fresh] = per_sample.try_emplace(r.sample_id, r.split, r.class_id);
    if (!fresh) {
      if (it->second.first != r.split) throw DataError("sample " + r.sample_id + " is spread over several splits");
      if (it->second.second != r.class_id) throw DataError("sample " + r.sample_id + " has several class ids");
    }
  }
}

void DatasetManifest::sort() {
  std::stable_sort(records.begin(), records.end(), [](const ManifestRecord& a, const ManifestRecord& b) {
    return std::tie(a.class_id, a.sample_id, a.view_index, a.illumination) <
           std::tie(b.class_id, b.sample_id, b.view_index, b.illumination);
  });
}

std::vector<const ManifestRecord*> DatasetManifest::select(Split s) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(&r);
  return out;
}

std::size_t DatasetManifest::n_classes() const {
  int mx = -1;
  for (const auto& r : records) mx = std::max(mx, r.class_id);
  return static_cast<std::size_t>(mx + 1);
}

std::vector<std::string> DatasetManifest::sample_ids() const {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.sample_id);
  return {s.begin(), s.end()};
}

std::string partner_path(const std::string& base_path) {
  const auto pos = base_path.rfind("_base");
  if (pos == std::string::npos) throw DataError("not a base-view path: " + base_path);
  return base_path.substr(0, pos) + "_delta" + base_path.substr(pos + 5);
}

std::string escape_field(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_field(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) throw DataError("dangling escape in manifest field");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      default: throw DataError(std::string("unknown escape \\") + s[i]);
    }
  }
  return out;
}

void write_manifest(const fs::path& file, const DatasetManifest& m) {
  m.validate();
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  for (const auto& r : m.records) {
    out << escape_field(r.path) << '\t' << r.class_id << '\t' << escape_field(r.sample_id) << '\t' << r.view_index
        << '\t' << fmt_double(r.theta_deg) << '\t' << fmt_double(r.delta_deg) << '\t' << escape_field(r.illumination)
        << '\t' << to_string(r.split) << '\n';
  }
  if (!out) throw DataError("write failed: " + file.string());
}

DatasetManifest read_manifest(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot read " + file.string());
  DatasetManifest m;
  m.root = file.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 8)
      throw DataError(file.string() + ":" + std::to_string(lineno) + ": expected 8 fields, got " + std::to_string(f.size()));
    ManifestRecord r;
    r.path = unescape_field(f[0]);
    r.class_id = to_int(f[1], "class_id");
    r.sample_id = unescape_field(f[2]);
    r.view_index = to_int(f[3], "view_index");
    r.theta_deg = to_double(f[4], "theta_deg");
    r.delta_deg = to_double(f[5], "delta_deg");
    r.illumination = unescape_field(f[6]);
    r.split = parse_split(f[7]);
    m.records.push_back(std::move(r));
  }
  m.validate();
  return m;
}

GenerateResult generate_synthetic(const GeneratorConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  GenerateResult res;
  res.manifest.root = out_dir;
  const char* ext = cfg.format == ImageFormat::F32Raw ? ".f32" : ".png";
  for (const auto& spec : cfg.specs) {
    const auto gains = stratified_gains(cfg, spec.class_id);
    const std::string cname = spec.name.empty() ? "class" + std::to_string(spec.class_id) : spec.name;
    for (std::size_t s = 0; s < cfg.samples_per_class; ++s) {
      char sdir[32];
      std::snprintf(sdir, sizeof sdir, "sample_%02zu", s + 1);
      const std::string rel_dir = cname + "/" + sdir;
      fs::create_directories(out_dir / rel_dir);
      const auto real = realize_sample(spec, cfg, s, gains[s]);
      for (std::size_t v = 0; v < cfg.views_deg.size(); ++v) {
        const double th = cfg.views_deg[v];
        const std::string stem = rel_dir + "/theta_" + theta_tag(th);
        const std::string base = stem + "_base_" + cfg.illumination + ext;
        for (std::uint32_t which = 0; which < 2; ++which) {
          auto nrng = stream(cfg.seed, {static_cast<std::uint32_t>(spec.class_id), static_cast<std::uint32_t>(s), 2u,
                                        static_cast<std::uint32_t>(v), which});
          Tensor img = render_view(spec, real, th + (which ? cfg.delta_deg : 0.0), cfg.noise_sigma, cfg.channels, nrng,
                                   &res.clamped_pixels);
          res.total_pixels += img.numel();
          write_image(out_dir / (which ? partner_path(base) : base), img.astype(DType::f32), cfg.format);
        }
        ManifestRecord r;
        r.path = base;
        r.class_id = spec.class_id;
        r.sample_id = rel_dir;
        r.view_index = static_cast<int>(v);
        r.theta_deg = th;
        r.delta_deg = cfg.delta_deg;
        r.illumination = cfg.illumination;
        res.manifest.records.push_back(std::move(r));
      }
    }
  }
  if (static_cast<double>(res.clamped_pixels) > 0.01 * static_cast<double>(res.total_pixels))
    throw DataError("generator clamped " + std::to_string(res.clamped_pixels) + " of " +
                    std::to_string(res.total_pixels) + " pixels (> 1%); reduce gain or contrast");
  res.manifest.sort();
  write_manifest(out_dir / "manifest.tsv", res.manifest);
  return res;
}

// ---------------------------------------------------------------------------
// Images

namespace {

void write_raw(const fs::path& path, const Tensor& image) {
  const Tensor f = image.dtype() == DType::f32 ? image : image.astype(DType::f32);
  auto d = f.data<float>();
  std::string bytes(d.size() * 4, '\0');
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(d[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  std::ofstream hdr(path.string() + ".hdr");
  hdr << "f32 " << image.dim(0) << ' ' << image.dim(1) << ' ' << image.dim(2) << '\n';
  if (!out || !hdr) throw DataError("cannot write " + path.string());
}

Tensor read_raw(const fs::path& path) {
  std::ifstream hdr(path.string() + ".hdr");
  std::string tag;
  std::size_t C = 0, H = 0, W = 0;
  if (!(hdr >> tag >> C >> H >> W) || tag != "f32" || C == 0 || H == 0 || W == 0)
    throw DataError("missing or bad header for " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != C * H * W * 4) throw DataError("size mismatch in " + path.string());
  Tensor t({C, H, W}, DType::f32);
  auto d = t.data<float>();
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    d[i] = std::bit_cast<float>(u);
  }
  return t;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

void write_png(const fs::path& path, const Tensor& image, bool sixteen) {
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (C != 1 && C != 3) throw DataError("png output needs 1 or 3 channels");
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng init failed");
  }
  const std::size_t bpc = sixteen ? 2 : 1;
  std::vector<unsigned char> rows(H * W * C * bpc);
  const double maxv = sixteen ? 65535.0 : 255.0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        const double v = std::clamp(image.at((c * H + y) * W + x), 0.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround(v * maxv));
        unsigned char* p = &rows[((y * W + x) * C + c) * bpc];
        if (sixteen) {
          p[0] = static_cast<unsigned char>(q >> 8);
          p[1] = static_cast<unsigned char>(q & 0xff);
        } else {
          p[0] = static_cast<unsigned char>(q);
        }
      }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng write error: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), sixteen ? 16 : 8,
               C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < H; ++y) png_write_row(png, &rows[y * W * C * bpc]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor read_png(const fs::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot read " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng read error: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t W = png_get_image_width(png, info), H = png_get_image_height(png, info);
  const std::size_t C = png_get_channels(png, info);
  const int depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<unsigned char> buf(rowbytes * H);
  for (std::size_t y = 0; y < H; ++y) png_read_row(png, &buf[y * rowbytes], nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor t({C, H, W}, DType::f32);
  auto d = t.data<float>();
  const double maxv = depth == 16 ? 65535.0 : 255.0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        const unsigned char* p = &buf[y * rowbytes + (x * C + c) * (depth == 16 ? 2 : 1)];
        const unsigned q = depth == 16 ? (static_cast<unsigned>(p[0]) << 8 | p[1]) : p[0];
        d[(c * H + y) * W + x] = static_cast<float>(q / maxv);
      }
  return t;
}

}  // namespace

void write_image(const fs::path& path, const Tensor& image, ImageFormat png_depth) {
  if (image.rank() != 3) throw ShapeError("write_image: expected [C,H,W], got " + shape_str(image.shape()));
  if (path.extension() == ".f32") return write_raw(path, image);
  if (path.extension() == ".png") return write_png(path, image, png_depth != ImageFormat::Png8);
  throw DataError("unsupported image extension: " + path.string());
}

Tensor read_image(const fs::path& path) {
  if (path.extension() == ".f32") return read_raw(path);
  if (path.extension() == ".png") return read_png(path);
  throw DataError("unsupported image extension: " + path.string());
}

// ---------------------------------------------------------------------------

IngestResult ingest_gtos(const fs::path& root, const GtosLayout& layout) {
  static const std::regex sample_re(R"(^sample_(\d+)$)");
  static const std::regex file_re(R"(^theta_([+-]\d{2})_(base|delta)_([A-Za-z0-9]+)\.(png|f32)$)");
  IngestResult res;
  res.manifest.root = root;
  if (!fs::exists(root)) throw DataError("no such directory: " + root.string());

  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());

  for (const auto& cdir : class_dirs) {
    const int class_id = static_cast<int>(res.class_names.size());
    const std::string cname = cdir.filename().string();
    bool any = false;
    std::vector<fs::path> sample_dirs;
    for (const auto& e : fs::directory_iterator(cdir)) {
      if (!e.is_directory()) continue;
      if (!std::regex_match(e.path().filename().string(), sample_re)) {
        res.errors.push_back("unparseable sample directory: " + fs::relative(e.path(), root).string());
        continue;
      }
      sample_dirs.push_back(e.path());
    }
    std::sort(sample_dirs.begin(), sample_dirs.end());
    for (const auto& sdir : sample_dirs) {
      const std::string sample_id = cname + "/" + sdir.filename().string();
      // (theta, illum) -> {base path, delta present}
      std::map<std::pair<int, std::string>, std::pair<std::string, bool>> views;
      std::set<std::pair<int, std::string>> deltas;
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(sdir))
        if (e.is_regular_file() && e.path().extension() != ".hdr") files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) {
        std::smatch m;
        const std::string name = f.filename().string();
        if (!std::regex_match(name, m, file_re)) {
          res.errors.push_back("unparseable file name: " + fs::relative(f, root).string());
          continue;
        }
        const int theta = std::stoi(m[1]);
        const std::string illum = m[3];
        if (m[2] == "base")
          views[{theta, illum}] = {fs::relative(f, root).generic_string(), false};
        else
          deltas.insert({theta, illum});
      }
      for (const auto& d : deltas)
        if (!views.count(d))
          res.warnings.push_back(sample_id + ": differential view at theta " + std::to_string(d.first) + " (" + d.second +
                                 ") has no base image");
      std::set<int> thetas;
      for (const auto& [key, v] : views) thetas.insert(key.first);
      const std::vector<int> order(thetas.begin(), thetas.end());
      for (auto& [key, v] : views) {
        if (!deltas.count(key)) {
          res.warnings.push_back(sample_id + ": view at theta " + std::to_string(key.first) + " (" + key.second +
                                 ") is missing its differential partner");
          continue;
        }
        ManifestRecord r;
        r.path = v.first;
        r.class_id = class_id;
        r.sample_id = sample_id;
        r.view_index = static_cast<int>(std::lower_bound(order.begin(), order.end(), key.first) - order.begin());
        r.theta_deg = key.first;
        r.delta_deg = layout.delta_deg;
        r.illumination = key.second;
        res.manifest.records.push_back(std::move(r));
        any = true;
      }
    }
    if (any) res.class_names.push_back(cname);
  }
  res.manifest.sort();
  res.manifest.validate();
  return res;
}

// ---------------------------------------------------------------------------

std::vector<SplitAssignment> make_splits(const DatasetManifest& m, double train_fraction, std::size_t n_splits,
                                         std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train_fraction must be in (0, 1)");
  if (n_splits == 0) throw std::invalid_argument("n_splits must be >= 1");
  m.validate();
  std::map<int, std::vector<std::string>> by_class;
  {
    std::map<std::string, int> cls;
    for (const auto& r : m.records) cls[r.sample_id] = r.class_id;
    for (const auto& [sid, c] : cls) by_class[c].push_back(sid);
  }
  for (const auto& [c, ids] : by_class)
    if (ids.size() < 2)
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(ids.size()) + " sample(s); need at least 2");

  std::vector<SplitAssignment> out;
  for (std::size_t i = 0; i < n_splits; ++i) {
    std::mt19937_64 rng(seed + i);
    SplitAssignment a;
    for (const auto& [c, sorted_ids] : by_class) {
      auto ids = sorted_ids;
      for (std::size_t k = ids.size(); k-- > 1;) std::swap(ids[k], ids[rng() % (k + 1)]);
      const double want = std::ceil(train_fraction * static_cast<double>(ids.size()) - 1e-9);
      const std::size_t n_train = std::clamp<std::size_t>(static_cast<std::size_t>(want), 1, ids.size() - 1);
      for (std::size_t k = 0; k < ids.size(); ++k) a[ids[k]] = k < n_train ? Split::Train : Split::Test;
    }
    out.push_back(std::move(a));
  }
  return out;
}

DatasetManifest apply_split(const DatasetManifest& m, const SplitAssignment& a) {
  DatasetManifest out = m;
  for (auto& r : out.records) {
    auto it = a.find(r.sample_id);
    r.split = it == a.end() ? Split::Unassigned : it->second;
  }
  out.validate();
  return out;
}

void write_split(const fs::path& file, const SplitAssignment& a) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  for (const auto& [sid, s] : a) out << escape_field(sid) << '\t' << to_string(s) << '\n';
}

SplitAssignment read_split(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot read " + file.string());
  SplitAssignment a;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 2) throw DataError(file.string() + ": expected 2 fields per line");
    a[unescape_field(f[0])] = parse_split(f[1]);
  }
  return a;
}

// ---------------------------------------------------------------------------

std::vector<Item> load_items(const DatasetManifest& m, std::optional<Split> split) {
  std::vector<Item> out;
  for (const auto& r : m.records) {
    if (split && r.split != *split) continue;
    Item it;
    it.class_id = r.class_id;
    it.sample_id = r.sample_id;
    it.view_index = r.view_index;
    it.theta_deg = r.theta_deg;
    it.image = read_image(m.root / r.path);
    const fs::path partner = m.root / partner_path(r.path);
    if (!fs::exists(partner)) throw DataError("missing differential partner " + partner.string());
    it.diff = angular::differential_image(it.image, read_image(partner));
    out.push_back(std::move(it));
  }
  return out;
}

ChannelStats channel_stats(const std::vector<Item>& items) {
  if (items.empty()) throw DataError("channel_stats: no items");
  const std::size_t C = items[0].image.dim(0);
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  std::size_t count = 0;
  for (const auto& it : items) {
    if (it.image.dim(0) != C) throw DataError("channel_stats: channel count varies");
    const std::size_t hw = it.image.numel() / C;
    auto d = it.image.data<float>();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = d[c * hw + i];
        sum[c] += v;
        sq[c] += v * v;
      }
    count += hw;
  }
  ChannelStats s;
  for (std::size_t c = 0; c < C; ++c) {
    const double mean = sum[c] / static_cast<double>(count);
    s.mean.push_back(mean);
    s.std.push_back(std::sqrt(std::max(sq[c] / static_cast<double>(count) - mean * mean, 1e-12)));
  }
  return s;
}

void AugmentConfig::validate(std::size_t image_size) const {
  if (stretch_pct < 0.0 || stretch_pct >= 100.0) throw std::invalid_argument("stretch_pct must be in [0, 100)");
  if (flip_prob < 0.0 || flip_prob > 1.0) throw std::invalid_argument("flip_prob must be in [0, 1]");
  const auto min_extent = static_cast<std::size_t>(
      std::lround(static_cast<double>(image_size) * (1.0 - stretch_pct / 100.0)));
  if (crop == 0 || crop > min_extent)
    throw std::invalid_argument("crop " + std::to_string(crop) + " exceeds the smallest stretched extent " +
                                std::to_string(min_extent));
  if (norm.mean.size() != norm.std.size()) throw std::invalid_argument("normalization stats length mismatch");
}

namespace {

// Bilinear resample of [C,H,W] to [C,nh,nw], pixel-centre aligned.
Tensor resize(const Tensor& img, std::size_t nh, std::size_t nw) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (nh == H && nw == W) return img;
  Tensor out({C, nh, nw}, DType::f32);
  auto s = img.data<float>();
  auto o = out.data<float>();
  const double sy = static_cast<double>(H) / static_cast<double>(nh), sx = static_cast<double>(W) / static_cast<double>(nw);
  for (std::size_t y = 0; y < nh; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < nw; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = s.data() + c * H * W;
        const double v = (1 - wy) * ((1 - wx) * p[y0 * W + x0] + wx * p[y0 * W + x1]) +
                         wy * ((1 - wx) * p[y1 * W + x0] + wx * p[y1 * W + x1]);
        o[(c * nh + y) * nw + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

struct Geometry {
  std::size_t h = 0, w = 0, oy = 0, ox = 0;
  bool flip_h = false, flip_v = false;
};

Tensor apply(const Tensor& img, const Geometry& g, std::size_t crop, const ChannelStats& norm, bool shift_mean) {
  Tensor src = img.dtype() == DType::f32 ? img : img.astype(DType::f32);
  src = resize(src, g.h, g.w);
  const std::size_t C = src.dim(0);
  if (!norm.std.empty() && norm.std.size() != C) throw ShapeError("normalization stats do not match channel count");
  Tensor out({C, crop, crop}, DType::f32);
  auto s = src.data<float>();
  auto o = out.data<float>();
  for (std::size_t c = 0; c < C; ++c) {
    const double mean = norm.mean.empty() || !shift_mean ? 0.0 : norm.mean[c];
    const double sd = norm.std.empty() ? 1.0 : norm.std[c];
    for (std::size_t y = 0; y < crop; ++y)
      for (std::size_t x = 0; x < crop; ++x) {
        const std::size_t yy = g.oy + (g.flip_v ? crop - 1 - y : y);
        const std::size_t xx = g.ox + (g.flip_h ? crop - 1 - x : x);
        o[(c * crop + y) * crop + x] = static_cast<float>((s[(c * g.h + yy) * g.w + xx] - mean) / sd);
      }
  }
  return out;
}

}  // namespace

ImagePair augment(const Tensor& image, const Tensor& diff, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (image.rank() != 3 || image.shape() != diff.shape())
    throw ShapeError("augment: image pair shapes " + shape_str(image.shape()) + " / " + shape_str(diff.shape()));
  const double p = cfg.stretch_pct / 100.0;
  const double sy = 1.0 + p * (2.0 * u01(rng) - 1.0);
  const double sx = 1.0 + p * (2.0 * u01(rng) - 1.0);
  Geometry g;
  g.h = static_cast<std::size_t>(std::lround(static_cast<double>(image.dim(1)) * sy));
  g.w = static_cast<std::size_t>(std::lround(static_cast<double>(image.dim(2)) * sx));
  if (g.h < cfg.crop || g.w < cfg.crop) throw ShapeError("augment: crop larger than stretched image");
  g.oy = static_cast<std::size_t>(u01(rng) * static_cast<double>(g.h - cfg.crop + 1));
  g.ox = static_cast<std::size_t>(u01(rng) * static_cast<double>(g.w - cfg.crop + 1));
  g.flip_h = u01(rng) < cfg.flip_prob;
  g.flip_v = u01(rng) < cfg.flip_prob;
  return {apply(image, g, cfg.crop, cfg.norm, true), apply(diff, g, cfg.crop, cfg.norm, false)};
}

ImagePair eval_transform(const Tensor& image, const Tensor& diff, const AugmentConfig& cfg) {
  if (image.rank() != 3 || image.shape() != diff.shape())
    throw ShapeError("eval_transform: image pair shapes " + shape_str(image.shape()) + " / " + shape_str(diff.shape()));
  Geometry g;
  g.h = image.dim(1);
  g.w = image.dim(2);
  if (g.h < cfg.crop || g.w < cfg.crop) throw ShapeError("eval_transform: crop larger than image");
  g.oy = (g.h - cfg.crop) / 2;
  g.ox = (g.w - cfg.crop) / 2;
  return {apply(image, g, cfg.crop, cfg.norm, true), apply(diff, g, cfg.crop, cfg.norm, false)};
}

}  // namespace dain::data
