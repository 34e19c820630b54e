#include "dain/gradsuite.hpp"

#include <random>
#include <vector>

namespace dain::models {

ModelConfig toy_config(Arch arch, std::uint64_t seed) {
  ModelConfig c;
  c.arch = arch;
  c.backbone = BackboneConfig::parse("1x8:3k3s1p1m2,4k3s1p1m1");
  c.dims.n_codewords = 3;
  c.dims.deepten_codewords = 4;
  c.dims.reduce_dim = 3;
  c.dims.embed_dim = 4;
  c.dims.n_classes = 3;
  c.fusion.n_views = 2;
  c.dtype = DType::f64;
  c.seed = seed;
  return c;
}

namespace {

Tensor random_images(std::size_t n, std::size_t c, std::size_t s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n * c * s * s);
  for (auto& x : v) x = u(rng);
  return Tensor::from({n, c, s, s}, v);
}

}  // namespace

ad::GradcheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t data_seed, const ad::GradcheckOptions& opts,
                                    std::optional<angular::MultiviewMode> multiview) {
  ModelConfig c = cfg;
  if (multiview) c.fusion.multiview_mode = *multiview;
  auto model = ModelGraph::build(c);
  std::mt19937_64 rng(data_seed);
  const std::size_t n = 2, ch = c.backbone.in_channels, s = c.backbone.input_size;
  const std::size_t n_views = multiview ? c.fusion.n_views : 1;
  std::vector<Batch> views;
  for (std::size_t v = 0; v < n_views; ++v) {
    Batch b{random_images(n, ch, s, rng), std::nullopt};
    if (is_two_stream(c.arch)) b.diff = random_images(n, ch, s, rng);
    views.push_back(std::move(b));
  }
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(rng() % c.dims.n_classes);

  auto program = [&](ad::Tape& tape) {
    std::mt19937_64 unused(0);
    auto out = multiview ? model.forward_multiview(tape, views, false, unused) : model.forward(tape, views[0], false, unused);
    return model.loss(out, labels);
  };
  auto params = model.parameters();
  return ad::finite_difference_gradcheck(program, params, opts);
}

}  // namespace dain::models
