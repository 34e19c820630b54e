#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "../common/oracles.hpp"
#include "dain/encoding.hpp"
#include "dain/gradsuite.hpp"
#include "dain/models.hpp"

using namespace dain;
using namespace dain::ad;
using namespace dain::models;

namespace {

ModelConfig default_cfg(Arch a) {
  ModelConfig c;
  c.arch = a;
  return c;
}

Batch random_batch(const ModelConfig& c, std::size_t n, std::mt19937_64& rng) {
  const auto s = c.backbone.input_size;
  Batch b{oracle::tensor({n, c.backbone.in_channels, s, s}, rng, 0, 1), std::nullopt};
  if (is_two_stream(c.arch)) b.diff = oracle::tensor({n, c.backbone.in_channels, s, s}, rng, -0.1, 0.1);
  return b;
}

Tensor eval_logits(ModelGraph& m, const Batch& b) {
  Tape t(false);
  std::mt19937_64 rng(0);
  return m.forward(t, b, false, rng).logits.value();
}

Tensor softmax_rows(const Tensor& x) {
  Tape t(false);
  return softmax(t.constant(x)).value();
}

}  // namespace

TEST_CASE("architecture tags") {
  for (auto a : kAllArchs) CHECK(parse_arch(to_string(a)) == a);
  CHECK(parse_arch("DEP") == Arch::DEP);
  CHECK(parse_arch("deep-ten") == Arch::DeepTEN);
  CHECK_THROWS_AS(parse_arch("resnet"), std::invalid_argument);
  CHECK(is_two_stream(Arch::DAIN));
  CHECK(is_two_stream(Arch::TEAN));
  CHECK_FALSE(is_two_stream(Arch::DEP));
}

TEST_CASE("backbone config") {
  auto b = BackboneConfig::default_config();
  CHECK(b.input_size == 56);
  CHECK(b.out_channels() == 16);
  CHECK(b.out_extent() == 7);
  CHECK(BackboneConfig::parse(b.to_string()).to_string() == b.to_string());
  CHECK(BackboneConfig::parse("1x28:8k3s1p1m2,16k3s1p1m2,16k3s1p1m1").out_extent() == 7);
  CHECK_THROWS(BackboneConfig::parse("1x8:4k3s1p1m2,4k3s1p1m2").validate());  // final extent 2
  CHECK_THROWS(BackboneConfig::parse("garbage"));
}

TEST_CASE("parameter counts match hand counts") {
  // backbone 1->8->16->16, 3x3 kernels: 80 + 1168 + 2320
  const std::size_t bb = 3568;
  const std::map<Arch, std::size_t> expected = {
      {Arch::Baseline, bb + 68},
      {Arch::DeepTEN, bb + 272 + (32 * 16 + 32) + (4 * 512 + 4)},
      {Arch::BilinearCNN, bb + 272 + (4 * 256 + 4)},
      {Arch::DEP, bb + (8 * 16 + 8) + (16 * 128 + 16) + (16 * 16 + 16) + (32 * 256 + 32) + (4 * 32 + 4)},
      {Arch::DAIN, 2 * bb + 2 * 68},
      {Arch::TEAN, 2 * bb + 10696 + (32 * 784 + 32) + (4 * 64 + 4)},
  };
  for (auto a : kAllArchs) {
    CAPTURE(to_string(a));
    const auto c = default_cfg(a);
    auto m = ModelGraph::build(c);
    CHECK(m.parameter_count() == expected.at(a));
    CHECK(expected_parameter_count(c) == expected.at(a));
  }
  auto c = default_cfg(Arch::DAIN);
  c.dims.share_dain_heads = true;
  CHECK(ModelGraph::build(c).parameter_count() == 2 * bb + 68);
  c.fusion.multiview_mode = angular::MultiviewMode::Filter3D;
  CHECK(ModelGraph::build(c).parameter_count() == 2 * bb + 68 + 2 * (27 * 256 + 16));
  CHECK(expected_parameter_count(c) == 2 * bb + 68 + 2 * (27 * 256 + 16));
}

TEST_CASE("parameter names are unique and backbones share shapes") {
  auto base = ModelGraph::build(default_cfg(Arch::Baseline));
  auto dep = ModelGraph::build(default_cfg(Arch::DEP));
  for (const auto* p : base.parameters())
    if (p->name.rfind("backbone.", 0) == 0) CHECK(dep.param(p->name).value.shape() == p->value.shape());
  for (auto a : kAllArchs) {
    auto m = ModelGraph::build(default_cfg(a));
    std::set<std::string> names;
    for (const auto* p : m.parameters()) CHECK(names.insert(p->name).second);
  }
  CHECK(dep.has_param(encoding::kCodewordsName));
  CHECK(dep.has_param(encoding::kSmoothingName));
  CHECK(dep.has_param("dep.fc1_1.weight"));
  CHECK(dep.has_param("dep.fc1_2.weight"));
  CHECK(dep.has_param("dep.fc2.weight"));
}

TEST_CASE("initialization is seeded and bounded") {
  auto c = default_cfg(Arch::TEAN);
  c.seed = 5;
  auto a = ModelGraph::build(c), b = ModelGraph::build(c);
  CHECK(a.encode() == b.encode());
  c.seed = 6;
  CHECK(ModelGraph::build(c).encode() != a.encode());
  const double lim = 1.0 / std::sqrt(9.0);
  for (double v : a.param("backbone_rgb.conv1.weight").value.to_vector()) CHECK(std::fabs(v) <= lim);
  for (double v : a.param(encoding::kSmoothingName).value.to_vector()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("forward shapes for every architecture") {
  std::mt19937_64 rng(1);
  for (auto a : kAllArchs) {
    CAPTURE(to_string(a));
    auto c = toy_config(a, 3);
    auto m = ModelGraph::build(c);
    const auto b = random_batch(c, 3, rng);
    Tape t;
    std::mt19937_64 drng(2);
    auto out = m.forward(t, b, true, drng);
    CHECK(out.logits.shape() == Shape{3, c.dims.n_classes});
    CHECK(out.features.shape() == Shape{3, feature_dim(c)});
    CHECK(out.logits.value().all_finite());
  }
  auto c = toy_config(Arch::DAIN, 0);
  auto m = ModelGraph::build(c);
  Batch missing{oracle::tensor({1, 1, 8, 8}, rng), std::nullopt};
  Tape t;
  std::mt19937_64 drng(0);
  CHECK_THROWS(m.forward(t, missing, false, drng));
  Batch wrong{oracle::tensor({1, 1, 9, 9}, rng), std::nullopt};
  auto base = ModelGraph::build(toy_config(Arch::Baseline, 0));
  CHECK_THROWS_AS(base.forward(t, wrong, false, drng), ShapeError);
}

TEST_CASE("feature lengths") {
  CHECK(feature_dim(default_cfg(Arch::DEP)) == 32);
  CHECK(feature_dim(default_cfg(Arch::TEAN)) == 64);
}

TEST_CASE("TEAN with a zero differential stream stays finite") {
  std::mt19937_64 rng(2);
  auto c = default_cfg(Arch::TEAN);
  auto m = ModelGraph::build(c);
  auto b = random_batch(c, 2, rng);
  b.diff = Tensor::zeros(b.rgb.shape(), DType::f32);
  CHECK(eval_logits(m, b).all_finite());
}

TEST_CASE("DAIN output is the mean of its two head softmaxes") {
  std::mt19937_64 rng(3);
  auto c = toy_config(Arch::DAIN, 4);
  auto m = ModelGraph::build(c);
  const auto b = random_batch(c, 3, rng);
  const Tensor probs = softmax_rows(eval_logits(m, b));

  // recompute both paths from the raw parameters
  Tape t(false);
  auto P = [&](const std::string& n) { return t.constant(m.param(n).value); };
  auto bb = [&](const Tensor& x, const std::string& pre) {
    Var h = t.constant(x);
    for (std::size_t i = 0; i < c.backbone.blocks.size(); ++i) {
      const auto& blk = c.backbone.blocks[i];
      const std::string p = pre + ".conv" + std::to_string(i + 1);
      h = relu(conv2d(h, P(p + ".weight"), P(p + ".bias"), blk.stride, blk.pad));
      if (blk.pool > 1) h = max_pool2d(h, blk.pool, blk.pool);
    }
    return h;
  };
  Var rgb = bb(b.rgb, "backbone_rgb");
  Var fused = add(rgb, bb(*b.diff, "backbone_diff"));
  Var pa = softmax(linear(global_avg_pool(rgb), P("dain.head_a.fc.weight"), P("dain.head_a.fc.bias")));
  Var pb = softmax(linear(global_avg_pool(fused), P("dain.head_b.fc.weight"), P("dain.head_b.fc.bias")));
  const Tensor expect = scale(add(pa, pb), 0.5).value();
  CHECK(max_abs_diff(probs, expect) <= 1e-12);
}

TEST_CASE("DAIN with a silent differential stream and copied heads equals the baseline") {
  std::mt19937_64 rng(4);
  auto c = toy_config(Arch::DAIN, 7);
  auto dain_m = ModelGraph::build(c);
  for (auto* p : dain_m.parameters())
    if (p->name.rfind("backbone_diff.", 0) == 0) p->value.fill(0.0);
  dain_m.param("dain.head_b.fc.weight").value = dain_m.param("dain.head_a.fc.weight").value;
  dain_m.param("dain.head_b.fc.bias").value = dain_m.param("dain.head_a.fc.bias").value;

  auto bc = toy_config(Arch::Baseline, 99);
  auto base = ModelGraph::build(bc);
  for (auto* p : base.parameters()) {
    if (p->name.rfind("backbone.", 0) == 0) p->value = dain_m.param("backbone_rgb." + p->name.substr(9)).value;
    if (p->name.rfind("classifier.", 0) == 0) p->value = dain_m.param("dain.head_a.fc." + p->name.substr(11)).value;
  }
  auto b = random_batch(c, 3, rng);
  const Tensor pd = softmax_rows(eval_logits(dain_m, b));
  const Tensor pbase = softmax_rows(eval_logits(base, Batch{b.rgb, std::nullopt}));
  CHECK(max_abs_diff(pd, pbase) <= 1e-12);
}

TEST_CASE("single codeword at the origin encodes the descriptor sum") {
  std::mt19937_64 rng(5);
  Tape t;
  auto fm = t.constant(oracle::tensor({2, 4, 3, 3}, rng));
  auto E = encoding::encode(encoding::descriptors(fm), t.constant(Tensor::zeros({1, 4})),
                            t.constant(Tensor::from({1}, {0.8})));
  auto gap = global_avg_pool(fm);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 4; ++k) CHECK(E.value().at(n * 4 + k) == doctest::Approx(9.0 * gap.value().at(n * 4 + k)).epsilon(1e-13));
}

TEST_CASE("every parameter receives gradient from one training step") {
  std::mt19937_64 rng(6);
  for (auto a : kAllArchs) {
    for (bool multiview : {false, true}) {
      CAPTURE(to_string(a));
      CAPTURE(multiview);
      auto c = toy_config(a, 1);
      c.dtype = DType::f32;
      if (multiview) c.fusion.multiview_mode = angular::MultiviewMode::Filter3D;
      auto m = ModelGraph::build(c);
      m.zero_grad();
      std::vector<Batch> views = {random_batch(c, 4, rng), random_batch(c, 4, rng)};
      const int labels[] = {0, 1, 2, 1};
      Tape t;
      std::mt19937_64 drng(3);
      auto out = multiview ? m.forward_multiview(t, views, false, drng) : m.forward(t, views[0], false, drng);
      t.backward(m.loss(out, labels));
      for (const auto* p : m.parameters()) {
        if (!multiview && p->name.rfind("multiview.", 0) == 0) continue;
        double g = 0;
        for (double v : p->grad.to_vector()) g += std::fabs(v);
        CAPTURE(p->name);
        CHECK(g > 0.0);
      }
    }
  }
}

TEST_CASE("model checkpoints round-trip") {
  oracle::TempDir dir("model");
  std::mt19937_64 rng(7);
  for (auto a : kAllArchs) {
    auto c = toy_config(a, 2);
    c.fusion.multiview_mode = angular::MultiviewMode::Filter3D;
    c.norm_mean = {0.4};
    c.norm_std = {0.2};
    auto m = ModelGraph::build(c);
    const auto path = dir.path / (std::string(to_string(a)) + ".ckpt");
    m.save(path);
    auto back = ModelGraph::load(path);
    CHECK(back.encode() == m.encode());
    CHECK(back.config().to_config_map() == c.to_config_map());
    const auto b = random_batch(c, 2, rng);
    CHECK(eval_logits(back, b).bit_equal(eval_logits(m, b)));
  }
  // a checkpoint whose tensors do not match its config is rejected
  auto c = toy_config(Arch::DEP, 0);
  auto m = ModelGraph::build(c);
  auto ck = decode_checkpoint(m.encode());
  ck.tensors.pop_back();
  CHECK_THROWS(ModelGraph::from_checkpoint(ck));
}

TEST_CASE("model config map round trip") {
  ModelConfig c = default_cfg(Arch::TEAN);
  c.dims.dropout = 0.1234567890123;
  c.fusion.feature_combine = angular::FeatureCombine::Max;
  c.fusion.multiview_mode = angular::MultiviewMode::Voting;
  c.norm_mean = {0.1 / 3};
  c.norm_std = {1.0 / 7};
  c.seed = 123456789012345ULL;
  const auto back = ModelConfig::from_config_map(c.to_config_map());
  CHECK(back.to_config_map() == c.to_config_map());
  CHECK(back.dims.dropout == c.dims.dropout);
  CHECK(back.norm_std == c.norm_std);
  auto bad = c.to_config_map();
  bad["arch"] = "nope";
  CHECK_THROWS(ModelConfig::from_config_map(bad));
}

TEST_CASE("architectures pass gradient checks at toy width") {
  for (auto a : kAllArchs) {
    CAPTURE(to_string(a));
    GradcheckOptions o;
    o.tol = 1e-4;
    auto r = gradcheck_model(toy_config(a, 11), 12, o);
    CHECK(r.passed);
    CHECK(r.max_rel <= 1e-4);
  }
  GradcheckOptions o;
  o.tol = 1e-4;
  CHECK(gradcheck_model(toy_config(Arch::TEAN, 1), 2, o, angular::MultiviewMode::Filter3D).passed);
}

TEST_CASE("DEP composition on a 1x4x6x6 map passes finite differences at 1e-5") {
  // encoding -> fc1_1, GAP -> fc1_2, outer, L2, fc2
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<Tensor> in = {oracle::tensor({1, 4, 6, 6}, rng), oracle::tensor({3, 4}, rng),
                              oracle::tensor({3}, rng, 0, 1),    oracle::tensor({2, 12}, rng),
                              oracle::tensor({2}, rng),          oracle::tensor({2, 4}, rng),
                              oracle::tensor({2}, rng),          oracle::tensor({5, 4}, rng),
                              oracle::tensor({5}, rng)};
    auto r = oracle::gradcheck_op(
        in,
        [](auto& v) {
          auto tex = linear(encoding::encoding_forward(v[0], v[1], v[2]), v[3], v[4]);
          auto spa = linear(global_avg_pool(v[0]), v[5], v[6]);
          return linear(l2_normalize(outer(tex, spa)), v[7], v[8]);
        },
        seed);
    CHECK(r.passed);
    CHECK(r.max_rel <= 1e-5);
  }
}
