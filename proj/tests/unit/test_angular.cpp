#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "../common/oracles.hpp"
#include "dain/angular.hpp"

using namespace dain;
using namespace dain::ad;
using namespace dain::angular;

TEST_CASE("differential image") {
  auto a = Tensor::from({1, 2, 2}, {2, 3, 5, 7});
  auto b = Tensor::full({1, 2, 2}, 1.0);
  CHECK(differential_image(a, b).to_vector() == std::vector<double>{1, 2, 4, 6});
  for (double v : differential_image(a, a).to_vector()) CHECK(v == 0.0);

  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 10; ++rep) {
    auto x = oracle::tensor({3, 4, 5}, rng), y = oracle::tensor({3, 4, 5}, rng);
    auto d1 = differential_image(x, y), d2 = differential_image(y, x);
    for (std::size_t i = 0; i < d1.numel(); ++i) CHECK(d1.at(i) == -d2.at(i));
  }
  CHECK_THROWS_AS(differential_image(a, Tensor::zeros({1, 2, 3})), ShapeError);
}

TEST_CASE("fuse_features") {
  std::mt19937_64 rng(2);
  Tape t;
  auto a = t.constant(oracle::tensor({2, 3, 4, 4}, rng)), b = t.constant(oracle::tensor({2, 3, 4, 4}, rng));
  auto zero = t.constant(Tensor::zeros({2, 3, 4, 4}));
  CHECK(fuse_features(a, zero, FeatureCombine::Sum).value().bit_equal(a.value()));
  CHECK(fuse_features(a, a, FeatureCombine::Max).value().bit_equal(a.value()));
  CHECK(fuse_features(a, b, FeatureCombine::Sum).value().bit_equal(fuse_features(b, a, FeatureCombine::Sum).value()));
  CHECK(fuse_features(a, b, FeatureCombine::Max).value().bit_equal(fuse_features(b, a, FeatureCombine::Max).value()));
  const double al = 0.37;
  auto lhs = fuse_features(scale(a, al), scale(b, al), FeatureCombine::Sum);
  auto rhs = scale(fuse_features(a, b, FeatureCombine::Sum), al);
  CHECK(max_abs_diff(lhs.value(), rhs.value()) <= 1e-15);
  CHECK_THROWS_AS(fuse_features(a, t.constant(Tensor::zeros({2, 3, 4, 5})), FeatureCombine::Sum), ShapeError);
}

TEST_CASE("multiview voting") {
  std::vector<Tensor> one = {Tensor::from({3}, {0.2, 0.5, 0.3})};
  CHECK(multiview_combine_predictions(one) == 1);
  std::vector<Tensor> tie = {Tensor::from({2}, {0.6, 0.4}), Tensor::from({2}, {0.4, 0.6})};
  CHECK(multiview_combine_predictions(tie) == 0);
  CHECK_THROWS(multiview_combine_predictions(std::vector<Tensor>{}));

  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<Tensor> views;
    for (int v = 0; v < 4; ++v) {
      auto p = oracle::uniform(5, rng, 0.01, 1.0);
      const double s = std::accumulate(p.begin(), p.end(), 0.0);
      for (auto& x : p) x /= s;
      views.push_back(Tensor::from({5}, p));
    }
    const int ref = multiview_combine_predictions(views);
    const int ref_major = multiview_combine_predictions(views, VotingRule::Majority);
    for (int k = 0; k < 6; ++k) {
      std::shuffle(views.begin(), views.end(), rng);
      CHECK(multiview_combine_predictions(views) == ref);
      CHECK(multiview_combine_predictions(views, VotingRule::Majority) == ref_major);
    }
  }
}

TEST_CASE("multiview pooling") {
  std::mt19937_64 rng(4);
  Tape t;
  auto one = oracle::tensor({1, 2, 3, 4, 4}, rng);
  CHECK(multiview_pool_features(t.constant(one)).value().bit_equal(one.reshaped({2, 3, 4, 4})));

  for (int rep = 0; rep < 20; ++rep) {
    const auto x = oracle::uniform(4 * 2 * 3 * 5 * 5, rng);
    auto stackv = t.constant(Tensor::from({4, 2, 3, 5, 5}, x));
    auto pooled = multiview_pool_features(stackv);
    CHECK(pooled.value().to_vector() == oracle::max_over_views(x, 4));

    std::vector<Var> views;
    for (std::size_t v = 0; v < 4; ++v)
      views.push_back(t.constant(Tensor::from({2, 3, 5, 5}, {x.begin() + v * 150, x.begin() + (v + 1) * 150})));
    auto shuffled = views;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(multiview_pool_features(stack(shuffled)).value().bit_equal(pooled.value()));
    auto doubled = views;
    doubled.push_back(views[2]);
    CHECK(multiview_pool_features(stack(doubled)).value().bit_equal(pooled.value()));
  }
}

TEST_CASE("view_filter3d") {
  std::mt19937_64 rng(5);
  Tape t;
  const std::size_t V = 4, N = 2, D = 3, H = 5, W = 5;
  auto x = oracle::tensor({V, N, D, H, W}, rng);
  Tensor delta = Tensor::zeros({D, D, 3, 3, 3});
  for (std::size_t c = 0; c < D; ++c) delta.set((c * D + c) * 27 + 13, 1.0);
  auto id = view_filter3d(t.constant(x), t.constant(delta), t.constant(Tensor::zeros({D})));
  CHECK(id.value().bit_equal(multiview_pool_features(t.constant(x)).value()));

  auto z = view_filter3d(t.constant(x), t.constant(Tensor::zeros({D, D, 3, 3, 3})), t.constant(Tensor::zeros({D})));
  for (double v : z.value().to_vector()) CHECK(v == 0.0);

  for (int rep = 0; rep < 20; ++rep) {
    std::size_t v = oracle::pick(rng, 1, 5), n = oracle::pick(rng, 1, 2), d = oracle::pick(rng, 1, 4),
                h = oracle::pick(rng, 1, 6), w = oracle::pick(rng, 1, 6);
    if (rep == 0) v = 4, n = 1, d = 4, h = 5, w = 5;
    const auto xs = oracle::uniform(v * n * d * h * w, rng), ws = oracle::uniform(d * d * 27, rng),
               bs = oracle::uniform(d, rng);
    auto y = view_filter3d(t.constant(Tensor::from({v, n, d, h, w}, xs)), t.constant(Tensor::from({d, d, 3, 3, 3}, ws)),
                           t.constant(Tensor::from({d}, bs)));
    CHECK(oracle::max_abs(y.value().to_vector(), oracle::view_filter3d(xs, ws, bs, v, n, d, h, w)) <= 1e-12);
  }
  CHECK_THROWS_AS(view_filter3d(t.constant(x), t.constant(Tensor::zeros({D, D, 3, 3, 1})), t.constant(Tensor::zeros({D}))),
                  ShapeError);
}

TEST_CASE("angular operator gradients") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    CHECK(oracle::gradcheck_op({oracle::tensor({3, 2, 2, 3, 3}, rng), oracle::tensor({2, 2, 3, 3, 3}, rng),
                                oracle::tensor({2}, rng)},
                               [](auto& v) { return view_filter3d(v[0], v[1], v[2]); }, seed)
              .passed);
    CHECK(oracle::gradcheck_op({oracle::tensor({3, 1, 2, 3, 3}, rng)},
                               [](auto& v) { return multiview_pool_features(v[0]); }, seed)
              .passed);
    CHECK(oracle::gradcheck_op({oracle::tensor({1, 2, 3, 3}, rng), oracle::tensor({1, 2, 3, 3}, rng)},
                               [](auto& v) { return fuse_features(v[0], v[1], FeatureCombine::Max); }, seed)
              .passed);
    CHECK(oracle::gradcheck_op({oracle::tensor({1, 2, 3, 3}, rng), oracle::tensor({1, 2, 3, 3}, rng)},
                               [](auto& v) { return fuse_features(v[0], v[1], FeatureCombine::Sum); }, seed)
              .passed);
  }
}

TEST_CASE("fusion config and view sets") {
  FusionConfig f;
  CHECK(f.n_views == 4);
  CHECK(f.multiview_mode == MultiviewMode::Pooling);
  f.n_views = 0;
  CHECK_THROWS(f.validate());
  f.n_views = 4;
  f.layer_tag = "conv2";
  CHECK_THROWS(f.validate());
  CHECK(parse_multiview_mode(to_string(MultiviewMode::Filter3D)) == MultiviewMode::Filter3D);
  CHECK(parse_voting_rule(to_string(VotingRule::Majority)) == VotingRule::Majority);
  CHECK(parse_feature_combine("max") == FeatureCombine::Max);
  CHECK_THROWS_AS(parse_feature_combine("avg"), std::invalid_argument);

  ViewSet vs;
  vs.sample_id = "s";
  vs.views.push_back({0.0, Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 2, 2}), 5.0, "sun"});
  vs.views.push_back({10.0, Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 2, 2}), 5.0, "sun"});
  CHECK_NOTHROW(vs.validate());
  vs.views[1].theta_deg = 0.0;
  CHECK_THROWS(vs.validate());
  vs.views[1].theta_deg = 10.0;
  vs.views[1].delta_deg = 0.0;
  CHECK_THROWS(vs.validate());
  vs.views[1].delta_deg = 5.0;
  vs.views[1].image_v_delta = Tensor::zeros({1, 3, 2});
  CHECK_THROWS(vs.validate());
}
