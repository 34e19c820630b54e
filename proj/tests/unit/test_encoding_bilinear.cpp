#include <doctest.h>

#include <cmath>
#include <numeric>

#include "../common/oracles.hpp"
#include "dain/bilinear.hpp"
#include "dain/encoding.hpp"

using namespace dain;
using namespace dain::ad;
namespace enc = dain::encoding;

namespace {

Var C(Tape& t, Shape s, std::vector<double> v) { return t.constant(Tensor::from(std::move(s), v)); }

}  // namespace

TEST_CASE("residuals") {
  Tape t;
  auto R = enc::residuals(C(t, {1, 2}, {1, 0}), C(t, {2, 2}, {1, 0, 0, 0}));
  CHECK(R.shape() == Shape{1, 2, 2});
  CHECK(R.value().to_vector() == std::vector<double>{0, 0, 1, 0});

  auto z = enc::residuals(C(t, {1, 3}, {0.5, -2, 3}), C(t, {1, 3}, {0.5, -2, 3}));
  for (double v : z.value().to_vector()) CHECK(v == 0.0);

  std::mt19937_64 rng(1);
  const auto X = oracle::uniform(5 * 4, rng), Cw = oracle::uniform(3 * 4, rng);
  auto r = enc::residuals(C(t, {5, 4}, X), C(t, {3, 4}, Cw)).value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) CHECK(r.at((i * 3 + j) * 4 + k) == X[i * 4 + k] - Cw[j * 4 + k]);

  CHECK_THROWS_AS(enc::residuals(C(t, {2, 3}, {0, 0, 0, 0, 0, 0}), C(t, {1, 2}, {0, 0})), ShapeError);
}

TEST_CASE("assignment weights") {
  Tape t;
  // single codeword
  {
    std::mt19937_64 rng(2);
    auto R = enc::residuals(t.constant(oracle::tensor({4, 3}, rng)), t.constant(oracle::tensor({1, 3}, rng)));
    auto W = enc::assign_weights(R, C(t, {1}, {0.7}));
    for (double w : W.value().to_vector()) CHECK(w == 1.0);
  }
  // two codewords, the worked example
  {
    auto R = enc::residuals(C(t, {1, 2}, {1, 0}), C(t, {2, 2}, {1, 0, 0, 0}));
    auto W = enc::assign_weights(R, C(t, {2}, {1, 1})).value();
    const double w11 = 1.0 / (1.0 + std::exp(-1.0));
    CHECK(W.at(0) == doctest::Approx(w11).epsilon(1e-12));
    CHECK(W.at(1) == doctest::Approx(1.0 - w11).epsilon(1e-12));
    CHECK(W.at(0) == doctest::Approx(0.73106).epsilon(1e-5));
    CHECK(W.at(1) == doctest::Approx(0.26894).epsilon(1e-4));
  }
  // equidistant codewords stay uniform whatever the smoothing
  {
    auto R = enc::residuals(C(t, {1, 2}, {0, 0}), C(t, {2, 2}, {1, 0, 0, 1}));
    for (double s : {1.0, 2.0, 50.0}) {
      auto W = enc::assign_weights(R, C(t, {2}, {s, s})).value();
      CHECK(W.at(0) == 0.5);
      CHECK(W.at(1) == 0.5);
    }
  }
}

TEST_CASE("assignment weights are row-stochastic") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const auto m = oracle::pick(rng, 1, 8), n = oracle::pick(rng, 1, 8), d = oracle::pick(rng, 1, 8);
    Tape t;
    auto R = enc::residuals(t.constant(oracle::tensor({m, d}, rng, -3, 3)), t.constant(oracle::tensor({n, d}, rng)));
    auto W = enc::assign_weights(R, t.constant(oracle::tensor({n}, rng, -2, 5))).value();
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(W.at(i * n + j) >= 0.0);
        s += W.at(i * n + j);
      }
      CHECK(std::fabs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("large smoothing concentrates weight on the nearest codeword") {
  Tape t;
  auto R = enc::residuals(C(t, {1, 2}, {0.2, 0.1}), C(t, {3, 2}, {0, 0, 1, 1, -1, 0.5}));
  double prev = 0.0;
  for (double s : {1.0, 10.0, 100.0}) {
    const double w = enc::assign_weights(R, C(t, {3}, {s, s, s})).value().at(0);
    CHECK(w > prev);
    prev = w;
  }
  CHECK(prev > 0.999);
}

TEST_CASE("encode: worked example, zero residuals and triple-loop oracle") {
  Tape t;
  auto E = enc::encode(C(t, {1, 2}, {1, 0}), C(t, {2, 2}, {1, 0, 0, 0}), C(t, {2}, {1, 1})).value();
  CHECK(E.at(0) == 0.0);
  CHECK(E.at(1) == 0.0);
  CHECK(E.at(2) == doctest::Approx(0.26894).epsilon(1e-4));
  CHECK(E.at(3) == 0.0);

  auto Z = enc::encode(C(t, {3, 2}, {0.3, 0.4, 0.3, 0.4, 0.3, 0.4}), C(t, {1, 2}, {0.3, 0.4}), C(t, {1}, {1}));
  for (double v : Z.value().to_vector()) CHECK(v == 0.0);

  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    std::size_t m = oracle::pick(rng, 1, 8), n = oracle::pick(rng, 1, 8), d = oracle::pick(rng, 1, 8);
    if (rep == 0) m = 6, n = 4, d = 5;
    const auto X = oracle::uniform(m * d, rng), Cw = oracle::uniform(n * d, rng), s = oracle::uniform(n, rng, 0, 2);
    auto out = enc::encode(C(t, {m, d}, X), C(t, {n, d}, Cw), C(t, {n}, s)).value();
    CHECK(oracle::max_abs(out.to_vector(), oracle::encode(X, Cw, s, m, n, d)) <= 1e-12);
  }
}

TEST_CASE("encode is exactly invariant to descriptor order") {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const auto m = oracle::pick(rng, 2, 8), n = oracle::pick(rng, 1, 6), d = oracle::pick(rng, 1, 6);
    const auto X = oracle::uniform(m * d, rng);
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    oracle::Vec Xp(m * d);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < d; ++k) Xp[i * d + k] = X[perm[i] * d + k];
    Tape t;
    auto Cw = t.constant(oracle::tensor({n, d}, rng));
    auto s = t.constant(oracle::tensor({n}, rng, 0, 2));
    CHECK(enc::encode(C(t, {m, d}, X), Cw, s).value().bit_equal(enc::encode(C(t, {m, d}, Xp), Cw, s).value()));
  }
}

TEST_CASE("encoding_forward") {
  Tape t;
  reset_l2_guard_hits();
  auto z = enc::encoding_forward(t.constant(Tensor::full({1, 4, 3, 3}, 0.25)), C(t, {1, 4}, {0.25, 0.25, 0.25, 0.25}),
                                 C(t, {1}, {1.0}));
  CHECK(z.shape() == Shape{1, 4});
  for (double v : z.value().to_vector()) CHECK(v == 0.0);
  CHECK(l2_guard_hits() == 1);

  std::mt19937_64 rng(6);
  auto fm = oracle::tensor({2, 16, 3, 3}, rng);
  auto p = enc::EncodingLayerParams::random_init(8, 16, DType::f64, rng);
  auto out = enc::encoding_forward(t.constant(fm), t.constant(p.codewords), t.constant(p.smoothing));
  CHECK(out.shape() == Shape{2, 128});
  for (std::size_t n = 0; n < 2; ++n) {
    double s = 0;
    for (std::size_t k = 0; k < 128; ++k) s += out.value().at(n * 128 + k) * out.value().at(n * 128 + k);
    CHECK(std::fabs(std::sqrt(s) - 1.0) <= 1e-6);
  }

  // spatial permutation of a 3x3 map
  auto small = oracle::tensor({1, 4, 3, 3}, rng);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor shuffled = small;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t q = 0; q < 9; ++q) shuffled.set(c * 9 + q, small.at(c * 9 + perm[q]));
  auto p4 = enc::EncodingLayerParams::random_init(3, 4, DType::f64, rng);
  auto a = enc::encoding_forward(t.constant(small), t.constant(p4.codewords), t.constant(p4.smoothing));
  auto b = enc::encoding_forward(t.constant(shuffled), t.constant(p4.codewords), t.constant(p4.smoothing));
  CHECK(a.value().bit_equal(b.value()));

  CHECK_THROWS_AS(enc::encoding_forward(t.constant(fm), t.constant(p4.codewords), t.constant(p4.smoothing)), ShapeError);
}

TEST_CASE("encoding init ranges") {
  std::mt19937_64 rng(7);
  auto p = enc::EncodingLayerParams::random_init(8, 5, DType::f64, rng);
  const double lim = 1.0 / std::sqrt(8.0);
  for (double v : p.codewords.to_vector()) CHECK(std::fabs(v) <= lim);
  for (double v : p.smoothing.to_vector()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("encoding gradients") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    // 3 descriptors, 2 codewords, d = 4
    auto r = oracle::gradcheck_op({oracle::tensor({3, 4}, rng), oracle::tensor({2, 4}, rng), oracle::tensor({2}, rng, 0, 2)},
                                  [](auto& v) { return enc::encode(v[0], v[1], v[2]); }, seed);
    CHECK(r.passed);
    auto r2 = oracle::gradcheck_op(
        {oracle::tensor({2, 3, 2, 3}, rng), oracle::tensor({4, 3}, rng), oracle::tensor({4}, rng, 0, 2)},
        [](auto& v) { return enc::encoding_forward(v[0], v[1], v[2]); }, seed);
    CHECK(r2.passed);
  }
}

TEST_CASE("bilinear_outer") {
  Tape t;
  CHECK(bilinear::bilinear_outer(C(t, {2}, {1, 0}), C(t, {2}, {0, 1})).value().to_vector() ==
        std::vector<double>{0, 1, 0, 0});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      std::vector<double> a(3, 0.0), b(4, 0.0);
      a[i] = 1.0;
      b[j] = 1.0;
      auto y = bilinear::bilinear_outer(C(t, {3}, a), C(t, {4}, b)).value().to_vector();
      for (std::size_t k = 0; k < 12; ++k) CHECK(y[k] == (k == i * 4 + j ? 1.0 : 0.0));
    }
}

TEST_CASE("bilinear_outer is bilinear") {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    Tape t;
    auto a1 = oracle::tensor({5}, rng), a2 = oracle::tensor({5}, rng), b = oracle::tensor({5}, rng);
    std::uniform_real_distribution<double> u(-2, 2);
    const double al = u(rng), be = u(rng);
    auto lhs = bilinear::bilinear_outer(add(scale(t.constant(a1), al), scale(t.constant(a2), be)), t.constant(b));
    auto rhs = add(scale(bilinear::bilinear_outer(t.constant(a1), t.constant(b)), al),
                   scale(bilinear::bilinear_outer(t.constant(a2), t.constant(b)), be));
    CHECK(max_abs_diff(lhs.value(), rhs.value()) <= 1e-12);
    auto lhs2 = bilinear::bilinear_outer(t.constant(b), add(scale(t.constant(a1), al), scale(t.constant(a2), be)));
    auto rhs2 = add(scale(bilinear::bilinear_outer(t.constant(b), t.constant(a1)), al),
                    scale(bilinear::bilinear_outer(t.constant(b), t.constant(a2)), be));
    CHECK(max_abs_diff(lhs2.value(), rhs2.value()) <= 1e-12);
  }
}

TEST_CASE("pooled_bilinear") {
  Tape t;
  CHECK(bilinear::pooled_bilinear(C(t, {1, 2, 1, 1}, {3, 4})).value().to_vector() == std::vector<double>{9, 12, 12, 16});

  // constant field: P * (u outer u)
  auto cf = bilinear::pooled_bilinear(C(t, {1, 2, 2, 3}, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5, -2, -2, -2, -2, -2, -2}));
  CHECK(cf.value().to_vector() == std::vector<double>{6 * 0.25, 6 * -1.0, 6 * -1.0, 6 * 4.0});

  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    const auto N = oracle::pick(rng, 1, 3), Ch = oracle::pick(rng, 1, 6), H = oracle::pick(rng, 1, 5),
               W = oracle::pick(rng, 1, 5);
    const auto f = oracle::uniform(N * Ch * H * W, rng);
    auto y = bilinear::pooled_bilinear(C(t, {N, Ch, H, W}, f)).value();
    CHECK(oracle::max_abs(y.to_vector(), oracle::pooled_bilinear(f, N, Ch, H, W)) <= 1e-12);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t a = 0; a < Ch; ++a)
        for (std::size_t b = 0; b < Ch; ++b) CHECK(y.at((n * Ch + a) * Ch + b) == y.at((n * Ch + b) * Ch + a));

    std::vector<std::size_t> perm(H * W);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    oracle::Vec g(f.size());
    for (std::size_t nc = 0; nc < N * Ch; ++nc)
      for (std::size_t q = 0; q < H * W; ++q) g[nc * H * W + q] = f[nc * H * W + perm[q]];
    CHECK(bilinear::pooled_bilinear(C(t, {N, Ch, H, W}, g)).value().bit_equal(y));
  }
}

TEST_CASE("bilinear gradients") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    CHECK(oracle::gradcheck_op({oracle::tensor({4}, rng), oracle::tensor({3}, rng)},
                               [](auto& v) { return bilinear::bilinear_outer(v[0], v[1]); }, seed)
              .passed);
    CHECK(oracle::gradcheck_op({oracle::tensor({2, 4}, rng), oracle::tensor({2, 3}, rng)},
                               [](auto& v) { return bilinear::bilinear_outer(v[0], v[1]); }, seed)
              .passed);
    CHECK(oracle::gradcheck_op({oracle::tensor({2, 3, 2, 3}, rng)},
                               [](auto& v) { return bilinear::pooled_bilinear(v[0]); }, seed)
              .passed);
  }
}
