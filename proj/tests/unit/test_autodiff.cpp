#include <doctest.h>

#include <cmath>
#include <numeric>

#include "../common/oracles.hpp"
#include "../common/suites.hpp"
#include "dain/checkpoint.hpp"

using namespace dain;
using namespace dain::ad;

TEST_CASE("tensor basics") {
  auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(4) == 5.0);
  CHECK(t.astype(DType::f32).dtype() == DType::f32);
  CHECK(t.astype(DType::f32).astype(DType::f64).bit_equal(t));
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}, DType::f64), ShapeError);
  CHECK(parse_dtype("f32") == DType::f32);
}

TEST_CASE("conv2d small cases") {
  Tape t;
  auto x = t.constant(Tensor::full({1, 1, 3, 3}, 1.0));
  auto w = t.constant(Tensor::full({1, 1, 3, 3}, 1.0));
  auto b = t.constant(Tensor::zeros({1}));
  auto y = conv2d(x, w, b);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.value().item() == 9.0);

  std::mt19937_64 rng(1);
  auto img = oracle::tensor({2, 3, 5, 5}, rng);
  Tensor id = Tensor::zeros({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) id.set(c * 3 + c, 1.0);
  auto same = conv2d(t.constant(img), t.constant(id), t.constant(Tensor::zeros({3})));
  CHECK(same.value().bit_equal(img));

  CHECK_THROWS_AS(conv2d(t.constant(Tensor::zeros({1, 1, 4, 4})), t.constant(Tensor::zeros({1, 1, 3, 3})),
                         t.constant(Tensor::zeros({1})), 2, 0),
                  ShapeError);
  CHECK_THROWS_AS(conv2d(t.constant(Tensor::zeros({1, 2, 4, 4})), t.constant(Tensor::zeros({1, 1, 3, 3})),
                         t.constant(Tensor::zeros({1})), 1, 0),
                  ShapeError);
}

TEST_CASE("conv2d, conv3d and matmul match nested-loop oracles") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    Tape t;
    {
      const auto N = oracle::pick(rng, 1, 3), Ci = oracle::pick(rng, 1, 4), Co = oracle::pick(rng, 1, 4);
      const auto k = oracle::pick(rng, 1, 3), pad = oracle::pick(rng, 0, 1);
      std::size_t stride = oracle::pick(rng, 1, 2);
      std::size_t H = oracle::pick(rng, k, 8);
      while ((H + 2 * pad - k) % stride) ++H;
      const auto x = oracle::uniform(N * Ci * H * H, rng), w = oracle::uniform(Co * Ci * k * k, rng),
                 b = oracle::uniform(Co, rng);
      auto y = conv2d(t.constant(Tensor::from({N, Ci, H, H}, x)), t.constant(Tensor::from({Co, Ci, k, k}, w)),
                      t.constant(Tensor::from({Co}, b)), stride, pad);
      CHECK(oracle::max_abs(y.value().to_vector(), oracle::conv2d(x, w, b, N, Ci, H, H, Co, k, k, stride, pad)) <= 1e-12);
    }
    {
      const auto N = oracle::pick(rng, 1, 2), Ci = oracle::pick(rng, 1, 3), Co = oracle::pick(rng, 1, 3);
      const auto D = oracle::pick(rng, 1, 5), H = oracle::pick(rng, 1, 6), W = oracle::pick(rng, 1, 6);
      const auto x = oracle::uniform(N * Ci * D * H * W, rng), w = oracle::uniform(Co * Ci * 27, rng),
                 b = oracle::uniform(Co, rng);
      auto y = conv3d(t.constant(Tensor::from({N, Ci, D, H, W}, x)), t.constant(Tensor::from({Co, Ci, 3, 3, 3}, w)),
                      t.constant(Tensor::from({Co}, b)));
      CHECK(oracle::max_abs(y.value().to_vector(), oracle::conv3d(x, w, b, N, Ci, D, H, W, Co, 3, 1)) <= 1e-12);
    }
    {
      const auto M = oracle::pick(rng, 1, 8), K = oracle::pick(rng, 1, 8), N = oracle::pick(rng, 1, 8);
      const auto a = oracle::uniform(M * K, rng), b = oracle::uniform(K * N, rng);
      auto y = matmul(t.constant(Tensor::from({M, K}, a)), t.constant(Tensor::from({K, N}, b)));
      CHECK(oracle::max_abs(y.value().to_vector(), oracle::matmul(a, b, M, K, N)) <= 1e-12);
    }
  }
}

TEST_CASE("l2_normalize") {
  Tape t;
  auto y = l2_normalize(t.constant(Tensor::from({2}, {3, 4})));
  CHECK(y.value().at(0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(y.value().at(1) == doctest::Approx(0.8).epsilon(1e-15));

  auto u = Tensor::from({3}, {0.0, 1.0, 0.0});
  CHECK(l2_normalize(t.constant(u)).value().bit_equal(u));

  std::mt19937_64 rng(3);
  auto once = l2_normalize(t.constant(oracle::tensor({64}, rng)));
  auto twice = l2_normalize(once);
  CHECK(max_abs_diff(once.value(), twice.value()) <= 1e-12);
  double n2 = 0;
  for (double v : once.value().to_vector()) n2 += v * v;
  CHECK(std::fabs(std::sqrt(n2) - 1.0) <= 1e-6);

  reset_l2_guard_hits();
  auto z = l2_normalize(t.constant(Tensor::zeros({4})));
  CHECK(z.value().all_finite());
  CHECK(l2_guard_hits() == 1);
}

TEST_CASE("backward basics") {
  std::mt19937_64 rng(5);
  Parameter p("x", oracle::tensor({3, 4}, rng));
  {
    Tape t;
    t.backward(sum(t.param(p)));
    for (double g : p.grad.to_vector()) CHECK(g == 1.0);
  }
  p.zero_grad();
  {
    Tape t;
    auto x = t.param(p);
    t.backward(sum(mul(x, x)));
    for (std::size_t i = 0; i < p.value.numel(); ++i) CHECK(p.grad.at(i) == 2.0 * p.value.at(i));
  }
  // accumulation: a second backward without zeroing doubles the gradient
  {
    Tape t;
    auto x = t.param(p);
    t.backward(sum(mul(x, x)));
    for (std::size_t i = 0; i < p.value.numel(); ++i) CHECK(p.grad.at(i) == doctest::Approx(4.0 * p.value.at(i)));
  }
  // unreachable parameter keeps a zero gradient
  Parameter q("q", oracle::tensor({2}, rng));
  q.zero_grad();
  {
    Tape t;
    auto x = t.param(p);
    (void)t.param(q);
    t.backward(sum(x));
    for (double g : q.grad.to_vector()) CHECK(g == 0.0);
  }
  Tape t;
  CHECK_THROWS(t.backward(t.param(p)));
}

TEST_CASE("tape is topologically ordered and each node is visited once") {
  std::mt19937_64 rng(2);
  Parameter a("a", oracle::tensor({2, 3}, rng)), b("b", oracle::tensor({3, 2}, rng));
  Tape t;
  auto x = t.param(a);
  auto y = matmul(x, t.param(b));
  auto z = add(relu(y), y);
  auto loss = sum(mul(z, z));
  for (std::size_t id = 0; id < t.size(); ++id)
    for (auto in : t.inputs_of(id)) CHECK(in < id);
  t.backward(loss);
  CHECK(t.last_backward_visits() <= t.size());
  std::size_t needs = 0;
  for (std::size_t id = 0; id < t.size(); ++id) needs += !t.inputs_of(id).empty();
  CHECK(t.last_backward_visits() == needs);
}

TEST_CASE("non-finite values fail fast") {
  Tape t;
  CHECK_THROWS_AS(log(t.constant(Tensor::from({2}, {1.0, 0.0}))), NumericError);
  CHECK_THROWS_AS(exp(t.constant(Tensor::from({1}, {1e4}))), NumericError);
}

TEST_CASE("softmax rows are distributions") {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 10; ++rep) {
    Tape t;
    auto s = softmax(t.constant(oracle::tensor({4, 6}, rng, -30, 30)));
    for (std::size_t r = 0; r < 4; ++r) {
      double z = 0;
      for (std::size_t c = 0; c < 6; ++c) {
        const double v = s.value().at(r * 6 + c);
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        z += v;
      }
      CHECK(std::fabs(z - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("cross entropy and shape ops") {
  Tape t;
  auto logits = t.constant(Tensor::from({2, 2}, {0.0, 0.0, 10.0, -10.0}));
  const int labels[] = {1, 0};
  const double expect = 0.5 * (std::log(2.0) + std::log1p(std::exp(-20.0)));
  CHECK(cross_entropy(logits, labels).value().item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(nll_loss(log_softmax(logits), labels).value().item() == doctest::Approx(expect).epsilon(1e-12));

  auto a = t.constant(Tensor::from({2, 2}, {1, 2, 3, 4}));
  auto b = t.constant(Tensor::from({2, 1}, {5, 6}));
  CHECK(concat({a, b}, 1).value().to_vector() == std::vector<double>{1, 2, 5, 3, 4, 6});
  CHECK(permute(a, {1, 0}).value().to_vector() == std::vector<double>{1, 3, 2, 4});
  CHECK(stack({a, a}).shape() == Shape{2, 2, 2});
  CHECK(flatten(stack({a, a})).shape() == Shape{2, 4});
  CHECK(outer(t.constant(Tensor::from({2}, {1, 0})), t.constant(Tensor::from({2}, {0, 1}))).value().to_vector() ==
        std::vector<double>{0, 1, 0, 0});
  CHECK(maximum(a, scale(a, 2.0)).value().to_vector() == std::vector<double>{2, 4, 6, 8});
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(4);
  Tape t;
  auto x = t.constant(Tensor::full({1000}, 1.0));
  CHECK(dropout(x, 0.5, false, rng).value().bit_equal(x.value()));
  auto y = dropout(x, 0.5, true, rng).value().to_vector();
  std::size_t zeros = 0;
  for (double v : y) {
    CHECK((v == 0.0 || v == 2.0));
    zeros += v == 0.0;
  }
  CHECK(zeros > 400);
  CHECK(zeros < 600);
}

TEST_CASE("gradcheck of a scalar square") {
  Parameter p("x", Tensor::scalar(3.0));
  auto f = [&](Tape& t) {
    auto x = t.param(p);
    return sum(mul(x, x));
  };
  Parameter* ps[] = {&p};
  auto r = finite_difference_gradcheck(f, ps);
  CHECK(r.passed);
  CHECK(p.grad.item() == 6.0);
  CHECK(r.max_rel <= 1e-8);
}

TEST_CASE("gradcheck rejects a non-deterministic program") {
  Parameter p("x", Tensor::scalar(1.0));
  int calls = 0;
  auto f = [&](Tape& t) { return scale(t.param(p), 1.0 + (calls++)); };
  Parameter* ps[] = {&p};
  CHECK_THROWS_AS(finite_difference_gradcheck(f, ps), std::runtime_error);
}

TEST_CASE("every primitive passes finite differences over 10 seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const auto& [name, r] : oracle::primitive_gradchecks(seed)) {
      CAPTURE(seed);
      CAPTURE(name);
      CHECK(r.passed);
      CHECK(r.checked > 0);
    }
  }
}

TEST_CASE("determinism: identical seeds give bit-identical values and gradients") {
  auto run = [] {
    std::mt19937_64 rng(11);
    Parameter w("w", oracle::tensor({3, 2, 3, 3}, rng)), b("b", oracle::tensor({3}, rng));
    auto x = oracle::tensor({2, 2, 6, 6}, rng);
    Tape t;
    auto y = global_avg_pool(relu(conv2d(t.constant(x), t.param(w), t.param(b), 1, 1)));
    auto loss = sum(mul(y, y));
    t.backward(loss);
    return std::make_tuple(loss.value(), w.grad, b.grad);
  };
  auto [l1, w1, b1] = run();
  auto [l2, w2, b2] = run();
  CHECK(l1.bit_equal(l2));
  CHECK(w1.bit_equal(w2));
  CHECK(b1.bit_equal(b2));
}

TEST_CASE("checkpoint round trip is bit-exact") {
  std::mt19937_64 rng(21);
  Parameter a("layer.weight", oracle::tensor({3, 4}, rng));
  Parameter b("layer.bias", oracle::tensor({4}, rng).astype(DType::f32));
  const Parameter* ps[] = {&a, &b};
  ConfigMap cfg = {{"arch", "dep"}, {"z", "1"}, {"a.b", "x=y"}};
  const auto bytes = encode_checkpoint(cfg, ps);
  CHECK(bytes.compare(0, 8, std::string(kCheckpointMagic, 8)) == 0);
  const auto ck = decode_checkpoint(bytes);
  CHECK(ck.config == cfg);
  CHECK(ck.tensor("layer.weight").bit_equal(a.value));
  CHECK(ck.tensor("layer.bias").bit_equal(b.value));
  CHECK(ck.tensor("layer.bias").dtype() == DType::f32);
  CHECK(encode_checkpoint(ck.config, ps) == bytes);
  CHECK(parse_config_text(canonical_config_text(cfg)) == cfg);

  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);

  oracle::TempDir dir("ckpt");
  save_checkpoint(dir.path / "m.ckpt", cfg, ps);
  CHECK(load_checkpoint(dir.path / "m.ckpt").tensor("layer.weight").bit_equal(a.value));
}
