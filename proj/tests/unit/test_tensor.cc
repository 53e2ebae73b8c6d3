#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "psyt/autograd.h"
#include "psyt/gradcheck.h"
#include "psyt/optim.h"
#include "psyt/tensor.h"
#include "test_util.h"

using namespace psyt;
using psyt::testing::random_tensor;

TEST_CASE("matmul identity, zero and hand product") {
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(matmul(Tensor::matrix({{1, 0}, {0, 1}}), m) == m);

  Tensor zero({3, 2});
  const Tensor z = matmul(zero, m);
  CHECK(z.shape() == Shape{3, 2});
  for (double v : z.data()) CHECK(v == 0.0);

  const Tensor p = matmul(m, Tensor::matrix({{5}, {6}}));
  CHECK(p == Tensor::matrix({{17}, {39}}));
}

TEST_CASE("matmul rejects mismatched inner dimensions with both shapes") {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3] x [2, 3]") != std::string::npos);
  }
}

TEST_CASE("matmul broadcasts leading batch axes") {
  Rng rng(3);
  const Tensor a = random_tensor({4, 2, 3}, rng);
  const Tensor b = random_tensor({3, 5}, rng);
  const Tensor out = matmul(a, b);
  REQUIRE(out.shape() == Shape{4, 2, 5});
  for (std::size_t i = 0; i < 4; ++i) {
    Tensor slice({2, 3}, std::vector<double>(a.data().begin() + i * 6, a.data().begin() + (i + 1) * 6));
    const Tensor expect = matmul(slice, b);
    for (std::size_t k = 0; k < 10; ++k) CHECK(out[i * 10 + k] == doctest::Approx(expect[k]).epsilon(1e-15));
  }
  CHECK_THROWS_AS(matmul(Tensor({2, 2, 3}), Tensor({3, 3, 2})), DimensionError);
}

TEST_CASE("softmax examples") {
  const Tensor u = softmax(Tensor::vector({0.7, 0.7, 0.7}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor t = softmax(Tensor::vector({0.0, std::log(2.0)}), 0);
  CHECK(t[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(t[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));

  const Tensor big = softmax(Tensor::vector({1000.0, 0.0}), 0);
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
}

TEST_CASE("softmax rows sum to one and commute with permutations") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 8);
    const std::size_t r = 1 + uniform_index(rng, 8);
    const Tensor x = random_tensor({r, n}, rng, -20.0, 20.0);
    const Tensor y = softmax(x, 1);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(std::span<std::size_t>(perm), rng);
    Tensor xp({r, n});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < n; ++j) xp(i, j) = x(i, perm[j]);
    const Tensor yp = softmax(xp, 1);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        s += y(i, j);
        CHECK(y(i, j) > 0.0);
        CHECK(y(i, j) < 1.0 + 1e-15);
        CHECK(std::abs(yp(i, j) - y(i, perm[j])) <= 1e-15);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("softmax along a leading axis") {
  const Tensor x = Tensor::matrix({{0.0, 1.0}, {std::log(2.0), 1.0}});
  const Tensor y = softmax(x, 0);
  CHECK(y(0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(y(1, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(y(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("softmax rejects non-finite input") {
  CHECK_THROWS_AS(softmax(Tensor::vector({0.0, NAN}), 0), NumericError);
}

TEST_CASE("layer_norm examples") {
  const Tensor ones({2}, 1.0), zeros({2}, 0.0);
  const Tensor c = layer_norm(Tensor::matrix({{5, 5}}), ones, zeros, 1e-12);
  CHECK(c(0, 0) == 0.0);
  CHECK(c(0, 1) == 0.0);

  const Tensor n = layer_norm(Tensor::matrix({{1, -1}}), ones, zeros, 1e-12);
  CHECK(n(0, 0) == doctest::Approx(1.0).epsilon(1e-11));
  CHECK(n(0, 1) == doctest::Approx(-1.0).epsilon(1e-11));

  Rng rng(1);
  const Tensor x = random_tensor({3, 5}, rng);
  const Tensor b({5}, 0.25);
  const Tensor g = layer_norm(x, Tensor({5}, 0.0), b, 1e-6);
  for (double v : g.data()) CHECK(v == 0.25);

  CHECK_THROWS_AS(layer_norm(x, Tensor({4}, 1.0), b, 1e-6), DimensionError);
}

TEST_CASE("layer_norm rows have zero mean, unit variance and ignore row offsets") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 2 + uniform_index(rng, 7);
    const std::size_t r = 1 + uniform_index(rng, 8);
    const Tensor x = random_tensor({r, d}, rng);
    const Tensor ones({d}, 1.0), zeros({d}, 0.0);
    const Tensor y = layer_norm(x, ones, zeros, 1e-14);
    Tensor shifted = x;
    for (std::size_t i = 0; i < r; ++i) {
      const double c = uniform(rng, -50.0, 50.0);
      for (auto& v : shifted.row(i)) v += c;
    }
    const Tensor ys = layer_norm(shifted, ones, zeros, 1e-14);
    CHECK(max_abs_diff(y, ys) <= 1e-9);
    for (std::size_t i = 0; i < r; ++i) {
      double mean = 0.0, var = 0.0;
      for (double v : y.row(i)) mean += v;
      mean /= static_cast<double>(d);
      for (double v : y.row(i)) var += (v - mean) * (v - mean);
      var /= static_cast<double>(d);
      CHECK(std::abs(mean) <= 1e-9);
      CHECK(std::abs(var - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("adam: zero gradient leaves a fresh parameter unchanged") {
  Tensor p = Tensor::vector({0.3, -1.2});
  AdamState s = make_adam_state(p.shape());
  auto [p2, s2] = adam_step(p, Tensor({2}), s, 0.01);
  CHECK(p2 == p);
  CHECK(s2.t == 1);
}

TEST_CASE("adam: one unit step moves by about -lr") {
  const double lr = 0.05;
  auto [p, s] = adam_step(Tensor::vector({0.0}), Tensor::vector({1.0}), make_adam_state({1}), lr);
  // m_hat = v_hat = 1 after bias correction.
  CHECK(p[0] == doctest::Approx(-lr / (1.0 + 1e-9)).epsilon(1e-15));
}

TEST_CASE("adam: momentum keeps moving after the gradient stops") {
  const double lr = 0.1, b1 = 0.9, b2 = 0.98, eps = 1e-9;
  Tensor p = Tensor::vector({0.0});
  AdamState s = make_adam_state({1});
  adam_update(p, Tensor::vector({1.0}), s, lr);
  double expected = -lr / (1.0 + eps);
  double last_step = std::abs(expected);
  for (int t = 2; t <= 3; ++t) {
    const double before = p[0];
    adam_update(p, Tensor::vector({0.0}), s, lr);
    // With a single unit gradient at step 1: m_t = (1-b1) b1^(t-1), v_t = (1-b2) b2^(t-1).
    const double m_hat = (1 - b1) * std::pow(b1, t - 1) / (1 - std::pow(b1, t));
    const double v_hat = (1 - b2) * std::pow(b2, t - 1) / (1 - std::pow(b2, t));
    expected -= lr * m_hat / (std::sqrt(v_hat) + eps);
    CHECK(p[0] == doctest::Approx(expected).epsilon(1e-14));
    const double step = before - p[0];
    CHECK(step > 0.0);
    CHECK(step < last_step);
    last_step = step;
  }
}

TEST_CASE("adam: lr = 0 is the identity on parameters but advances state") {
  Rng rng(9);
  Tensor p = random_tensor({3, 4}, rng);
  const Tensor before = p;
  AdamState s = make_adam_state(p.shape());
  for (int i = 0; i < 5; ++i) adam_update(p, random_tensor({3, 4}, rng), s, 0.0);
  CHECK(p == before);
  CHECK(s.t == 5);
}

TEST_CASE("adam refuses non-finite gradients without touching state") {
  Tensor p = Tensor::vector({1.0, 2.0});
  AdamState s = make_adam_state(p.shape());
  CHECK_THROWS_AS(adam_update(p, Tensor::vector({INFINITY, 0.0}), s, 0.1), NumericError);
  CHECK(s.t == 0);
  CHECK(p == Tensor::vector({1.0, 2.0}));
  CHECK_THROWS_AS(adam_update(p, Tensor({3}), s, 0.1), DimensionError);
}

TEST_CASE("finite_diff_check: linear op is exact") {
  Rng rng(2);
  const Tensor w = random_tensor({3, 2}, rng);
  auto f = [&w](Tape& t, std::span<const Var> in) { return ag::sum(ag::matmul(in[0], t.constant(w))); };
  const auto r = finite_diff_check(f, {random_tensor({4, 3}, rng)}, 1e-4);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-8);
}

TEST_CASE("finite_diff_check: softmax composed with a weighted sum") {
  Rng rng(4);
  const Tensor w = random_tensor({3, 5}, rng);
  auto f = [&w](Tape&, std::span<const Var> in) { return psyt::testing::weighted_sum(ag::softmax(in[0]), w); };
  const auto r = finite_diff_check(f, {random_tensor({3, 5}, rng)}, 1e-4);
  CHECK(r.passed);
}

TEST_CASE("finite_diff_check flags a deliberately wrong gradient") {
  Rng rng(6);
  auto f = [](Tape& t, std::span<const Var> in) {
    Var x = in[0];
    Tensor sq = x.value();
    for (auto& v : sq.data()) v = v * v;
    // d(x^2)/dx is 2x; report 3x instead.
    Var y = t.record(std::move(sq), {x}, [x](Tape& tt, const Tensor& g, const Tensor&) {
      Tensor& gx = tt.grad_slot(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 3.0 * tt.value(x)[i] * g[i];
    });
    return ag::sum(y);
  };
  const auto r = finite_diff_check(f, {random_tensor({2, 3}, rng)}, 1e-4);
  CHECK_FALSE(r.passed);
  CHECK(r.max_rel_error > 0.1);
}

TEST_CASE("each differentiable op matches central differences") {
  Rng rng(21);
  auto dim = [&rng] { return 1 + static_cast<std::size_t>(uniform_index(rng, 8)); };
  auto check = [&rng](auto op, std::vector<Tensor> points) {
    // Contract the op output with a random probe so the check sees every output entry.
    Tensor probe;
    auto f = [&](Tape& t, std::span<const Var> in) {
      Var y = op(t, in);
      if (probe.empty()) probe = random_tensor(y.value().shape(), rng);
      return psyt::testing::weighted_sum(y, probe);
    };
    return finite_diff_check(f, std::move(points), 1e-4);
  };
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = dim(), k = dim(), m = dim() + 1;
    CHECK(check([](Tape&, std::span<const Var> in) { return ag::matmul(in[0], in[1]); },
                {random_tensor({n, k}, rng), random_tensor({k, m}, rng)})
              .passed);
    CHECK(check([](Tape&, std::span<const Var> in) { return ag::add(in[0], in[1]); },
                {random_tensor({n, m}, rng), random_tensor({n, m}, rng)})
              .passed);
    CHECK(check([](Tape&, std::span<const Var> in) { return ag::add_row(in[0], in[1]); },
                {random_tensor({n, m}, rng), random_tensor({m}, rng)})
              .passed);
    CHECK(check([](Tape&, std::span<const Var> in) { return ag::scale(in[0], -1.7); }, {random_tensor({n, m}, rng)})
              .passed);
    CHECK(check([](Tape&, std::span<const Var> in) { return ag::transpose(in[0]); }, {random_tensor({n, m}, rng)})
              .passed);
    CHECK(check([](Tape&, std::span<const Var> in) { return ag::softmax(in[0]); }, {random_tensor({n, m}, rng)})
              .passed);
    CHECK(check([](Tape&, std::span<const Var> in) { return ag::layer_norm(in[0], in[1], in[2], 1e-6); },
                {random_tensor({n, m}, rng), random_tensor({m}, rng), random_tensor({m}, rng)})
              .passed);
    const std::vector<std::int32_t> ids{0, 2, 2, 1};
    CHECK(check([&ids](Tape&, std::span<const Var> in) { return ag::embedding(in[0], ids); },
                {random_tensor({3, m}, rng)})
              .passed);
    const std::vector<std::int32_t> targets{1, 0, 2};
    CHECK(check([&targets](Tape&, std::span<const Var> in) { return ag::masked_cross_entropy(in[0], targets, 0); },
                {random_tensor({3, 4}, rng)})
              .passed);
  }
}

TEST_CASE("relu gradient away from the kink") {
  Rng rng(8);
  Tensor x = random_tensor({4, 4}, rng);
  for (auto& v : x.data())
    if (std::abs(v) < 0.1) v = 0.5;
  const Tensor w = random_tensor({4, 4}, rng);
  auto f = [&w](Tape&, std::span<const Var> in) { return psyt::testing::weighted_sum(ag::relu(in[0]), w); };
  CHECK(finite_diff_check(f, {x}, 1e-6).passed);
}

TEST_CASE("tape surfaces non-finite forward values") {
  Tape t;
  Var x = t.variable(Tensor::vector({1.0, 2.0}));
  CHECK_THROWS_AS(ag::scale(x, INFINITY), NumericError);
}

TEST_CASE("masked cross-entropy needs a non-pad target") {
  Tape t;
  Var x = t.variable(Tensor({2, 3}));
  const std::vector<std::int32_t> all_pad{0, 0};
  CHECK_THROWS_AS(ag::masked_cross_entropy(x, all_pad, 0), std::invalid_argument);
}
