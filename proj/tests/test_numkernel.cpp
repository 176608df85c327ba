// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "milora/autograd.hpp"
#include "oracles.hpp"

using namespace milora;

namespace {

template <class T>
Var<T> leaf(Tensor<T> t) {
  return Var<T>(std::move(t), /*requires_grad=*/true);
}

}  // namespace

TEST_CASE("matmul forward matches hand arithmetic") {
  auto a = Var<double>(Tensor<double>::matrix({{1, 2}, {3, 4}}));
  auto b = Var<double>(Tensor<double>::matrix({{5, 6}, {7, 8}}));
  auto c = matmul(a, b);
  CHECK(c.value()(0, 0) == 19);
  CHECK(c.value()(0, 1) == 22);
  CHECK(c.value()(1, 0) == 43);
  CHECK(c.value()(1, 1) == 50);
}

TEST_CASE("matmul by identity is identity") {
  Rng rng(11);
  auto a = randn<double>(rng, {3, 3});
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
  auto c = matmul(Var<double>(a), Var<double>(eye));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(c.value()[i] == a[i]);
}

TEST_CASE("matmul rejects mismatched inner dims, names both shapes") {
  Var<double> a(Tensor<double>::zeros({2, 3}));
  Var<double> b(Tensor<double>::zeros({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("gradient of sum(A*B) matches finite differences") {
  Rng rng(5);
  auto a = leaf(randn<double>(rng, {3, 4}));
  auto b = leaf(randn<double>(rng, {4, 2}));
  auto report = finite_diff_check<double>(
      [&] { return sum_all(matmul(a, b)); }, {{"a", a}, {"b", b}}, 1e-5, 1e-6);
  CHECK(report.pass);
}

TEST_CASE("softmax_rows symmetry and stability") {
  auto y = softmax_rows(Var<double>(Tensor<double>::matrix({{0, 0}})));
  CHECK(y.value()(0, 0) == Catch::Approx(0.5));
  CHECK(y.value()(0, 1) == Catch::Approx(0.5));

  auto big = softmax_rows(Var<double>(Tensor<double>::matrix({{1000, 1000}})));
  CHECK(big.value()(0, 0) == Catch::Approx(0.5));
  CHECK(big.value().all_finite());

  auto s = softmax_rows(Var<double>(Tensor<double>::matrix({{1, 0}})));
  CHECK(s.value()(0, 0) == Catch::Approx(0.7311).margin(1e-4));
  CHECK(s.value()(0, 1) == Catch::Approx(0.2689).margin(1e-4));
}

TEST_CASE("softmax_rows rows sum to one across magnitudes") {
  Rng rng(17);
  for (int rep = 0; rep < 50; ++rep) {
    std::size_t m = 1 + rng.below(6), n = 1 + rng.below(8);
    Tensor<double> x({m, n});
    for (auto& v : x.data()) v = rng.uniform(-1e4, 1e4);
    auto y = softmax_rows(Var<double>(x));
    for (std::size_t i = 0; i < m; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(y.value()(i, j) >= 0.0);
        sum += y.value()(i, j);
      }
      CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }
  }
}

TEST_CASE("conv2d identity kernel") {
  Rng rng(3);
  auto x = randn<double>(rng, {1, 4, 4});
  Tensor<double> w({1, 1, 1, 1});
  w[0] = 1.0;
  auto y = conv2d(Var<double>(x), Var<double>(w));
  REQUIRE(y.value().shape() == Shape{1, 4, 4});
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x[i]);
}

TEST_CASE("conv2d all-ones 3x3 sums to 9") {
  auto x = Tensor<double>::full({1, 3, 3}, 1.0);
  auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(Var<double>(x), Var<double>(w));
  REQUIRE(y.value().shape() == Shape{1, 1, 1});
  CHECK(y.value()[0] == Catch::Approx(9.0));
}

TEST_CASE("conv2d rejects oversized kernel") {
  Var<double> x(Tensor<double>::zeros({1, 2, 2}));
  Var<double> w(Tensor<double>::zeros({1, 1, 3, 3}));
  CHECK_THROWS_AS(conv2d(x, w), ShapeError);
}

TEST_CASE("conv2d dw and dx match finite differences on random input") {
  Rng rng(23);
  auto x = leaf(randn<double>(rng, {1, 4, 4}));
  auto w = leaf(randn<double>(rng, {2, 1, 3, 3}));
  auto report = finite_diff_check<double>(
      [&] { return sum_all(conv2d(x, w)); }, {{"x", x}, {"w", w}}, 1e-5, 1e-6);
  CHECK(report.pass);
}

TEST_CASE("frobenius_sq hand cases and gradient") {
  auto a = Var<double>(Tensor<double>::matrix({{1, 2}, {3, 4}}));
  CHECK(frobenius_sq(a).value()[0] == 30.0);
  CHECK(frobenius_sq(Var<double>(Tensor<double>::zeros({3, 3}))).value()[0] == 0.0);

  Rng rng(7);
  auto x = leaf(randn<double>(rng, {4, 3}));
  x.zero_grad();
  auto y = frobenius_sq(x);
  backward(y);
  for (std::size_t i = 0; i < x.value().numel(); ++i)
    CHECK(x.grad()[i] == Catch::Approx(2.0 * x.value()[i]).epsilon(1e-12));

  auto report = finite_diff_check<double>([&] { return frobenius_sq(x); },
                                          {{"x", x}}, 1e-5, 1e-6);
  CHECK(report.pass);
}

TEST_CASE("finite_diff_check quadratic is exact and wrong backward is caught") {
  Rng rng(9);
  auto theta = leaf(randn<double>(rng, {5}));
  auto report = finite_diff_check<double>(
      [&] { return frobenius_sq(theta); }, {{"theta", theta}}, 1e-6, 1e-9);
  CHECK(report.pass);

  // Negative control: an op whose backward drops the factor 2.
  auto broken_sq = [](const Var<double>& v) {
    double acc = 0;
    for (double x : v.value().data()) acc += x * x;
    return detail::make_op<double>("broken_sq", Tensor<double>(Shape{1}, acc),
                                   {v.node()}, [](Node<double>& n) {
                                     for (std::size_t i = 0; i < n.parents[0]->grad.numel(); ++i)
                                       n.parents[0]->grad[i] += n.grad[0] * n.parents[0]->value[i];
                                   });
  };
  auto bad = finite_diff_check<double>([&] { return broken_sq(theta); },
                                       {{"theta", theta}}, 1e-6, 1e-4);
  CHECK_FALSE(bad.pass);
}

TEST_CASE("finite_diff_check reports non-finite loss") {
  auto theta = leaf(Tensor<double>(Shape{1}, 0.0));
  bool saved = finite_checks_enabled();
  finite_checks_enabled() = false;  // let the nan reach the oracle
  auto build = [&] {
    double v = 1.0 / theta.value()[0];  // inf at the base point
    return Var<double>(Tensor<double>(Shape{1}, v));
  };
  CHECK_THROWS_AS(finite_diff_check<double>(build, {{"theta", theta}}, 1e-6, 1e-4),
                  NumericError);
  finite_checks_enabled() = saved;
}

TEST_CASE("every primitive passes gradient check on randomized shapes") {
  Rng rng(31);
  for (int rep = 0; rep < 8; ++rep) {
    std::size_t m = 2 + rng.below(15), p = 2 + rng.below(15), n = 2 + rng.below(15);
    auto a = leaf(randn<double>(rng, {m, p}));
    auto b = leaf(randn<double>(rng, {p, n}));
    auto c = leaf(randn<double>(rng, {m, n}));
    std::vector<ParamRef<double>> params{{"a", a}, {"b", b}, {"c", c}};
    auto build = [&] {
      auto prod = matmul(a, b);
      auto mixed = add(softmax_rows(prod), scale(c, 0.25));
      auto activated = add(gelu(mixed), sigmoid(transpose(transpose(mixed))));
      return frobenius_sq(add(activated, relu(c)));
    };
    auto report = finite_diff_check<double>(build, params, 1e-5, 1e-4);
    INFO("rep " << rep << " shapes " << m << "x" << p << "x" << n
                << " worst " << report.worst);
    CHECK(report.pass);
  }
}

TEST_CASE("reduction and reshaping primitives pass gradient check") {
  Rng rng(37);
  auto x = leaf(randn<double>(rng, {4, 6}));
  auto y = leaf(randn<double>(rng, {4, 6}));
  auto bias = leaf(randn<double>(rng, {6}));
  auto build = [&] {
    auto zrow = mean_axis0(x);
    auto stacked = stack_rows<double>({row(x, 0), row(x, 2), row(y, 1)});
    auto cat = concat_cols(stacked, stacked);
    auto reshaped = reshape(cat, {2, 18});
    auto biased = add_rowvec(x, bias);
    return add(add(frobenius_sq(reshaped), frobenius_sq(biased)),
               add(sum_all(zrow), sum_all(sub(x, y))));
  };
  auto report = finite_diff_check<double>(build, {{"x", x}, {"y", y}, {"bias", bias}},
                                          1e-5, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("loss primitives pass gradient check") {
  Rng rng(41);
  auto logits = leaf(randn<double>(rng, {6}));
  auto rows = leaf(randn<double>(rng, {3, 5}));
  std::vector<double> targets{1, 0, 1, 1, 0, 0};
  std::vector<std::size_t> tokens{2, 0, 4};
  auto report = finite_diff_check<double>(
      [&] {
        return add(bce_with_logits(logits, targets), cross_entropy_rows(rows, tokens));
      },
      {{"logits", logits}, {"rows", rows}}, 1e-5, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("weighted_sum convex_blend and masked_softmax pass gradient check") {
  Rng rng(43);
  auto w = leaf(randn<double>(rng, {3}));
  auto m0 = leaf(randn<double>(rng, {2, 2}));
  auto m1 = leaf(randn<double>(rng, {2, 2}));
  auto m2 = leaf(randn<double>(rng, {2, 2}));
  auto alpha_logit = leaf(randn<double>(rng, {1}));
  auto build = [&] {
    auto g = masked_softmax(w, {true, true, true});
    auto mix = weighted_sum<double>({m0, m1, m2}, g);
    auto blended = convex_blend(sigmoid(alpha_logit), mix, m0);
    return frobenius_sq(blended);
  };
  auto report = finite_diff_check<double>(
      build, {{"w", w}, {"m0", m0}, {"m1", m1}, {"m2", m2}, {"alpha", alpha_logit}},
      1e-5, 1e-4);
  CHECK(report.pass);

  // Top-style mask: dropped entries get exact zeros and no gradient.
  auto g = masked_softmax(w, {true, false, true});
  CHECK(g.value()[1] == 0.0);
  w.zero_grad();
  backward(sum_all(scale(g, 2.0)));
  CHECK(w.grad()[1] == 0.0);
}

TEST_CASE("operations are deterministic") {
  Rng rng1(77), rng2(77);
  auto a1 = randn<double>(rng1, {8, 8});
  auto a2 = randn<double>(rng2, {8, 8});
  REQUIRE(a1.data() == a2.data());
  auto y1 = softmax_rows(matmul(Var<double>(a1), Var<double>(a1)));
  auto y2 = softmax_rows(matmul(Var<double>(a2), Var<double>(a2)));
  CHECK(y1.value().data() == y2.value().data());
}

TEST_CASE("non-finite op outputs are rejected eagerly") {
  REQUIRE(finite_checks_enabled());
  Tensor<double> big({1, 2});
  big[0] = 1e308;
  big[1] = 1e308;
  Var<double> x(big);
  CHECK_THROWS_AS(matmul(x, transpose(x)), NumericError);
}

TEST_CASE("backward visits shared subgraphs once") {
  auto x = leaf(Tensor<double>(Shape{1}, 3.0));
  auto sq = frobenius_sq(x);   // x^2
  auto y = add(sq, sq);        // 2 x^2; gradient 4x = 12
  x.zero_grad();
  backward(y);
  CHECK(x.grad()[0] == Catch::Approx(12.0));
}
