#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "slufuse/ops.hpp"

using slufuse::Pointwise;
using slufuse::Rng;
using slufuse::ShapeError;
using slufuse::Tensor;

namespace {

// independent triple-loop reference for matmul
template <class S>
Tensor<S> matmul_ref(const Tensor<S>& a, const Tensor<S>& b) {
  const std::size_t m = a.shape()[0], p = a.shape()[1], n = b.shape()[1];
  Tensor<S> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < p; ++t) c.at(i, j) += a.at(i, t) * b.at(t, j);
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  auto c = slufuse::matmul(eye, a);
  CHECK(testutil::max_abs_diff(c, a) == 0.0);

  Tensor<double> r({1, 2}, {1, 2});
  Tensor<double> col({2, 1}, {3, 4});
  auto s = slufuse::matmul(r, col);
  REQUIRE(s.shape() == slufuse::Shape{1, 1});
  CHECK(s[0] == 11.0);
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor<double> a({5, 7});
  Tensor<double> b({3, 3});
  try {
    slufuse::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[5,7]") != std::string::npos);
    CHECK(msg.find("[3,3]") != std::string::npos);
  }
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(42);
  auto a = testutil::random_tensor<double>({5, 7}, rng);
  auto b = testutil::random_tensor<double>({7, 3}, rng);
  CHECK(testutil::max_abs_diff(slufuse::matmul(a, b), matmul_ref(a, b)) < 1e-12);
}

TEST_CASE("matmul associativity on random 4x4s") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto a = testutil::random_tensor<double>({4, 4}, rng);
    auto b = testutil::random_tensor<double>({4, 4}, rng);
    auto c = testutil::random_tensor<double>({4, 4}, rng);
    auto left = slufuse::matmul(slufuse::matmul(a, b), c);
    auto right = slufuse::matmul(a, slufuse::matmul(b, c));
    CHECK(testutil::max_abs_diff(left, right) < 1e-9);
  }
}

TEST_CASE("elementwise hand arithmetic") {
  auto a = Tensor<double>::vec({1, 2, 3});
  auto b = Tensor<double>::vec({4, 5, 6});
  auto h = slufuse::elementwise(Pointwise::hadamard, a, &b);
  CHECK(h[0] == 4.0);
  CHECK(h[1] == 10.0);
  CHECK(h[2] == 18.0);

  auto sig = slufuse::elementwise(Pointwise::sigmoid, Tensor<double>::vec({0}));
  CHECK(sig[0] == Catch::Approx(0.5));

  auto th = slufuse::elementwise(Pointwise::tanh, Tensor<double>::vec({0, 0}));
  CHECK(th[0] == 0.0);
  CHECK(th[1] == 0.0);

  auto sum = slufuse::elementwise(Pointwise::add, a, &b);
  CHECK(sum[2] == 9.0);

  auto sc = slufuse::elementwise(Pointwise::scale, a, nullptr, 3.0);
  CHECK(sc[1] == 6.0);
}

TEST_CASE("elementwise rejects shape mismatch and missing operand") {
  auto a = Tensor<double>::vec({1, 2, 3});
  auto b = Tensor<double>::vec({1, 2});
  CHECK_THROWS_AS(slufuse::elementwise(Pointwise::add, a, &b), ShapeError);
  CHECK_THROWS_AS(slufuse::elementwise(Pointwise::hadamard, a), ShapeError);
}

TEST_CASE("softmax symmetry and stability") {
  auto s = slufuse::softmax(Tensor<double>::vec({0, 0}), 0);
  CHECK(s[0] == Catch::Approx(0.5));
  CHECK(s[1] == Catch::Approx(0.5));

  auto big = slufuse::softmax(Tensor<double>::vec({1000, 0}), 0);
  REQUIRE(big.all_finite());
  CHECK(big[0] == Catch::Approx(1.0));
  CHECK(big[1] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("softmax matches direct formula") {
  Rng rng(7);
  auto v = testutil::random_tensor<double>({10}, rng, -3, 3);
  auto s = slufuse::softmax(v, 0);
  double denom = 0;
  for (std::size_t i = 0; i < 10; ++i) denom += std::exp(v[i]);
  for (std::size_t i = 0; i < 10; ++i)
    CHECK(std::abs(s[i] - std::exp(v[i]) / denom) < 1e-12);
}

TEST_CASE("softmax slices sum to one over random tensors") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    Rng rng(seed * 31 + 1);
    const std::size_t r = 1 + rng.next_below(6), c = 1 + rng.next_below(9);
    auto x = testutil::random_tensor<float>({r, c}, rng, -20, 20);
    const std::size_t axis = rng.next_below(2);
    auto s = slufuse::softmax(x, axis);
    const std::size_t outer = axis == 0 ? c : r;
    for (std::size_t o = 0; o < outer; ++o) {
      double sum = 0;
      for (std::size_t e = 0; e < (axis == 0 ? r : c); ++e)
        sum += axis == 0 ? s.at(e, o) : s.at(o, e);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("softmax rejects bad axis") {
  CHECK_THROWS_AS(slufuse::softmax(Tensor<double>::vec({1, 2}), 3), ShapeError);
}

TEST_CASE("logsumexp analytic values") {
  CHECK(slufuse::logsumexp(Tensor<double>::vec({0, 0})) ==
        Catch::Approx(std::log(2.0)));
  CHECK(slufuse::logsumexp(Tensor<double>::vec({5})) == Catch::Approx(5.0));
  double big = slufuse::logsumexp(Tensor<double>::vec({1000, 1000}));
  CHECK(std::isfinite(big));
  CHECK(big == Catch::Approx(1000.0 + std::log(2.0)));
  CHECK_THROWS_AS(slufuse::logsumexp<double>(nullptr, 0), ShapeError);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<double>({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, {1, 2, 3}), ShapeError);
  Tensor<double> t({2, 3});
  CHECK(t.size() == 6);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  auto r = t.reshaped({3, 2});
  CHECK(r.rows() == 3);
}
