#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "slufuse/gradcheck.hpp"
#include "slufuse/graph.hpp"

using slufuse::Graph;
using slufuse::ParamStore;
using slufuse::Rng;
using slufuse::Tensor;
using slufuse::Var;

namespace {

// loss sensitive to every element: sum(x o w) with fixed random weights
template <class S>
Var weighted_sum(Graph<S>& g, Var x, std::uint64_t seed) {
  Rng rng(seed);
  auto w = testutil::random_tensor<S>(g.val(x).shape(), rng, 0.5, 1.5);
  return g.sum_all(g.mul(x, g.constant(std::move(w))));
}

}  // namespace

TEST_CASE("backward of sum of squares") {
  ParamStore<double> ps;
  auto w = ps.add("w", Tensor<double>::vec({1, 2}));
  Graph<double> g(&ps);
  Var wv = g.param(w);
  Var loss = g.sum_all(g.mul(wv, wv));
  ps.zero_grads();
  g.backward(loss);
  CHECK(ps.grad(w)[0] == Catch::Approx(2.0));
  CHECK(ps.grad(w)[1] == Catch::Approx(4.0));
}

TEST_CASE("constant loss leaves all parameter gradients exactly zero") {
  ParamStore<double> ps;
  auto w = ps.add("w", Tensor<double>::vec({1, 2, 3}));
  Graph<double> g(&ps);
  (void)g.param(w);  // registered but unused by the loss
  Var loss = g.constant(Tensor<double>({1, 1}, {5.0}));
  ps.zero_grads();
  g.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) CHECK(ps.grad(w)[i] == 0.0);
}

TEST_CASE("node used twice accumulates both path gradients") {
  ParamStore<double> ps;
  auto w = ps.add("w", Tensor<double>::vec({1.5, -2.0}));

  // loss = sum(w + w); gradient must be 2 everywhere
  {
    Graph<double> g(&ps);
    Var wv = g.param(w);
    ps.zero_grads();
    g.backward(g.sum_all(g.add(wv, wv)));
    CHECK(ps.grad(w)[0] == Catch::Approx(2.0));
    CHECK(ps.grad(w)[1] == Catch::Approx(2.0));
  }
  // same node feeding two heads: loss = sum(w o w) + sum(w)
  {
    Graph<double> g(&ps);
    Var wv = g.param(w);
    Var l = g.add(g.sum_all(g.mul(wv, wv)), g.sum_all(wv));
    ps.zero_grads();
    g.backward(l);
    CHECK(ps.grad(w)[0] == Catch::Approx(2 * 1.5 + 1));
    CHECK(ps.grad(w)[1] == Catch::Approx(2 * -2.0 + 1));
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  ParamStore<double> ps;
  auto w = ps.add("w", Tensor<double>::vec({1, 2}));
  Graph<double> g(&ps);
  CHECK_THROWS_AS(g.backward(g.param(w)), std::invalid_argument);
}

TEST_CASE("matmul chain matches central differences") {
  ParamStore<double> ps;
  Rng rng(11);
  auto a = ps.add("a", testutil::random_tensor<double>({3, 3}, rng));
  auto b = ps.add("b", testutil::random_tensor<double>({3, 3}, rng));
  auto c = ps.add("c", testutil::random_tensor<double>({3, 3}, rng));
  auto report = slufuse::grad_check(
      [&](Graph<double>& g) {
        return weighted_sum(
            g, g.matmul(g.matmul(g.param(a), g.param(b)), g.param(c)), 5);
      },
      ps, 1e-5, 1e-6);
  INFO("worst " << report.worst_param << " rel err " << report.max_rel_err);
  CHECK(report.pass);
}

TEST_CASE("quadratic passes grad_check at tight tolerance") {
  ParamStore<double> ps;
  Rng rng(3);
  auto w = ps.add("w", testutil::random_tensor<double>({4}, rng));
  auto report = slufuse::grad_check(
      [&](Graph<double>& g) {
        Var wv = g.param(w);
        return g.sum_all(g.mul(wv, wv));
      },
      ps, 1e-5, 1e-6);
  CHECK(report.pass);
  CHECK(report.step == 1e-5);
  CHECK(report.tolerance == 1e-6);
  CHECK(report.pass == (report.max_rel_err < report.tolerance));
}

TEST_CASE("sigmoid-dense-softmax-CE composite passes grad_check") {
  ParamStore<double> ps;
  Rng rng(17);
  auto w1 = ps.add("w1", testutil::random_tensor<double>({5, 4}, rng));
  auto b1 = ps.add("b1", testutil::random_tensor<double>({4}, rng, -0.1, 0.1));
  auto w2 = ps.add("w2", testutil::random_tensor<double>({4, 3}, rng));
  auto x = testutil::random_tensor<double>({6, 5}, rng);
  std::vector<std::int32_t> gold = {0, 1, 2, 1, 0, 2};
  std::vector<double> weights(6, 1.0);
  auto report = slufuse::grad_check(
      [&](Graph<double>& g) {
        Var h = g.sigmoid_(
            g.add_rowvec(g.matmul(g.constant(x), g.param(w1)), g.param(b1)));
        return g.softmax_ce_rows(g.matmul(h, g.param(w2)), gold, weights);
      },
      ps, 1e-5, 1e-4);
  INFO("worst " << report.worst_param << " rel err " << report.max_rel_err);
  CHECK(report.pass);
}

TEST_CASE("grad_check detects a corrupted gradient") {
  ParamStore<double> ps;
  auto w = ps.add("w", Tensor<double>::vec({1.0, 2.0}));
  // forward computes sum(w^2) but the pull pushes back twice the true grad
  auto report = slufuse::grad_check(
      [&](Graph<double>& g) {
        Var wv = g.param(w);
        const auto& v = g.val(wv);
        double s = 0;
        for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * v[i];
        Var out = g.custom_node(Tensor<double>({1, 1}, {s}), g.needs(wv));
        g.set_pull(out, [&g, out, wv]() {
          const auto& v = g.val(wv);
          auto& gw = g.grad(wv);
          for (std::size_t i = 0; i < v.size(); ++i)
            gw[i] += g.grad(out)[0] * 4.0 * v[i];  // should be 2*v
        });
        return out;
      },
      ps, 1e-5, 1e-4);
  CHECK_FALSE(report.pass);
}

TEST_CASE("primitive ops pass grad_check over random shapes") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng shapes(seed * 977 + 13);
    const std::size_t r = 2 + shapes.next_below(4);
    const std::size_t c = 2 + shapes.next_below(4);
    const std::size_t k = 2 + shapes.next_below(3);

    ParamStore<double> ps;
    Rng rng(seed + 1);
    auto a = ps.add("a", testutil::random_tensor<double>({r, c}, rng));
    auto b = ps.add("b", testutil::random_tensor<double>({r, c}, rng));
    auto m = ps.add("m", testutil::random_tensor<double>({c, k}, rng));
    auto bias = ps.add("bias", testutil::random_tensor<double>({k}, rng));

    auto check = [&](const char* what, auto builder) {
      auto report = slufuse::grad_check(builder, ps, 1e-5, 1e-4);
      INFO("op " << what << " seed " << seed << " worst "
                 << report.worst_param << " rel " << report.max_rel_err);
      CHECK(report.pass);
    };

    check("add|mul|sub|scale", [&](Graph<double>& g) {
      Var av = g.param(a), bv = g.param(b);
      Var t = g.add(g.mul(av, bv), g.scale(g.sub(av, bv), 0.7));
      return weighted_sum(g, t, seed);
    });
    check("tanh|sigmoid", [&](Graph<double>& g) {
      return weighted_sum(g, g.tanh_(g.sigmoid_(g.param(a))), seed);
    });
    check("relu", [&](Graph<double>& g) {
      // inputs bounded away from the kink
      Var shifted = g.add(g.param(a), g.constant(Tensor<double>({r, c}, 3.0)));
      return weighted_sum(g, g.relu_(shifted), seed);
    });
    check("matmul|add_rowvec", [&](Graph<double>& g) {
      return weighted_sum(
          g, g.add_rowvec(g.matmul(g.param(a), g.param(m)),
                          g.param(ps.id_of("bias"))),
          seed);
    });
    check("concat|slice", [&](Graph<double>& g) {
      Var cat = g.concat_cols(g.param(a), g.param(b));
      Var s1 = g.slice_cols(cat, 1, c + 1);
      Var s2 = g.slice_rows(cat, 0, r > 1 ? r - 1 : 1);
      return g.add(weighted_sum(g, s1, seed), weighted_sum(g, s2, seed + 1));
    });
    check("concat_rows|reshape", [&](Graph<double>& g) {
      Var stacked = g.concat_rows({g.param(a), g.param(b)});
      return weighted_sum(g, g.reshape(stacked, {c, 2 * r}), seed);
    });
    check("repeat|block_rowsum|permute", [&](Graph<double>& g) {
      Var rep = g.repeat_each_row(g.param(a), 3);  // (r*3) x c
      Var tm = g.to_time_major(rep, r, 3);
      Var bm = g.to_batch_major(tm, r, 3);
      Var bs = g.block_rowsum(bm, c);  // (r*3) x 1
      return weighted_sum(g, bs, seed);
    });
    check("gather_rows", [&](Graph<double>& g) {
      std::vector<std::int32_t> ids = {0, static_cast<std::int32_t>(r - 1), 0};
      return weighted_sum(g, g.gather_rows(g.param(a), ids, /*pad_id=*/-1),
                          seed);
    });
    check("softmax_rows", [&](Graph<double>& g) {
      return weighted_sum(g, g.softmax_rows(g.param(a)), seed);
    });
    check("softmax_ce", [&](Graph<double>& g) {
      std::vector<std::int32_t> gold(r);
      std::vector<double> w(r, 1.0);
      for (std::size_t i = 0; i < r; ++i) gold[i] = i % c;
      if (r > 1) w[r - 1] = 0.0;  // one masked row
      return g.softmax_ce_rows(g.param(a), gold, w);
    });
    check("im2col|maxpool", [&](Graph<double>& g) {
      // one utterance of r steps; width-2 windows, max-pooled over time
      const std::size_t w = std::min<std::size_t>(2, r);
      Var win = g.im2col_seq(g.param(a), 1, r, w);
      Var pooled = g.maxpool_time(win, 1, r - w + 1);
      return weighted_sum(g, pooled, seed);
    });
  }
}

TEST_CASE("dropout pullback respects its mask") {
  ParamStore<double> ps;
  Rng rng(5);
  auto a = ps.add("a", testutil::random_tensor<double>({6, 5}, rng));
  auto report = slufuse::grad_check(
      [&](Graph<double>& g) {
        Rng drop(99);  // fixed per rebuild: same mask every evaluation
        return weighted_sum(g, g.dropout(g.param(a), 0.4, drop), 2);
      },
      ps, 1e-5, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("value-only graphs refuse backward") {
  ParamStore<double> ps;
  auto w = ps.add("w", Tensor<double>::vec({1}));
  Graph<double> g(&ps, /*record=*/false);
  Var loss = g.sum_all(g.param(w));
  CHECK_THROWS_AS(g.backward(loss), std::logic_error);
}
