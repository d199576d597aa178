#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flowcast/tape.hpp"
#include "helpers.hpp"

using namespace flowcast;

TEST_CASE("matmul_masked identity and annihilation") {
  Tape t;
  Tensor a = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor w = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor ones = Tensor::ones({2, 3});
  Tensor zeros = Tensor::zeros({2, 3});

  Var r1 = t.matmul_masked(t.constant(a), t.constant(w), ones);
  for (std::size_t k = 0; k < 6; ++k) REQUIRE(t.value(r1)[k] == w[k]);

  Var r0 = t.matmul_masked(t.constant(a), t.constant(w), zeros);
  for (std::size_t k = 0; k < 6; ++k) REQUIRE(t.value(r0)[k] == 0.0);
}

TEST_CASE("matmul_masked hand-evaluated products") {
  Tape t;
  Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Tensor mask = Tensor::matrix(2, 2, {1, 0, 1, 1});

  // w (.) mask = [[1,0],[0,1]]: the product reproduces a
  Tensor w_id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Var r = t.matmul_masked(t.constant(a), t.constant(w_id), mask);
  REQUIRE(t.value(r)(0, 0) == 1.0);
  REQUIRE(t.value(r)(0, 1) == 2.0);
  REQUIRE(t.value(r)(1, 0) == 3.0);
  REQUIRE(t.value(r)(1, 1) == 4.0);

  // w all ones, w (.) mask = [[1,0],[1,1]]: columns by hand
  Tensor w_ones = Tensor::ones({2, 2});
  Var r2 = t.matmul_masked(t.constant(a), t.constant(w_ones), mask);
  REQUIRE(t.value(r2)(0, 0) == 3.0);
  REQUIRE(t.value(r2)(0, 1) == 2.0);
  REQUIRE(t.value(r2)(1, 0) == 7.0);
  REQUIRE(t.value(r2)(1, 1) == 4.0);
}

TEST_CASE("matmul_masked rejects mismatched shapes and bad masks") {
  Tape t;
  Var a = t.constant(Tensor::zeros({2, 3}));
  Var w = t.constant(Tensor::zeros({2, 2}));
  REQUIRE_THROWS_AS(t.matmul_masked(a, w, Tensor::zeros({2, 2})), UsageError);
  Var w2 = t.constant(Tensor::zeros({3, 2}));
  Tensor bad = Tensor::full({3, 2}, 0.5);
  REQUIRE_THROWS_AS(t.matmul_masked(a, w2, bad), UsageError);
}

TEST_CASE("backward of sum gives all-ones gradient") {
  Tape t;
  Param p{"p", Tensor::matrix(2, 3, {1, -2, 3, 4, -5, 6}), false};
  Var v = t.leaf(p.value, true);
  Gradients g = t.backward(t.sum_all(v));
  for (std::size_t k = 0; k < 6; ++k) REQUIRE(g.at(v)[k] == 1.0);
}

TEST_CASE("backward of half square sum gives the parameter back") {
  Tape t;
  Tensor pv = Tensor::row({1.5, -2.0, 0.25});
  Var v = t.leaf(pv, true);
  Var loss = t.mul_scalar(t.sum_all(t.mul(v, v)), 0.5);
  Gradients g = t.backward(loss);
  for (std::size_t k = 0; k < 3; ++k) REQUIRE(g.at(v)[k] == Catch::Approx(pv[k]).epsilon(1e-14));
}

TEST_CASE("untouched leaves receive zero gradients") {
  Tape t;
  Var used = t.leaf(Tensor::row({1.0, 2.0}), true);
  Var unused = t.leaf(Tensor::row({3.0, 4.0}), true);
  Gradients g = t.backward(t.sum_all(used));
  REQUIRE(g.at(unused)[0] == 0.0);
  REQUIRE(g.at(unused)[1] == 0.0);
}

TEST_CASE("backward requires a scalar loss") {
  Tape t;
  Var v = t.leaf(Tensor::row({1.0, 2.0}), true);
  REQUIRE_THROWS_AS(t.backward(v), UsageError);
  REQUIRE_THROWS_AS(t.backward(Var{}), UsageError);
}

TEST_CASE("gradient of a random masked two-layer net matches finite differences") {
  Rng rng(11);
  const std::size_t in = 4, hid = 6, out = 3;
  Tensor mask1 = Tensor::zeros({in, hid});
  for (double& v : mask1.raw()) v = rng.uniform() < 0.6 ? 1.0 : 0.0;
  Tensor mask2 = Tensor::zeros({hid, out});
  for (double& v : mask2.raw()) v = rng.uniform() < 0.6 ? 1.0 : 0.0;

  Param w1{"w1", fct::random_matrix(in, hid, rng, 0.5), true};
  Param w2{"w2", fct::random_matrix(hid, out, rng, 0.5), true};
  Param b1{"b1", Tensor::zeros({hid}), false};
  for (double& v : b1.value.raw()) v = 0.1 * rng.normal();
  Tensor x = fct::random_matrix(2, in, rng);
  Tensor target = fct::random_matrix(2, out, rng);

  auto loss_fn = [&]() {
    Tape t;
    Var h = t.tanh(t.add_row(t.matmul_masked(t.constant(x), t.leaf(w1.value), mask1),
                             t.leaf(b1.value)));
    Var y = t.matmul_masked(h, t.leaf(w2.value), mask2);
    Var d = t.sub(y, t.constant(target));
    return t.value(t.mul_scalar(t.sum_all(t.mul(d, d)), 0.5))[0];
  };

  Tape t;
  Var w1v = t.leaf(w1.value, true);
  Var b1v = t.leaf(b1.value, true);
  Var w2v = t.leaf(w2.value, true);
  Var h = t.tanh(t.add_row(t.matmul_masked(t.constant(x), w1v, mask1), b1v));
  Var y = t.matmul_masked(h, w2v, mask2);
  Var d = t.sub(y, t.constant(target));
  Var loss = t.mul_scalar(t.sum_all(t.mul(d, d)), 0.5);
  Gradients g = t.backward(loss);

  Tensor fd1 = fct::fd_gradient(w1, loss_fn);
  Tensor fd2 = fct::fd_gradient(w2, loss_fn);
  Tensor fdb = fct::fd_gradient(b1, loss_fn);
  for (std::size_t k = 0; k < fd1.numel(); ++k)
    REQUIRE(fct::rel_err(g.at(w1v)[k], fd1[k]) < 1e-4);
  for (std::size_t k = 0; k < fd2.numel(); ++k)
    REQUIRE(fct::rel_err(g.at(w2v)[k], fd2[k]) < 1e-4);
  for (std::size_t k = 0; k < fdb.numel(); ++k)
    REQUIRE(fct::rel_err(g.at(b1v)[k], fdb[k]) < 1e-4);

  // no gradient ever lands on a masked-out weight entry
  for (std::size_t k = 0; k < mask1.numel(); ++k)
    if (mask1[k] == 0.0) REQUIRE(g.at(w1v)[k] == 0.0);
  for (std::size_t k = 0; k < mask2.numel(); ++k)
    if (mask2[k] == 0.0) REQUIRE(g.at(w2v)[k] == 0.0);
}

TEST_CASE("gradients of reduction and group primitives match finite differences") {
  Rng rng(23);
  Param p{"p", fct::random_matrix(3, 6, rng, 0.8), false};

  auto build = [&](Tape& t, Var v) {
    // exercise logsumexp/repeat groups, mean_rows, slices, gathers, concat
    Var lse = t.logsumexp_groups(v, 3);                    // [3 x 2]
    Var rep = t.repeat_groups(lse, 3);                     // [3 x 6]
    Var mix = t.mul(v, rep);                               // [3 x 6]
    Var mr = t.mean_rows(mix);                             // [6]
    Var sl = t.slice_cols(mix, 1, 4);                      // [3 x 3]
    Var ga = t.gather_cols(mix, {5, 0});                   // [3 x 2]
    Var sc = t.scatter_cols(ga, {2, 0}, 4);                // [3 x 4]
    Var cc = t.concat_cols(sl, sc);                        // [3 x 7]
    Var relu = t.relu(t.add_scalar(cc, -0.2));
    Var lg = t.log(t.add_scalar(t.exp(t.mul_scalar(relu, 0.3)), 1.0));
    Var rows = t.sum_cols(lg);                             // [3]
    Var total = t.add(t.sum_all(rows), t.sum_all(mr));
    return t.expand_rows(total, 4);                        // [4], then reduce again
  };

  auto loss_fn = [&]() {
    Tape t;
    Var v = t.leaf(p.value);
    return t.value(t.sum_all(build(t, v)))[0];
  };

  Tape t;
  Var v = t.leaf(p.value, true);
  Gradients g = t.backward(t.sum_all(build(t, v)));
  Tensor fd = fct::fd_gradient(p, loss_fn);
  for (std::size_t k = 0; k < fd.numel(); ++k) REQUIRE(fct::rel_err(g.at(v)[k], fd[k]) < 1e-4);
}

TEST_CASE("row broadcast ops and their gradients") {
  Rng rng(31);
  Param m{"m", fct::random_matrix(4, 3, rng), false};
  Param r{"r", Tensor::row({0.5, -1.0, 2.0}), false};

  auto build = [&](Tape& t, Var mv, Var rv) {
    Var a = t.add_row(mv, rv);
    Var s = t.sub_row(a, rv);
    Var p = t.mul_row(s, rv);
    return t.sum_all(t.mul(p, p));
  };
  auto loss_fn = [&]() {
    Tape t;
    return t.value(build(t, t.leaf(m.value), t.leaf(r.value)))[0];
  };

  Tape t;
  Var mv = t.leaf(m.value, true);
  Var rv = t.leaf(r.value, true);
  Gradients g = t.backward(build(t, mv, rv));
  Tensor fdm = fct::fd_gradient(m, loss_fn);
  Tensor fdr = fct::fd_gradient(r, loss_fn);
  for (std::size_t k = 0; k < fdm.numel(); ++k) REQUIRE(fct::rel_err(g.at(mv)[k], fdm[k]) < 1e-4);
  for (std::size_t k = 0; k < fdr.numel(); ++k) REQUIRE(fct::rel_err(g.at(rv)[k], fdr[k]) < 1e-4);
}

TEST_CASE("logsumexp_groups value is stable and correct") {
  Tape t;
  Tensor x = Tensor::matrix(1, 4, {1000.0, 1000.0, -3.0, 2.0});
  Var v = t.logsumexp_groups(t.constant(x), 2);
  REQUIRE(t.value(v)(0, 0) == Catch::Approx(1000.0 + std::log(2.0)).epsilon(1e-14));
  REQUIRE(t.value(v)(0, 1) ==
          Catch::Approx(std::log(std::exp(-3.0) + std::exp(2.0))).epsilon(1e-12));
}
