#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testutil.hpp"

using namespace pasr;
using namespace pasr::ad;
using pasr::testutil::away_from_zero;
using pasr::testutil::fd_max_rel_err;
using pasr::testutil::randn;

namespace {
constexpr double kGradTol = 1e-3;

// Scalarizes a matrix output with fixed weights so every entry of the
// gradient is exercised with a distinct coefficient.
Var<double> weighted_sum(Tape<double>& t, const Var<double>& x) {
  MatD w(x.rows(), x.cols());
  for (int i = 0; i < w.rows(); ++i)
    for (int j = 0; j < w.cols(); ++j) w(i, j) = 0.3 + 0.1 * i - 0.07 * j;
  return sum_all(hadamard(x, t.constant(w)));
}
}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(11);
  std::vector<MatD> xs = {randn(3, 4, rng), randn(3, 4, rng)};
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, add(v[0], v[1]));
            },
            xs) < kGradTol);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, sub(v[0], v[1]));
            },
            xs) < kGradTol);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, hadamard(v[0], v[1]));
            },
            xs) < kGradTol);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, scale(v[0], 1.7));
            },
            {xs[0]}) < kGradTol);
}

TEST_CASE("relu gradient away from the kink") {
  Rng rng(12);
  MatD x = away_from_zero(randn(4, 5, rng));
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, relu(v[0]));
            },
            {x}) < kGradTol);
}

TEST_CASE("matmul variants match finite differences") {
  Rng rng(13);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, matmul(v[0], v[1]));
            },
            {randn(3, 4, rng), randn(4, 2, rng)}) < kGradTol);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, matmul_nt(v[0], v[1]));
            },
            {randn(3, 4, rng), randn(5, 4, rng)}) < kGradTol);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, add_row_bias(v[0], v[1]));
            },
            {randn(3, 4, rng), randn(1, 4, rng)}) < kGradTol);
}

TEST_CASE("structural ops match finite differences") {
  Rng rng(14);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, concat_rows<double>({v[0], v[1], v[2]}));
            },
            {randn(2, 3, rng), randn(1, 3, rng), randn(4, 3, rng)}) < kGradTol);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, slice_rows(v[0], 1, 3));
            },
            {randn(6, 3, rng)}) < kGradTol);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, mean_rows(v[0]));
            },
            {randn(5, 3, rng)}) < kGradTol);
}

TEST_CASE("layer_norm matches finite differences") {
  Rng rng(15);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, layer_norm(v[0], v[1], v[2]));
            },
            {randn(4, 6, rng), randn(1, 6, rng, 0.5), randn(1, 6, rng, 0.5)}) <
        kGradTol);
}

TEST_CASE("masked_attention matches finite differences") {
  Rng rng(16);
  const int T = 5, D = 8;
  Mask mask(T, T);
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < T; ++j) mask(i, j) = j <= i;
  mask(3, 1) = false;
  CHECK(fd_max_rel_err(
            [&](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, masked_attention(v[0], v[1], v[2], mask, 2));
            },
            {randn(T, D, rng), randn(T, D, rng), randn(T, D, rng)}) < kGradTol);
}

TEST_CASE("masked_attention puts exactly zero weight on masked keys") {
  // One head, zero queries and keys: scores are uniform, so each output row
  // is the plain average of the admissible value rows.
  Tape<double> t(false);
  MatD z = MatD::Zero(3, 2);
  MatD vals(3, 2);
  vals << 1, 10, 2, 20, 4, 40;
  Mask mask(3, 3);
  mask.setConstant(false);
  mask(0, 0) = true;
  mask(1, 0) = mask(1, 2) = true;
  mask(2, 0) = mask(2, 1) = mask(2, 2) = true;
  auto out = masked_attention(t.input(z, false), t.input(z, false),
                              t.input(vals, false), mask, 1);
  CHECK(out.value()(0, 0) == doctest::Approx(1.0));
  CHECK(out.value()(1, 0) == doctest::Approx(2.5));
  CHECK(out.value()(1, 1) == doctest::Approx(25.0));
  CHECK(out.value()(2, 1) == doctest::Approx(70.0 / 3));
}

TEST_CASE("depthwise_conv1d matches finite differences in both paddings") {
  Rng rng(17);
  for (auto pad : {ConvPadding::kCausal, ConvPadding::kCentered}) {
    CHECK(fd_max_rel_err(
              [pad](Tape<double>& t, std::vector<Var<double>>& v) {
                return weighted_sum(t, depthwise_conv1d(v[0], v[1], pad));
              },
              {randn(6, 3, rng), randn(3, 3, rng)}) < kGradTol);
  }
}

TEST_CASE("depthwise_conv1d kernel semantics") {
  Tape<double> t(false);
  MatD x(4, 2);
  x << 1, 5, 2, 6, 3, 7, 4, 8;
  MatD delta(3, 2);
  delta << 0, 0, 1, 1, 0, 0;
  auto centered = depthwise_conv1d(t.input(x, false), t.input(delta, false),
                                   ConvPadding::kCentered);
  CHECK((centered.value() - x).cwiseAbs().maxCoeff() == doctest::Approx(0.0));

  MatD last(3, 2);
  last << 0, 0, 0, 0, 1, 1;
  auto causal = depthwise_conv1d(t.input(x, false), t.input(last, false),
                                 ConvPadding::kCausal);
  CHECK(causal.value()(0, 0) == doctest::Approx(1.0));
  CHECK(causal.value()(3, 1) == doctest::Approx(8.0));

  // row 0 of a causal kernel is the oldest tap: K-1 frames back
  MatD oldest(3, 2);
  oldest << 1, 1, 0, 0, 0, 0;
  auto shifted = depthwise_conv1d(t.input(x, false), t.input(oldest, false),
                                  ConvPadding::kCausal);
  CHECK(shifted.value()(0, 0) == doctest::Approx(0.0));
  CHECK(shifted.value()(1, 0) == doctest::Approx(0.0));
  CHECK(shifted.value()(2, 0) == doctest::Approx(1.0));
  CHECK(shifted.value()(3, 1) == doctest::Approx(6.0));
}

TEST_CASE("embedding and losses match finite differences") {
  Rng rng(18);
  std::vector<int> ids = {2, 0, 2, 1};
  CHECK(fd_max_rel_err(
            [&](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, embedding_lookup(v[0], ids));
            },
            {randn(3, 4, rng)}) < kGradTol);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(t, log_softmax_rows(v[0]));
            },
            {randn(4, 5, rng)}) < kGradTol);
  std::vector<int> targets = {1, 4, 0};
  CHECK(fd_max_rel_err(
            [&](Tape<double>& t, std::vector<Var<double>>& v) {
              return softmax_cross_entropy(v[0], targets);
            },
            {randn(3, 5, rng)}) < kGradTol);
}

TEST_CASE("feed_forward composite matches finite differences") {
  Rng rng(19);
  CHECK(fd_max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return weighted_sum(
                  t, feed_forward(v[0], v[1], v[2], v[3], v[4]));
            },
            {away_from_zero(randn(3, 4, rng)), randn(4, 8, rng), randn(1, 8, rng),
             randn(8, 4, rng), randn(1, 4, rng)}) < kGradTol);
}

TEST_CASE("log_softmax_rows normalizes") {
  Rng rng(20);
  Tape<double> t(false);
  auto out = log_softmax_rows(t.input(randn(3, 6, rng), false));
  for (int i = 0; i < 3; ++i)
    CHECK(out.value().row(i).array().exp().sum() == doctest::Approx(1.0));
}

TEST_CASE("parameter reuse shares one node and sums both paths") {
  Parameter<double> p("p", MatD::Ones(2, 2));
  Tape<double> t;
  auto a = t.use(p);
  auto b = t.use(p);
  CHECK(a.id == b.id);
  auto loss = sum_all(add(a, b));
  t.backward(loss);
  CHECK(p.grad.minCoeff() == doctest::Approx(2.0));
  CHECK(p.grad.maxCoeff() == doctest::Approx(2.0));

  // grads accumulate across passes until cleared
  Tape<double> t2;
  t2.backward(sum_all(t2.use(p)));
  CHECK(p.grad(0, 0) == doctest::Approx(3.0));
  p.zero_grad();
  CHECK(p.grad(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("backward contract violations") {
  Tape<double> t;
  auto x = t.input(MatD::Ones(2, 2), true);
  CHECK_THROWS_AS(t.backward(x), ContractError);  // non-scalar

  Tape<double> frozen(false);
  auto y = sum_all(frozen.input(MatD::Ones(2, 2), true));
  CHECK_THROWS_AS(frozen.backward(y), ContractError);  // grads disabled

  Tape<double> other;
  auto z = sum_all(other.input(MatD::Ones(1, 1), true));
  CHECK_THROWS_AS(t.backward(z), ContractError);  // foreign tape
}

TEST_CASE("shape and mask errors carry offending extents") {
  Tape<double> t;
  auto a = t.input(MatD::Ones(2, 3), false);
  auto b = t.input(MatD::Ones(2, 2), false);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(add_row_bias(a, b), ShapeError);
  CHECK_THROWS_AS(slice_rows(a, 1, 5), ShapeError);

  Mask bad(3, 2);
  bad.setConstant(true);
  CHECK_THROWS_AS(masked_attention(a, a, a, bad, 1), ShapeError);
  bad.resize(2, 2);
  bad.setConstant(true);
  Mask starved(2, 2);
  starved.setConstant(true);
  starved(1, 0) = starved(1, 1) = false;
  auto q = t.input(MatD::Ones(2, 2), false);
  CHECK_THROWS_AS(masked_attention(q, q, q, starved, 1), MaskError);
  CHECK_THROWS_AS(masked_attention(q, q, q, bad.topRows(2).eval(), 3), ShapeError);

  CHECK_THROWS_AS(embedding_lookup(a, std::vector<int>{0, 2}), TargetError);
  CHECK_THROWS_AS(softmax_cross_entropy(a, std::vector<int>{0, 3}), TargetError);
  CHECK_THROWS_AS(
      depthwise_conv1d(a, t.input(MatD::Ones(2, 3), false), ConvPadding::kCentered),
      ContractError);
}

TEST_CASE("disabled tape records no backward state") {
  Tape<double> t(false);
  auto x = t.input(MatD::Ones(2, 2), true);
  CHECK_FALSE(t.requires_grad(x.id));
  auto y = relu(matmul(x, x));
  CHECK_FALSE(t.requires_grad(y.id));
}
