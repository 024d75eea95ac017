#include <gtest/gtest.h>

#include "mareid/autograd.hpp"
#include "support.hpp"

using namespace mareid;
using ag::Var;
using test::fd_check;
using test::random_const;
using test::random_param;

TEST(Autograd, BroadcastAddMatchesLoop) {
  Var a = Var::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  Var b = Var::constant({3}, {10, 20, 30});
  Var c = ag::add(a, b);
  std::vector<double> want = {11, 22, 33, 14, 25, 36};
  EXPECT_EQ(std::vector<double>(c.value().begin(), c.value().end()), want);
}

TEST(Autograd, ShapeMismatchThrows) {
  Var a = Var::constant({2, 3}, 0.0);
  Var b = Var::constant({2}, 0.0);
  EXPECT_THROW(ag::add(a, b), ag::ShapeError);
  EXPECT_THROW(ag::matmul(a, a), ag::ShapeError);
}

TEST(Autograd, ElementwiseGradients) {
  Rng rng(3);
  Var x = random_param(rng, {3, 4});
  Var y = random_param(rng, {4});
  auto f = [&] {
    Var t = ag::mul(ag::sigmoid(x), ag::exp(ag::scale(y, 0.3)));
    t = ag::add(t, ag::gelu(x));
    t = ag::add(t, ag::softplus(ag::sub(x, y)));
    t = ag::add(t, ag::div(x, ag::add_scalar(ag::square(y), 1.0)));
    t = ag::add(t, ag::sqrt(ag::add_scalar(ag::square(x), 0.5)));
    return ag::sum(ag::mul(t, t));
  };
  EXPECT_LT(fd_check(x, f), 1e-6);
  EXPECT_LT(fd_check(y, f), 1e-6);
}

TEST(Autograd, ReductionAndShapeGradients) {
  Rng rng(4);
  Var x = random_param(rng, {2, 3, 4});
  auto f = [&] {
    Var p = ag::permute(x, {2, 0, 1});
    Var s = ag::slice(p, 0, 1, 2);
    Var c = ag::concat({s, ag::index_select(p, 0, {3, 0})}, 0);
    Var m = ag::mean(ag::reshape(c, {4, 6}), 1, true);
    return ag::sum(ag::mul(ag::square(m), ag::sum(ag::transpose(x, 0, 2))));
  };
  EXPECT_LT(fd_check(x, f), 1e-6);
}

TEST(Autograd, MatmulBatchedGradients) {
  Rng rng(5);
  Var a = random_param(rng, {2, 3, 4});
  Var b = random_param(rng, {2, 4, 5});
  Var w = random_param(rng, {4, 5});
  auto f = [&] { return ag::sum(ag::square(ag::add(ag::matmul(a, b), ag::matmul(a, w)))); };
  EXPECT_LT(fd_check(a, f), 1e-6);
  EXPECT_LT(fd_check(b, f), 1e-6);
  EXPECT_LT(fd_check(w, f), 1e-6);
}

TEST(Autograd, SoftmaxRowsAreDistributions) {
  Rng rng(6);
  Var x = random_const(rng, {4, 7}, 3.0);
  Var s = ag::softmax(x, 1);
  for (int i = 0; i < 4; ++i) {
    double total = 0.0;
    for (int j = 0; j < 7; ++j) {
      EXPECT_GE(s.at({i, j}), 0.0);
      total += s.at({i, j});
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  Var ls = ag::log_softmax(x, 1);
  for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(std::exp(ls.value()[i]), s.value()[i], 1e-12);
}

TEST(Autograd, NormalizationGradients) {
  Rng rng(7);
  Var x = random_param(rng, {3, 6});
  Var g = random_param(rng, {6});
  Var b = random_param(rng, {6});
  auto f = [&] {
    return ag::sum(ag::mul(ag::layer_norm(x, g, b), ag::softmax(ag::scale(x, 2.0), 1)));
  };
  EXPECT_LT(fd_check(x, f), 1e-5);
  EXPECT_LT(fd_check(g, f), 1e-6);
  EXPECT_LT(fd_check(b, f), 1e-6);
}

TEST(Autograd, Conv2dMatchesLoopOracle) {
  Rng rng(8);
  const int n = 2, c = 3, h = 5, w = 4, o = 2, k = 3, stride = 2, pad = 1;
  Var x = random_param(rng, {n, c, h, w});
  Var wt = random_param(rng, {o, c, k, k});
  Var bias = random_param(rng, {o});
  Var y = ag::conv2d(x, wt, bias, stride, pad);
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  ASSERT_EQ(y.shape(), (ag::Shape{n, o, ho, wo}));
  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < o; ++oc)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double acc = bias.at({oc});
          for (int ic = 0; ic < c; ++ic)
            for (int di = 0; di < k; ++di)
              for (int dj = 0; dj < k; ++dj) {
                int yi = i * stride - pad + di, xj = j * stride - pad + dj;
                if (yi < 0 || yi >= h || xj < 0 || xj >= w) continue;
                acc += x.at({b, ic, yi, xj}) * wt.at({oc, ic, di, dj});
              }
          EXPECT_NEAR(y.at({b, oc, i, j}), acc, 1e-12);
        }
  auto f = [&] { return ag::sum(ag::square(ag::conv2d(x, wt, bias, stride, pad))); };
  EXPECT_LT(fd_check(x, f), 1e-6);
  EXPECT_LT(fd_check(wt, f), 1e-6);
}

TEST(Autograd, GridSampleIdentityAndGradient) {
  Rng rng(9);
  const int h = 4, w = 3;
  Var feat = random_param(rng, {1, h, w, 2});
  std::vector<double> grid;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      grid.push_back(-1.0 + 2.0 * j / (w - 1));
      grid.push_back(-1.0 + 2.0 * i / (h - 1));
    }
  Var out = ag::grid_sample(feat, Var::constant({1, h, w, 2}, grid));
  EXPECT_EQ(std::vector<double>(out.value().begin(), out.value().end()),
            std::vector<double>(feat.value().begin(), feat.value().end()));
  Var g = Var::parameter({1, 2, 2, 2}, {-0.3, 0.2, 0.41, -0.77, 0.05, 0.6, -0.9, -0.15});
  auto f = [&] { return ag::sum(ag::square(ag::grid_sample(feat, g))); };
  EXPECT_LT(fd_check(feat, f), 1e-6);
  EXPECT_LT(fd_check(g, f, 1e-7), 1e-5);
}

TEST(Autograd, Inverse2x2FlagsDegenerate) {
  Var j = Var::parameter({2, 2, 2}, {2, 1, 1, 3, 1e-6, 0, 0, 1e-6});
  std::vector<int> bad;
  Var inv = ag::inverse2x2(j, 1e-4, 1e-3, &bad);
  ASSERT_EQ(bad, std::vector<int>{1});
  EXPECT_NEAR(inv.at({0, 0, 0}), 0.6, 1e-12);
  EXPECT_NEAR(inv.at({0, 0, 1}), -0.2, 1e-12);
  EXPECT_NEAR(inv.at({0, 1, 1}), 0.4, 1e-12);
  EXPECT_TRUE(std::isfinite(inv.at({1, 0, 0})));
  Var good = Var::parameter({1, 2, 2}, {1.3, 0.2, -0.4, 0.9});
  EXPECT_LT(fd_check(good, [&] { return ag::sum(ag::square(ag::inverse2x2(good, 1e-4, 1e-3))); }), 1e-6);
}

TEST(Autograd, NoGradGuardAndDetach) {
  Var x = Var::parameter({2}, {1.0, 2.0});
  {
    ag::NoGradGuard ng;
    EXPECT_FALSE(ag::square(x).requires_grad());
  }
  EXPECT_TRUE(ag::square(x).requires_grad());
  Var d = ag::square(x).detach();
  EXPECT_FALSE(d.requires_grad());
  ag::backward(ag::sum(ag::mul(d, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Autograd, LeafGradientsAccumulate) {
  Var x = Var::parameter({1}, {3.0});
  Var y = ag::sum(ag::square(x));
  ag::backward(y);
  ag::backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}
