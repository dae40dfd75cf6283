#include <gtest/gtest.h>

#include <cmath>

#include "albedo/nn.hpp"

using namespace albedo;
using namespace albedo::nn;

namespace {

Tensor<double> random_tensor(Rng& rng, int c, int n, int h, int w) {
  Tensor<double> t(c, n, h, w);
  for (auto& v : t.v) v = uniform(rng, -1, 1);
  return t;
}

double at(const Tensor<double>& t, int c, int n, int y, int x) {
  if (y < 0 || x < 0 || y >= t.h || x >= t.w) return 0.0;
  return t.data(c, n)[y * t.w + x];
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Conv3x3, MatchesDirectConvolution) {
  Rng rng = make_rng(1, "conv");
  ParamLayout l;
  Conv3x3 conv(2, 3, l);
  std::vector<double> p(l.total);
  for (auto& v : p) v = uniform(rng, -1, 1);
  const auto x = random_tensor(rng, 2, 2, 5, 4);
  std::vector<double> cols;
  const auto y = conv_forward<double>(conv, p, x, cols);
  for (int o = 0; o < 3; ++o)
    for (int n = 0; n < 2; ++n)
      for (int yy = 0; yy < 5; ++yy)
        for (int xx = 0; xx < 4; ++xx) {
          double s = p[conv.b_off + o];
          for (int i = 0; i < 2; ++i)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx)
                s += p[conv.w_off + ((o * 2 + i) * 3 + dy + 1) * 3 + dx + 1] * at(x, i, n, yy + dy, xx + dx);
          EXPECT_NEAR(y.data(o, n)[yy * 4 + xx], s, 1e-12);
        }
}

// Linear ops: <dy, J dx> must equal <J^T dy, dx> for the backward pass.
TEST(Conv3x3, BackwardIsAdjoint) {
  Rng rng = make_rng(2, "conv");
  ParamLayout l;
  Conv3x3 conv(3, 2, l);
  std::vector<double> p(l.total);
  for (auto& v : p) v = uniform(rng, -1, 1);
  const auto x = random_tensor(rng, 3, 2, 4, 6);
  const auto dy = random_tensor(rng, 2, 2, 4, 6);
  std::vector<double> cols;
  const auto y = conv_forward<double>(conv, p, x, cols);
  std::vector<double> grad(l.total, 0.0);
  Tensor<double> dx;
  conv_backward<double>(conv, p, cols, dy, grad, &dx);
  // Input gradient: y - bias is linear in x.
  double lhs = 0;
  for (int o = 0; o < 2; ++o)
    for (int n = 0; n < 2; ++n)
      for (std::size_t q = 0; q < y.plane(); ++q) lhs += dy.data(o, n)[q] * (y.data(o, n)[q] - p[conv.b_off + o]);
  EXPECT_NEAR(lhs, dot(dx.v, x.v), 1e-9);
  // Weight gradient: y is linear in the weights too.
  double lw = 0;
  for (std::size_t i = 0; i < conv.weight_count(); ++i) lw += grad[conv.w_off + i] * p[conv.w_off + i];
  EXPECT_NEAR(lhs, lw, 1e-9);
}

TEST(Dense, ForwardAndGradients) {
  Rng rng = make_rng(3, "dense");
  ParamLayout l;
  Dense d(4, 3, l);
  std::vector<double> p(l.total), x(8), dy(6);
  for (auto& v : p) v = uniform(rng, -1, 1);
  for (auto& v : x) v = uniform(rng, -1, 1);
  for (auto& v : dy) v = uniform(rng, -1, 1);
  const auto y = dense_forward<double>(d, p, x, 2);
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 3; ++o) {
      double s = p[d.b_off + o];
      for (int i = 0; i < 4; ++i) s += p[d.w_off + o * 4 + i] * x[n * 4 + i];
      EXPECT_NEAR(y[n * 3 + o], s, 1e-14);
    }
  std::vector<double> grad(l.total, 0.0), dx;
  dense_backward<double>(d, p, x, dy, 2, grad, &dx);
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 4; ++i)
      EXPECT_NEAR(grad[d.w_off + o * 4 + i], dy[o] * x[i] + dy[3 + o] * x[4 + i], 1e-14);
  for (int o = 0; o < 3; ++o) EXPECT_NEAR(grad[d.b_off + o], dy[o] + dy[3 + o], 1e-14);
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (int o = 0; o < 3; ++o) s += dy[o] * p[d.w_off + o * 4 + i];
    EXPECT_NEAR(dx[i], s, 1e-14);
  }
}

TEST(Silu, GradientMatchesFiniteDifference) {
  std::vector<double> xs{-4.0, -1.0, -0.1, 0.0, 0.3, 2.5};
  for (double x0 : xs) {
    std::vector<double> v{x0}, pre, g{1.0};
    silu_inplace(v, pre);
    EXPECT_NEAR(v[0], x0 / (1 + std::exp(-x0)), 1e-15);
    silu_backward_inplace(g, pre);
    const double h = 1e-6;
    auto f = [](double x) { return x / (1 + std::exp(-x)); };
    EXPECT_NEAR(g[0], (f(x0 + h) - f(x0 - h)) / (2 * h), 1e-8);
  }
}

TEST(Resampling, PoolAndUpsampleAreMutualAdjointsUpToScale) {
  Rng rng = make_rng(4, "pool");
  const auto x = random_tensor(rng, 2, 3, 6, 4);
  const auto u = random_tensor(rng, 2, 3, 3, 2);
  const auto px = avgpool2(x);
  ASSERT_EQ(px.h, 3);
  ASSERT_EQ(px.w, 2);
  EXPECT_NEAR(px.data(1, 2)[0], (at(x, 1, 2, 0, 0) + at(x, 1, 2, 0, 1) + at(x, 1, 2, 1, 0) + at(x, 1, 2, 1, 1)) / 4, 1e-15);
  // <pool x, u> = <x, pool^T u>
  EXPECT_NEAR(dot(px.v, u.v), dot(x.v, avgpool2_backward(u).v), 1e-12);
  const auto uu = upsample2(u);
  EXPECT_NEAR(dot(uu.v, x.v), dot(u.v, upsample2_backward(x).v), 1e-12);
  EXPECT_EQ(at(uu, 0, 1, 3, 1), at(u, 0, 1, 1, 0));
}

TEST(ChannelOps, BiasAndGlobalMean) {
  Rng rng = make_rng(5, "ch");
  auto x = random_tensor(rng, 3, 2, 4, 4);
  const auto m = global_mean(x);
  ASSERT_EQ(m.size(), 6u);
  double s = 0;
  for (std::size_t q = 0; q < 16; ++q) s += x.data(2, 1)[q];
  EXPECT_NEAR(m[1 * 3 + 2], s / 16, 1e-15);
  std::vector<double> dm(6);
  for (auto& v : dm) v = uniform(rng, -1, 1);
  Tensor<double> dx(3, 2, 4, 4);
  global_mean_backward_add<double>(dm, dx);
  EXPECT_NEAR(dot(dm, m), dot(dx.v, x.v), 1e-12);

  std::vector<double> b(6);
  for (auto& v : b) v = uniform(rng, -1, 1);
  const auto before = x;
  add_channel_bias<double>(x, b);
  EXPECT_NEAR(x.data(1, 0)[5] - before.data(1, 0)[5], b[0 * 3 + 1], 1e-15);
  const auto db = channel_bias_backward(x);
  ASSERT_EQ(db.size(), 6u);
  double t = 0;
  for (std::size_t q = 0; q < 16; ++q) t += x.data(1, 0)[q];
  EXPECT_NEAR(db[0 * 3 + 1], t, 1e-12);
}

TEST(Adam, MinimizesQuadratic) {
  std::vector<double> p{3.0, -2.0}, g(2);
  Adam opt(2, {.lr = 0.05, .clip_norm = 0.0});
  for (int i = 0; i < 2000; ++i) {
    g = {2 * (p[0] - 1), 2 * (p[1] + 0.5)};
    opt.step<double>(p, g);
  }
  EXPECT_NEAR(p[0], 1.0, 1e-3);
  EXPECT_NEAR(p[1], -0.5, 1e-3);
}

TEST(Adam, FirstStepHasMagnitudeLr) {
  // Bias-corrected first step is lr * sign(g) regardless of clipping.
  std::vector<double> p{0.0, 0.0}, g{30.0, -0.01};
  Adam opt(2, {.lr = 0.1, .clip_norm = 1.0});
  opt.step<double>(p, g);
  EXPECT_NEAR(p[0], -0.1, 1e-6);
  EXPECT_NEAR(p[1], 0.1, 1e-4);
  EXPECT_THROW(opt.step<double>(p, std::vector<double>{1.0}), Error);
}
