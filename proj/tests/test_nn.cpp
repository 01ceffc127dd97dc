#include "p2p/nn.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

using namespace p2p;
using namespace p2p::nn;

using T64 = Tensor<double>;

namespace {

T64 rand_tensor(Rng& rng, std::vector<size_t> shape, double lo = -1.0, double hi = 1.0) {
  size_t total = 1;
  for (size_t d : shape) total *= d;
  std::vector<double> v(total);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T64::from_data(std::move(shape), std::move(v)).set_requires_grad(true);
}

// Central-difference check of every coordinate of every input against the grads
// produced by backward(). loss_fn must rebuild the graph from the raw storage.
void check_grads(const std::function<T64()>& loss_fn, std::vector<T64> inputs,
                 double tol = 1e-7, double h = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  T64 loss = loss_fn();
  backward(loss);
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    ASSERT_TRUE(t.has_grad()) << "input " << ti;
    for (size_t i = 0; i < t.size(); ++i) {
      double orig = t.data()[i];
      double lp, lm;
      {
        NoGradGuard ng;
        t.data()[i] = orig + h;
        lp = loss_fn().item();
        t.data()[i] = orig - h;
        lm = loss_fn().item();
        t.data()[i] = orig;
      }
      double fd = (lp - lm) / (2.0 * h);
      double an = t.grad()[i];
      double denom = std::max({1.0, std::abs(fd), std::abs(an)});
      EXPECT_NEAR(an / denom, fd / denom, tol) << "input " << ti << " coord " << i;
    }
  }
}

// Weighted scalar head so upstream grads are non-uniform.
T64 weighted_sum(const T64& x, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(x.size());
  for (auto& v : w) v = rng.uniform(0.5, 2.0);
  return sum_all(mul(x, T64::from_data(x.shape(), std::move(w))));
}

}  // namespace

TEST(Elementwise, Values) {
  T64 a = T64::from_data({4}, {1, -2, 3, 0.5});
  T64 b = T64::from_data({4}, {2, 2, -1, 4});
  EXPECT_DOUBLE_EQ(add(a, b).data()[1], 0.0);
  EXPECT_DOUBLE_EQ(sub(a, b).data()[0], -1.0);
  EXPECT_DOUBLE_EQ(mul(a, b).data()[2], -3.0);
  EXPECT_DOUBLE_EQ(add_scalar(a, 1.0).data()[1], -1.0);
  EXPECT_DOUBLE_EQ(mul_scalar(a, -2.0).data()[0], -2.0);
  EXPECT_DOUBLE_EQ(relu(a).data()[1], 0.0);
  EXPECT_DOUBLE_EQ(relu(a).data()[0], 1.0);
  EXPECT_DOUBLE_EQ(square(a).data()[1], 4.0);
  EXPECT_NEAR(exp_t(a).data()[0], std::exp(1.0), 1e-12);
  EXPECT_DOUBLE_EQ(abs_t(a).data()[1], 2.0);
  EXPECT_DOUBLE_EQ(clamp(a, -1.0, 1.0).data()[1], -1.0);
  EXPECT_DOUBLE_EQ(clamp(a, -1.0, 1.0).data()[2], 1.0);
  EXPECT_THROW(add(a, T64::zeros({3})), ShapeMismatch);
}

TEST(Elementwise, WrapOp) {
  T64 a = T64::from_data({3}, {6.2, 0.1, -7.0});
  T64 w = wrap_angle_op(a);
  EXPECT_NEAR(w.data()[0], 6.2 - 2.0 * kPi, 1e-12);
  EXPECT_NEAR(w.data()[1], 0.1, 1e-12);
  EXPECT_NEAR(w.data()[2], -7.0 + 2.0 * kPi, 1e-12);
}

TEST(Elementwise, Gradients) {
  Rng rng(1);
  T64 a = rand_tensor(rng, {6}, 0.2, 1.5);  // positive, away from relu/abs kinks
  T64 b = rand_tensor(rng, {6}, 0.2, 1.5);
  check_grads([&] { return weighted_sum(add(a, b), 9); }, {a, b});
  check_grads([&] { return weighted_sum(sub(a, b), 9); }, {a, b});
  check_grads([&] { return weighted_sum(mul(a, b), 9); }, {a, b});
  check_grads([&] { return weighted_sum(relu(a), 9); }, {a});
  check_grads([&] { return weighted_sum(square(a), 9); }, {a});
  check_grads([&] { return weighted_sum(exp_t(a), 9); }, {a});
  check_grads([&] { return weighted_sum(abs_t(a), 9); }, {a});
  check_grads([&] { return weighted_sum(mul_scalar(add_scalar(a, 0.3), 1.7), 9); }, {a});
  check_grads([&] { return weighted_sum(wrap_angle_op(a), 9); }, {a});
  // Clamp with all coords strictly inside or strictly outside the range.
  T64 c = T64::from_data({4}, {-2.0, 0.3, 0.9, 2.5}).set_requires_grad(true);
  check_grads([&] { return weighted_sum(clamp(c, -1.0, 1.0), 9); }, {c});
}

TEST(Matmul, ValueAgainstNaive) {
  Rng rng(2);
  T64 a = rand_tensor(rng, {3, 4});
  T64 b = rand_tensor(rng, {4, 5});
  T64 c = matmul(a, b);
  ASSERT_EQ(c.shape(), (std::vector<size_t>{3, 5}));
  for (size_t i = 0; i < 3; ++i)
    for (size_t j = 0; j < 5; ++j) {
      double acc = 0;
      for (size_t k = 0; k < 4; ++k) acc += a.data()[i * 4 + k] * b.data()[k * 5 + j];
      EXPECT_NEAR(c.data()[i * 5 + j], acc, 1e-12);
    }
  EXPECT_THROW(matmul(a, T64::zeros({3, 2})), ShapeMismatch);
}

TEST(Matmul, BlockedKernelMatchesNaiveLarge) {
  Rng rng(3);
  const size_t m = 47, k = 33, n = 61;  // odd sizes exercise block edges
  T64 a = rand_tensor(rng, {m, k});
  T64 b = rand_tensor(rng, {k, n});
  T64 c = matmul(a, b);
  for (size_t i = 0; i < m; i += 7)
    for (size_t j = 0; j < n; j += 11) {
      double acc = 0;
      for (size_t kk = 0; kk < k; ++kk) acc += a.data()[i * k + kk] * b.data()[kk * n + j];
      EXPECT_NEAR(c.data()[i * n + j], acc, 1e-10);
    }
}

TEST(Matmul, Gradients) {
  Rng rng(4);
  T64 a = rand_tensor(rng, {3, 4});
  T64 b = rand_tensor(rng, {4, 5});
  check_grads([&] { return weighted_sum(matmul(a, b), 13); }, {a, b});
}

TEST(Bias, ValuesAndGradients) {
  Rng rng(5);
  T64 x = rand_tensor(rng, {3, 4});
  T64 b = rand_tensor(rng, {4});
  T64 y = add_bias(x, b);
  EXPECT_NEAR(y.data()[1 * 4 + 2], x.data()[1 * 4 + 2] + b.data()[2], 1e-12);
  check_grads([&] { return weighted_sum(add_bias(x, b), 17); }, {x, b});

  T64 xc = rand_tensor(rng, {3, 2, 2});
  T64 bc = rand_tensor(rng, {3});
  T64 yc = add_bias_channels(xc, bc);
  EXPECT_NEAR(yc.data()[2 * 4 + 3], xc.data()[2 * 4 + 3] + bc.data()[2], 1e-12);
  check_grads([&] { return weighted_sum(add_bias_channels(xc, bc), 17); }, {xc, bc});

  T64 w = rand_tensor(rng, {4, 2});
  T64 bl = rand_tensor(rng, {2});
  T64 yl = linear(x, w, bl);
  ASSERT_EQ(yl.shape(), (std::vector<size_t>{3, 2}));
  check_grads([&] { return weighted_sum(linear(x, w, bl), 19); }, {x, w, bl});
  check_grads([&] { return weighted_sum(linear(x, w, T64()), 19); }, {x, w});
}

TEST(Conv1d, KernelOneEqualsPerPositionLinear) {
  Rng rng(6);
  T64 x = rand_tensor(rng, {3, 7});
  T64 w = rand_tensor(rng, {5, 3, 1});
  T64 b = rand_tensor(rng, {5});
  T64 y = conv1d(x, w, b);
  ASSERT_EQ(y.shape(), (std::vector<size_t>{5, 7}));
  for (size_t pos = 0; pos < 7; ++pos)
    for (size_t co = 0; co < 5; ++co) {
      double acc = b.data()[co];
      for (size_t ci = 0; ci < 3; ++ci) acc += w.data()[co * 3 + ci] * x.data()[ci * 7 + pos];
      EXPECT_NEAR(y.data()[co * 7 + pos], acc, 1e-12);
    }
  check_grads([&] { return weighted_sum(conv1d(x, w, b), 23); }, {x, w, b});
}

TEST(Conv1d, GeneralAgainstNaive) {
  Rng rng(7);
  const size_t cin = 2, len = 9, cout = 3, ks = 3, stride = 2, pad = 1;
  T64 x = rand_tensor(rng, {cin, len});
  T64 w = rand_tensor(rng, {cout, cin, ks});
  T64 b = rand_tensor(rng, {cout});
  T64 y = conv1d(x, w, b, stride, pad);
  const size_t lout = (len + 2 * pad - ks) / stride + 1;
  ASSERT_EQ(y.shape(), (std::vector<size_t>{cout, lout}));
  for (size_t co = 0; co < cout; ++co)
    for (size_t ol = 0; ol < lout; ++ol) {
      double acc = b.data()[co];
      for (size_t ci = 0; ci < cin; ++ci)
        for (size_t kk = 0; kk < ks; ++kk) {
          long il = long(ol * stride + kk) - long(pad);
          if (il >= 0 && il < long(len)) acc += w.data()[(co * cin + ci) * ks + kk] * x.data()[ci * len + il];
        }
      EXPECT_NEAR(y.data()[co * lout + ol], acc, 1e-12);
    }
  check_grads([&] { return weighted_sum(conv1d(x, w, b, stride, pad), 29); }, {x, w, b});
}

TEST(Conv2d, AgainstNaive) {
  Rng rng(8);
  for (size_t stride : {size_t(1), size_t(2)})
    for (size_t pad : {size_t(0), size_t(1)}) {
      const size_t cin = 2, h = 5, w_in = 6, cout = 3, kh = 3, kw = 3;
      if (h + 2 * pad < kh) continue;
      T64 x = rand_tensor(rng, {cin, h, w_in});
      T64 w = rand_tensor(rng, {cout, cin, kh, kw});
      T64 b = rand_tensor(rng, {cout});
      T64 y = conv2d(x, w, b, stride, pad);
      const size_t hout = (h + 2 * pad - kh) / stride + 1;
      const size_t wout = (w_in + 2 * pad - kw) / stride + 1;
      ASSERT_EQ(y.shape(), (std::vector<size_t>{cout, hout, wout}));
      for (size_t co = 0; co < cout; ++co)
        for (size_t oh = 0; oh < hout; ++oh)
          for (size_t ow = 0; ow < wout; ++ow) {
            double acc = b.data()[co];
            for (size_t ci = 0; ci < cin; ++ci)
              for (size_t k1 = 0; k1 < kh; ++k1)
                for (size_t k2 = 0; k2 < kw; ++k2) {
                  long ih = long(oh * stride + k1) - long(pad);
                  long iw = long(ow * stride + k2) - long(pad);
                  if (ih < 0 || iw < 0 || ih >= long(h) || iw >= long(w_in)) continue;
                  acc += w.data()[((co * cin + ci) * kh + k1) * kw + k2] *
                         x.data()[(ci * h + size_t(ih)) * w_in + size_t(iw)];
                }
            EXPECT_NEAR(y.data()[(co * hout + oh) * wout + ow], acc, 1e-12)
                << "s" << stride << " p" << pad;
          }
      check_grads([&] { return weighted_sum(conv2d(x, w, b, stride, pad), 31); }, {x, w, b});
    }
}

TEST(BatchNorm, TrainModeNormalizesScale) {
  Rng rng(9);
  T64 x = rand_tensor(rng, {3, 50}, -2.0, 5.0);
  T64 gamma = T64::full({3}, 1.0).set_requires_grad(true);
  T64 beta = T64::zeros({3}).set_requires_grad(true);
  std::vector<double> rm(3, 0.0), rv(3, 1.0);
  T64 y = batch_norm(x, gamma, beta, rm, rv, true);
  for (size_t c = 0; c < 3; ++c) {
    double m2 = 0;
    for (size_t i = 0; i < 50; ++i) m2 += y.data()[c * 50 + i] * y.data()[c * 50 + i];
    m2 /= 50;
    EXPECT_NEAR(m2, 1.0, 1e-3);  // unit mean square; eps shrinks it slightly
    // The channel mean is scaled, not removed.
    double mx = 0, my = 0;
    for (size_t i = 0; i < 50; ++i) {
      mx += x.data()[c * 50 + i];
      my += y.data()[c * 50 + i];
    }
    EXPECT_GT(std::abs(my), 1e-6);
    EXPECT_GT(mx * my, 0.0);  // same sign as the input mean
  }
  // Running stats moved toward the batch stats.
  EXPECT_NE(rm[0], 0.0);
  EXPECT_NE(rv[0], 1.0);
}

TEST(BatchNorm, EvalModeUsesSampleStats) {
  T64 x = T64::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  T64 gamma = T64::from_data({2}, {2.0, 1.0});
  T64 beta = T64::from_data({2}, {0.5, -1.0});
  std::vector<double> rm = {1.0, 4.0}, rv = {4.0, 1.0};
  T64 y = batch_norm(x, gamma, beta, rm, rv, false);
  // Channel scales come from the sample itself: mean squares 14/3 and 77/3.
  double iv0 = 1.0 / std::sqrt(14.0 / 3.0 + 1e-5);
  double iv1 = 1.0 / std::sqrt(77.0 / 3.0 + 1e-5);
  EXPECT_NEAR(y.data()[0], 2.0 * 1.0 * iv0 + 0.5, 1e-9);
  EXPECT_NEAR(y.data()[1], 2.0 * 2.0 * iv0 + 0.5, 1e-9);
  EXPECT_NEAR(y.data()[3], 1.0 * 4.0 * iv1 - 1.0, 1e-9);
  // Eval mode leaves running stats untouched.
  EXPECT_DOUBLE_EQ(rm[0], 1.0);
  EXPECT_DOUBLE_EQ(rv[1], 1.0);
}

TEST(BatchNorm, EvalOutputInvariantToElementOrder) {
  Rng rng(11);
  T64 x = rand_tensor(rng, {2, 17}, -3.0, 3.0);
  T64 gamma = rand_tensor(rng, {2}, 0.5, 1.5);
  T64 beta = rand_tensor(rng, {2}, -0.5, 0.5);
  std::vector<double> rm(2, 0.0), rv(2, 1.0);
  T64 y = batch_norm(x, gamma, beta, rm, rv, false);

  std::vector<size_t> perm(17);
  for (size_t i = 0; i < 17; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), std::mt19937(3));
  std::vector<double> shuffled(x.size());
  for (size_t c = 0; c < 2; ++c)
    for (size_t i = 0; i < 17; ++i) shuffled[c * 17 + i] = x.data()[c * 17 + perm[i]];
  T64 xp = T64::from_data({2, 17}, shuffled);
  T64 yp = batch_norm(xp, gamma, beta, rm, rv, false);
  for (size_t c = 0; c < 2; ++c)
    for (size_t i = 0; i < 17; ++i)
      EXPECT_EQ(yp.data()[c * 17 + i], y.data()[c * 17 + perm[i]]);  // bitwise
}

TEST(BatchNorm, Gradients) {
  Rng rng(10);
  T64 x = rand_tensor(rng, {2, 8}, -1.5, 1.5);
  T64 gamma = rand_tensor(rng, {2}, 0.5, 1.5);
  T64 beta = rand_tensor(rng, {2}, -0.5, 0.5);
  std::vector<double> rm(2, 0.1), rv(2, 0.9);
  check_grads([&] {
    std::vector<double> rm2 = rm, rv2 = rv;  // keep stats fixed across fd evals
    return weighted_sum(batch_norm(x, gamma, beta, rm2, rv2, true), 37);
  }, {x, gamma, beta}, 1e-6);
  check_grads([&] {
    std::vector<double> rm2 = rm, rv2 = rv;
    return weighted_sum(batch_norm(x, gamma, beta, rm2, rv2, false), 37);
  }, {x, gamma, beta}, 1e-6);
}

TEST(BatchNorm, ShapeErrors) {
  T64 x = T64::zeros({3, 4});
  T64 g2 = T64::zeros({2});
  T64 b3 = T64::zeros({3});
  std::vector<double> rm(3), rv(3);
  EXPECT_THROW(batch_norm(x, g2, b3, rm, rv, true), ShapeMismatch);
  std::vector<double> rm2(2), rv2(2);
  EXPECT_THROW(batch_norm(x, b3, b3, rm2, rv2, true), ShapeMismatch);
  EXPECT_THROW(batch_norm(T64::zeros({3}), b3, b3, rm, rv, true), ShapeMismatch);
}

TEST(MaxOverAxis, ValuesTiesAndGrads) {
  T64 x = T64::from_data({2, 3}, {1, 5, 5, 7, 2, 0});
  T64 m0 = max_over_axis(x, 0, true);
  ASSERT_EQ(m0.shape(), (std::vector<size_t>{1, 3}));
  EXPECT_DOUBLE_EQ(m0.data()[0], 7.0);
  EXPECT_DOUBLE_EQ(m0.data()[1], 5.0);
  EXPECT_DOUBLE_EQ(m0.data()[2], 5.0);

  T64 m1 = max_over_axis(x, 1, false);
  ASSERT_EQ(m1.shape(), (std::vector<size_t>{2}));
  EXPECT_DOUBLE_EQ(m1.data()[0], 5.0);
  EXPECT_DOUBLE_EQ(m1.data()[1], 7.0);

  // Tie at row 0 columns 1,2: first max (column 1) takes the gradient.
  x.set_requires_grad(true);
  T64 loss = sum_all(max_over_axis(x, 1, true));
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);

  Rng rng(11);
  T64 r = rand_tensor(rng, {3, 4, 2});
  check_grads([&] { return weighted_sum(max_over_axis(r, 1, true), 41); }, {r});
}

TEST(ConcatSlice, RoundTripAndGrads) {
  Rng rng(12);
  T64 a = rand_tensor(rng, {2, 3});
  T64 b = rand_tensor(rng, {2, 3});
  T64 c0 = concat<double>({a, b}, 0);
  ASSERT_EQ(c0.shape(), (std::vector<size_t>{4, 3}));
  EXPECT_DOUBLE_EQ(c0.data()[6], b.data()[0]);
  T64 c1 = concat<double>({a, b}, 1);
  ASSERT_EQ(c1.shape(), (std::vector<size_t>{2, 6}));
  EXPECT_DOUBLE_EQ(c1.data()[3], b.data()[0]);
  EXPECT_DOUBLE_EQ(c1.data()[9], b.data()[3]);

  T64 back = slice(c0, 0, 2, 2);
  for (size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(back.data()[i], b.data()[i]);

  check_grads([&] { return weighted_sum(concat<double>({a, b}, 1), 43); }, {a, b});
  check_grads([&] { return weighted_sum(slice(concat<double>({a, b}, 0), 0, 1, 2), 47); },
              {a, b});
  EXPECT_THROW(concat<double>({a, T64::zeros({3, 3})}, 1), ShapeMismatch);
  EXPECT_THROW(slice(a, 1, 2, 2), ShapeMismatch);
}

TEST(PermuteReshape, ValuesAndGrads) {
  T64 x = T64::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  T64 t = permute(x, {1, 0});
  ASSERT_EQ(t.shape(), (std::vector<size_t>{3, 2}));
  EXPECT_DOUBLE_EQ(t.data()[0], 1.0);
  EXPECT_DOUBLE_EQ(t.data()[1], 4.0);
  EXPECT_DOUBLE_EQ(t.data()[2], 2.0);

  Rng rng(13);
  T64 nd = rand_tensor(rng, {2, 3, 4});
  T64 p = permute(nd, {2, 0, 1});
  ASSERT_EQ(p.shape(), (std::vector<size_t>{4, 2, 3}));
  // p[k][i][j] == nd[i][j][k]
  for (size_t i = 0; i < 2; ++i)
    for (size_t j = 0; j < 3; ++j)
      for (size_t k = 0; k < 4; ++k)
        EXPECT_DOUBLE_EQ(p.data()[(k * 2 + i) * 3 + j], nd.data()[(i * 3 + j) * 4 + k]);

  check_grads([&] { return weighted_sum(permute(nd, {2, 0, 1}), 53); }, {nd});
  check_grads([&] { return weighted_sum(reshape(nd, {6, 4}), 59); }, {nd});
  EXPECT_THROW(permute(nd, {0, 1}), ShapeMismatch);
  EXPECT_THROW(permute(nd, {0, 1, 1}), ShapeMismatch);
  EXPECT_THROW(reshape(nd, {5, 5}), ShapeMismatch);
}

TEST(Reductions, SumMean) {
  T64 x = T64::from_data({2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
  EXPECT_DOUBLE_EQ(sum_all(x).item(), 10.0);
  EXPECT_DOUBLE_EQ(mean_all(x).item(), 2.5);
  T64 loss = mean_all(x);
  backward(loss);
  for (size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 0.25);
}

TEST(MacCounting, ConvFormulas) {
  MacCountGuard g;
  T64 x = T64::zeros({2, 5, 6});
  T64 w = T64::zeros({3, 2, 3, 3});
  conv2d(x, w, T64(), 1, 1);
  EXPECT_EQ(g.macs(), uint64_t(3) * 2 * 3 * 3 * 5 * 6);
}

TEST(MacCounting, Conv1dFormula) {
  MacCountGuard g;
  T64 x = T64::zeros({3, 10});
  T64 w = T64::zeros({4, 3, 1});
  conv1d(x, w, T64());
  EXPECT_EQ(g.macs(), uint64_t(4) * 3 * 10);
}
