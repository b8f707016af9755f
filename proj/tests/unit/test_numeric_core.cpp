// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "soho/error.hpp"
#include "soho/gradcheck.hpp"
#include "soho/ops.hpp"
#include "test_util.hpp"

namespace soho {
namespace {

using testing::grad_is_zero;
using testing::random_const;
using testing::random_param;

TEST(Matmul, IdentityAndProjector) {
  auto eye = Tensor::constant({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::constant({2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, m);
  EXPECT_EQ(std::vector<Real>(r.data().begin(), r.data().end()), (std::vector<Real>{1, 2, 3, 4}));

  auto p = Tensor::constant({2, 2}, {1, 0, 0, 0});
  auto col = Tensor::constant({2, 1}, {5, 7});
  auto pr = matmul(p, col);
  EXPECT_EQ(pr.shape(), (Shape{2, 1}));
  EXPECT_EQ(pr.at(0), 5.0);
  EXPECT_EQ(pr.at(1), 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, BackwardMatchesFiniteDifferences) {
  Rng rng(11);
  auto a = random_param(rng, {3, 4});
  auto b = random_param(rng, {4, 2});
  GradCheckOptions opt;
  opt.tol = 1e-6;
  auto ra = finite_diff_check([&] { return matmul(a, b); }, a, opt);
  auto rb = finite_diff_check([&] { return matmul(a, b); }, b, opt);
  EXPECT_TRUE(ra.passed) << ra.summary();
  EXPECT_TRUE(rb.passed) << rb.summary();
}

TEST(Softmax, KnownValues) {
  auto u = softmax(Tensor::constant({2}, {0, 0}), 0);
  EXPECT_DOUBLE_EQ(u.at(0), 0.5);
  EXPECT_DOUBLE_EQ(u.at(1), 0.5);

  auto big = softmax(Tensor::constant({2}, {1000, 0}), 0);
  EXPECT_TRUE(std::isfinite(big.at(0)));
  EXPECT_NEAR(big.at(0), 1.0, 1e-15);
  EXPECT_NEAR(big.at(1), 0.0, 1e-15);

  auto logs = softmax(Tensor::constant({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}), 0);
  EXPECT_NEAR(logs.at(0), 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(logs.at(1), 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(logs.at(2), 3.0 / 6.0, 1e-15);
}

TEST(Softmax, RowsSumToOneAlongAnyAxis) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_const(rng, {3, 4, 5}, -5, 5);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto y = softmax(x, axis);
      const Shape& s = y.shape();
      std::size_t outer = 1, inner = 1;
      for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
      for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          Real total = 0.0;
          for (std::size_t j = 0; j < s[axis]; ++j) {
            const Real v = y.at(o * s[axis] * inner + j * inner + in);
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
            total += v;
          }
          EXPECT_NEAR(total, 1.0, 1e-9);
        }
      }
    }
  }
}

TEST(CrossEntropy, UniformAndConfidentCases) {
  auto uniform = cross_entropy_logits(Tensor::constant({1, 4}, {0, 0, 0, 0}), std::vector<std::int32_t>{2});
  EXPECT_NEAR(uniform.item(), std::log(4.0), 1e-15);
  EXPECT_NEAR(uniform.item(), 1.3863, 1e-4);

  auto confident = cross_entropy_logits(Tensor::constant({1, 4}, {30, 0, 0, 0}), std::vector<std::int32_t>{0});
  EXPECT_LT(confident.item(), 1e-12);
}

TEST(CrossEntropy, MatchesScalarRecomputation) {
  Rng rng(5);
  auto logits = random_const(rng, {2, 5}, -3, 3);
  const std::vector<std::int32_t> targets{4, 1};
  // Independent route: log of explicitly normalized exponentials, row by row.
  Real expected = 0.0;
  for (int r = 0; r < 2; ++r) {
    Real z = 0.0;
    for (int j = 0; j < 5; ++j) z += std::exp(logits.at(r, j));
    expected += -std::log(std::exp(logits.at(r, targets[r])) / z);
  }
  expected /= 2.0;
  EXPECT_NEAR(cross_entropy_logits(logits, targets).item(), expected, 1e-12);
}

TEST(CrossEntropy, BackwardIsSoftmaxMinusOneHot) {
  Rng rng(6);
  auto logits = random_param(rng, {3, 4});
  const std::vector<std::int32_t> targets{0, 3, 1};
  backward(cross_entropy_logits(logits, targets));
  auto p = softmax(logits.detach(), 1);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 4; ++j) {
      const Real onehot = (int(j) == targets[r]) ? 1.0 : 0.0;
      EXPECT_NEAR(logits.grad()[r * 4 + j], (p.at(r, j) - onehot) / 3.0, 1e-15);
    }
  }
}

TEST(CrossEntropy, TargetOutOfRange) {
  auto logits = Tensor::zeros({1, 3});
  EXPECT_THROW(cross_entropy_logits(logits, std::vector<std::int32_t>{3}), IndexError);
  EXPECT_THROW(cross_entropy_logits(logits, std::vector<std::int32_t>{-1}), IndexError);
}

TEST(LayerNorm, KnownCases) {
  auto g = Tensor::full({2}, 1.0);
  auto b = Tensor::zeros({2});
  auto y = layer_norm(Tensor::constant({2}, {1, -1}), g, b);
  EXPECT_NEAR(y.at(0), 1.0, 1e-5);
  EXPECT_NEAR(y.at(1), -1.0, 1e-5);

  auto g4 = Tensor::full({4}, 1.0);
  auto b4 = Tensor::zeros({4});
  auto c = layer_norm(Tensor::full({4}, 3.25), g4, b4);
  for (Real v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, OutputStatistics) {
  Rng rng(8);
  const std::size_t c = 257;
  std::vector<Real> v(c);
  for (auto& x : v) x = 100.0 * rng.normal() + 7.0;
  auto y = layer_norm(Tensor::constant({c}, v), Tensor::full({c}, 1.0), Tensor::zeros({c}));
  Real mu = 0.0, var = 0.0;
  for (Real x : y.data()) mu += x;
  mu /= Real(c);
  for (Real x : y.data()) var += (x - mu) * (x - mu);
  var /= Real(c);
  EXPECT_NEAR(mu, 0.0, 1e-6);
  EXPECT_NEAR(var, 1.0, 1e-6);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::parameter({2, 3}, {1, 2, 3, 4, 5, 6});
  backward(sum(x));
  for (Real g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, StopGradientBlocks) {
  auto x = Tensor::parameter({3}, {1, 2, 3});
  auto w = Tensor::parameter({3}, {1, 1, 1});
  backward(sum(add(stop_gradient(x), w)));
  EXPECT_TRUE(!x.has_grad() || grad_is_zero(x));
  for (Real g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, NonScalarLossRejected) {
  auto x = Tensor::parameter({2}, {1, 2});
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, AccumulationIsAdditive) {
  Rng rng(9);
  auto x = random_param(rng, {4, 3});
  auto w = random_param(rng, {3, 2});
  auto f = [&] { return sum(gelu(matmul(x, w))); };
  auto g = [&] { return mean(relu(matmul(x, w))); };

  backward(add(f(), g()));
  std::vector<Real> joint(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(f());
  backward(g());
  for (std::size_t i = 0; i < joint.size(); ++i) EXPECT_NEAR(x.grad()[i], joint[i], 1e-14);
}

TEST(Backward, GradientLinearity) {
  Rng rng(10);
  const auto weights = Tensor::constant({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_param(rng, {3, 3});
    const Real a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    auto f = [&] { return sum(gelu(x)); };
    auto g = [&] { return sum(mul(softmax(x, 1), weights)); };
    backward(f());
    std::vector<Real> gf(x.grad().begin(), x.grad().end());
    x.zero_grad();
    backward(g());
    std::vector<Real> gg(x.grad().begin(), x.grad().end());
    x.zero_grad();
    backward(add(scale(f(), a), scale(g(), b)));
    for (std::size_t i = 0; i < gf.size(); ++i) EXPECT_NEAR(x.grad()[i], a * gf[i] + b * gg[i], 1e-12);
  }
}

TEST(Backward, DeterministicBitwise) {
  auto run = [] {
    Rng rng(42);
    auto x = random_param(rng, {5, 8});
    auto w = random_param(rng, {8, 8});
    auto gain = Tensor::parameter({8}, std::vector<Real>(8, 1.0));
    auto bias = Tensor::parameter({8}, std::vector<Real>(8, 0.0));
    auto y = layer_norm(gelu(matmul(x, w)), gain, bias);
    backward(sum(mul(y, y)));
    std::vector<Real> out(y.data().begin(), y.data().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  auto a = run();
  auto b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(Real)), 0);
}

TEST(GradCheck, Square) {
  auto x = Tensor::parameter({}, {3.0});
  auto report = finite_diff_check([&] { return mul(x, x); }, x);
  ASSERT_EQ(report.analytic.size(), 1u);
  EXPECT_DOUBLE_EQ(report.analytic[0], 6.0);
  EXPECT_NEAR(report.numeric[0], 6.0, 1e-8);
  EXPECT_TRUE(report.passed);
}

TEST(GradCheck, BarrierSurrogate) {
  // f(x) = x^2 + sg[x^3]: the checked surrogate holds the barred term at its
  // value for the unperturbed x.
  Rng rng(12);
  auto x = random_param(rng, {4});
  const auto frozen = mul(mul(x, x), x).detach();
  auto report = finite_diff_check([&] { return sum(add(mul(x, x), stop_gradient(frozen))); }, x);
  EXPECT_TRUE(report.passed) << report.summary();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(report.analytic[i], 2.0 * x.at(i), 1e-14);
}

TEST(GradCheck, DetectsNondeterminism) {
  auto x = Tensor::parameter({1}, {1.0});
  int calls = 0;
  EXPECT_THROW(finite_diff_check([&] { return scale(x, Real(++calls)); }, x), ContractError);
}

TEST(StraightThrough, ForwardExactBackwardIdentity) {
  Rng rng(13);
  auto v = random_param(rng, {3, 2});
  auto d = random_param(rng, {3, 2});
  auto q = straight_through(v, d);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(q.at(i), d.at(i));
  auto w = random_const(rng, {3, 2});
  backward(sum(mul(q, w)));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(v.grad()[i], w.at(i));
  EXPECT_TRUE(grad_is_zero(d));
}

// Every differentiable op against central differences on several random
// configurations.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, MatchFiniteDifferences) {
  Rng rng(1000 + GetParam());
  GradCheckOptions opt;
  auto expect_pass = [&](const char* name, const std::function<Tensor()>& f, const Tensor& x) {
    auto r = finite_diff_check(f, x, opt);
    EXPECT_TRUE(r.passed) << name << ": " << r.summary();
  };

  const std::size_t m = 2 + rng.below(3), n = 2 + rng.below(4), p = 1 + rng.below(4);
  auto a = random_param(rng, {m, n});
  auto b = random_param(rng, {m, n});
  auto w = random_param(rng, {n, p});
  auto bias = random_param(rng, {p});
  auto row = random_param(rng, {n});

  expect_pass("add", [&] { return add(a, b); }, a);
  expect_pass("sub", [&] { return sub(a, b); }, b);
  expect_pass("mul", [&] { return mul(a, b); }, a);
  expect_pass("scale", [&] { return scale(a, 1.7); }, a);
  expect_pass("add_row", [&] { return add_row(a, row); }, row);
  expect_pass("mean", [&] { return mean(a); }, a);
  expect_pass("gelu", [&] { return gelu(a); }, a);
  expect_pass("relu", [&] { return relu(add(a, Tensor::full({m, n}, 0.05))); }, a);
  expect_pass("matmul", [&] { return matmul(a, w); }, w);
  expect_pass("linear.x", [&] { return linear(a, w, bias); }, a);
  expect_pass("linear.w", [&] { return linear(a, w, bias); }, w);
  expect_pass("linear.b", [&] { return linear(a, w, bias); }, bias);
  expect_pass("softmax0", [&] { return softmax(a, 0); }, a);
  expect_pass("softmax1", [&] { return softmax(a, 1); }, a);

  std::vector<std::int32_t> targets(m);
  for (auto& t : targets) t = std::int32_t(rng.below(n));
  expect_pass("cross_entropy", [&] { return cross_entropy_logits(a, targets); }, a);
  std::vector<Real> labels(m * n);
  for (auto& l : labels) l = Real(rng.below(2));
  expect_pass("bce", [&] { return bce_with_logits(a, labels); }, a);

  auto gain = random_param(rng, {n}, 0.5, 1.5);
  auto beta = random_param(rng, {n});
  expect_pass("layer_norm.x", [&] { return layer_norm(a, gain, beta); }, a);
  expect_pass("layer_norm.gain", [&] { return layer_norm(a, gain, beta); }, gain);
  expect_pass("layer_norm.bias", [&] { return layer_norm(a, gain, beta); }, beta);

  std::vector<std::size_t> rows{0, m - 1, 0, 1};
  expect_pass("gather_rows", [&] { return gather_rows(a, rows); }, a);
  expect_pass("concat_rows", [&] { return concat_rows({a, b, a}); }, a);
  auto wide = random_param(rng, {m, p});
  expect_pass("concat_cols", [&] { return concat_cols(a, wide); }, wide);
  std::vector<std::uint8_t> flags(m, 0);
  flags[0] = 1;
  expect_pass("mask_rows.x", [&] { return mask_rows(a, flags, row); }, a);
  expect_pass("mask_rows.fill", [&] { return mask_rows(a, flags, row); }, row);
  expect_pass("reshape", [&] { return reshape(a, {n, m}); }, a);

  const std::size_t N = 1 + rng.below(2), C = 1 + rng.below(3), O = 1 + rng.below(3);
  const std::size_t H = 4 + 2 * rng.below(2), W = 4 + 2 * rng.below(3);
  auto img = random_param(rng, {N, C, H, W});
  auto kw = random_param(rng, {O, C, 3, 3});
  auto kb = random_param(rng, {O});
  expect_pass("conv2d.x", [&] { return conv2d(img, kw, kb, 2, 1); }, img);
  expect_pass("conv2d.w", [&] { return conv2d(img, kw, kb, 2, 1); }, kw);
  expect_pass("conv2d.b", [&] { return conv2d(img, kw, kb, 1, 1); }, kb);
  auto k1 = random_param(rng, {O, C, 1, 1});
  expect_pass("conv2d.1x1", [&] { return conv2d(img, k1, kb, 1, 0); }, k1);
  expect_pass("max_pool2d", [&] { return max_pool2d(img, 2); }, img);
  expect_pass("nchw_to_rows", [&] { return nchw_to_rows(img); }, img);

  const std::size_t heads = 1 + rng.below(2), seq = 3 + rng.below(3), seqs = 1 + rng.below(2);
  const std::size_t c = heads * (2 + rng.below(2));
  auto q = random_param(rng, {seqs * seq, c});
  auto k = random_param(rng, {seqs * seq, c});
  auto v = random_param(rng, {seqs * seq, c});
  std::vector<std::uint8_t> mask(seqs * seq, 1);
  mask[seq - 1] = 0;
  expect_pass("attention.q", [&] { return attention(q, k, v, mask, seq, heads); }, q);
  expect_pass("attention.k", [&] { return attention(q, k, v, mask, seq, heads); }, k);
  expect_pass("attention.v", [&] { return attention(q, k, v, mask, seq, heads); }, v);
}

INSTANTIATE_TEST_SUITE_P(RandomConfigs, OpGradients, ::testing::Range(0, 5));

}  // namespace
}  // namespace soho
