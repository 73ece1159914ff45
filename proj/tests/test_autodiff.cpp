#include <gtest/gtest.h>

#include "jscc/gradcheck.hpp"

using namespace jscc;
using namespace jscc::ad;

namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  RngStream rng(seed);
  Tensor<double> t(std::move(s));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Direct six-loop cross-correlation, the reference for conv2d.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, std::size_t s,
                          std::size_t p) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
  Tensor<double> y(Shape{B, O, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t r = 0; r < Ho; ++r)
        for (std::size_t c = 0; c < Wo; ++c) {
          double acc = 0;
          for (std::size_t ch = 0; ch < C; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long yy = long(r * s + i) - long(p), xx = long(c * s + j) - long(p);
                if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
                acc += x[((b * C + ch) * H + yy) * W + xx] * w[((o * C + ch) * kh + i) * kw + j];
              }
          y[((b * O + o) * Ho + r) * Wo + c] = acc;
        }
  return y;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

TEST(Forward, IdentityAndAdd) {
  Graph<double> g;
  auto x = g.input("x", Tensor<double>({3}, {1, 2, 3}));
  auto id = reshape(x, Shape{3});
  EXPECT_EQ(id.value().data, (std::vector<double>{1, 2, 3}));

  Graph<double> g2;
  auto y = g2.input("x", Tensor<double>({2}, {1, 2}));
  EXPECT_EQ(add(y, y).value().data, (std::vector<double>{2, 4}));
}

TEST(Forward, ChainAndRebind) {
  Graph<double> g;
  auto x = g.input("x", Tensor<double>({1}, {1}));
  auto out = square(add_scalar(scale(x, 2.0), 1.0));
  EXPECT_DOUBLE_EQ(out.value()[0], 9.0);
  g.forward({{"x", Tensor<double>({1}, {2})}});
  EXPECT_DOUBLE_EQ(out.value()[0], 25.0);
}

TEST(Forward, Errors) {
  Graph<double> g;
  auto a = g.input("a", Tensor<double>({2}));
  auto b = g.input("b", Tensor<double>({3}));
  try {
    add(a, b);
    FAIL() << "expected shape error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("(add)"), std::string::npos) << e.what();
  }
  EXPECT_THROW(g.input("bad", Tensor<double>({1}, {std::nan("")})), NumericError);
  EXPECT_THROW(g.forward({{"a", Tensor<double>({3})}}), ShapeError);
  EXPECT_THROW(g.forward({{"nope", Tensor<double>({2})}}), Error);
}

TEST(Backward, ScalarExamples) {
  Graph<double> g;
  auto x = g.input("x", Tensor<double>({1}, {3}), true);
  auto y = square(x);
  g.backward(y);
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 6.0);

  Graph<double> g2;
  auto v = g2.input("x", Tensor<double>({2}, {1, 2}), true);
  g2.backward(sum(mul(v, v)));
  EXPECT_EQ(g2.grad(v).data, (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarOutputIsError) {
  Graph<double> g;
  auto x = g.input("x", Tensor<double>({2}, {1, 2}), true);
  EXPECT_THROW(g.backward(square(x)), ShapeError);
}

TEST(Backward, FanOutSumsBranches) {
  Graph<double> g;
  auto x = g.input("x", Tensor<double>({1}, {1.5}), true);
  // f = x^2 + 3x -> f' = 2x + 3
  auto f = add(square(x), scale(x, 3.0));
  g.backward(sum(f));
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 2 * 1.5 + 3);
}

TEST(Backward, ParameterGradAccumulates) {
  Tensor<double> p({2}, {1, -1});
  p.requires_grad = true;
  for (int rep = 0; rep < 2; ++rep) {
    Graph<double> g;
    g.backward(sum(square(g.parameter(p))));
  }
  EXPECT_EQ(*p.grad, (std::vector<double>{4, -4}));
}

TEST(Conv, MatchesNaiveLoops) {
  for (auto [s, p] : {std::pair{1, 1}, {2, 2}, {2, 0}, {1, 0}}) {
    auto x = random_tensor({2, 3, 9, 7}, 1);
    auto w = random_tensor({4, 3, 5, 3}, 2);
    Graph<double> g;
    auto y = conv2d(g.input("x", x), g.input("w", w), s, p);
    auto ref = naive_conv(x, w, s, p);
    ASSERT_EQ(y.shape(), ref.shape);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-12);
  }
}

TEST(Conv, OneByOneKernelScales) {
  auto x = random_tensor({2, 1, 5, 6}, 3);
  Graph<double> g;
  auto y = conv2d(g.input("x", x), g.input("w", Tensor<double>({1, 1, 1, 1}, {-2.5})));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], -2.5 * x[i]);
}

TEST(Conv, TransposeIsAdjoint) {
  // <conv(x), y> == <x, conv_transpose(y)> for the same kernel and geometry.
  auto x = random_tensor({2, 3, 8, 8}, 4);
  auto w = random_tensor({5, 3, 5, 5}, 5);
  Graph<double> g;
  auto cx = conv2d(g.input("x", x), g.input("w", w), 2, 2);
  auto y = random_tensor(cx.shape(), 6);
  auto ty = conv_transpose2d(g.input("y", y), g.input("w2", w), 2, 2, 1);
  ASSERT_EQ(ty.shape(), x.shape);
  EXPECT_NEAR(dot(cx.value(), y), dot(x, ty.value()), 1e-10);
}

TEST(BatchNorm, TrainNormalizesAndUpdatesRunningStats) {
  auto x = random_tensor({4, 2, 3, 3}, 7, 0, 4);
  Tensor<double> rm({2}, 0.0), rv({2}, 1.0);
  Graph<double> g(0, Mode::train);
  auto y = batch_norm(g.input("x", x), g.input("gamma", Tensor<double>({2}, 1.0)),
                      g.input("beta", Tensor<double>({2}, 0.0)), &rm, &rv);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, ss = 0, xs = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) {
        const double v = y.value()[(n * 2 + c) * 9 + i];
        s += v;
        ss += v * v;
        xs += x[(n * 2 + c) * 9 + i];
      }
    EXPECT_NEAR(s / 36, 0, 1e-12);
    EXPECT_NEAR(ss / 36, 1, 1e-4);
    EXPECT_NEAR(rm[c], 0.1 * xs / 36, 1e-12);
  }
  Graph<double> ge(0, Mode::eval);
  auto ye = batch_norm(ge.input("x", x), ge.input("gamma", Tensor<double>({2}, 1.0)),
                       ge.input("beta", Tensor<double>({2}, 0.0)), &rm, &rv);
  EXPECT_NEAR(ye.value()[0], (x[0] - rm[0]) / std::sqrt(rv[0] + 1e-5), 1e-12);
}

TEST(GaussianSample, DegenerateAndPassThrough) {
  Graph<double> g(11);
  auto mu = g.input("mu", Tensor<double>({4}, {1, 2, 3, 4}));
  auto z = gaussian_sample(mu, g.input("lv", Tensor<double>({4}, -200.0)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(z.value()[i], mu.value()[i], 1e-30);

  Graph<double> g2(11);
  auto z2 = gaussian_sample(g2.input("mu", Tensor<double>({4}, 0.0)), g2.input("lv", Tensor<double>({4}, 0.0)));
  EXPECT_EQ(z2.value().data, g2.op<GaussianSampleOp<double>>(z2).epsilon().data);
}

TEST(Determinism, SameSeedBitIdentical) {
  auto run = [] {
    Graph<float> g(99);
    auto mu = g.input("mu", Tensor<float>({8}, 0.5f));
    auto z = gaussian_sample(mu, g.input("lv", Tensor<float>({8}, 0.1f)));
    return sigmoid(z).value().data;
  };
  EXPECT_EQ(run(), run());
}

TEST(Gradcheck, DocumentedExamples) {
  EXPECT_LT(gradcheck("add", {{2, 2}, {2, 2}}, 1).worst(), 1e-6);
  EXPECT_LT(gradcheck("conv2d", {{1, 3, 8, 8}, {4, 3, 3, 3}}, 1).worst(), 1e-4);
  EXPECT_LT(gradcheck("ssim_loss", {{1, 3, 16, 16}, {1, 3, 16, 16}}, 1).worst(), 1e-4);
  EXPECT_THROW(gradcheck("no_such_op", {}, 0), ValidationError);
}

class GradcheckAllOps : public ::testing::TestWithParam<std::string> {};

TEST_P(GradcheckAllOps, TwentySeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = gradcheck(GetParam(), {}, seed);
    EXPECT_LT(r.worst(), 1e-4) << GetParam() << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Registry, GradcheckAllOps, ::testing::ValuesIn(gradcheck_op_names()),
                         [](const auto& info) { return info.param; });
