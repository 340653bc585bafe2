#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "lvlm/error.hpp"
#include "lvlm/gradcheck.hpp"
#include "lvlm/ops.hpp"
#include "test_util.hpp"

namespace lvlm {
namespace {

using test::dot;
using test::max_rel_error;
using test::numeric_gradient;
using test::random_tensor;

std::span<const double> none() { return {}; }

// ---------------------------------------------------------------------------
// Tensor

TEST(Tensor, ElementCountMatchesShape) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(shape_numel(t.shape()), t.size());
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), Error);
}

TEST(Tensor, ReshapeKeepsDataAndRejectsBadCounts) {
  auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(r[i], t[i]);
  EXPECT_THROW((void)t.reshaped({4, 2}), Error);
}

TEST(Tensor, IndexingIsRowMajor) {
  Tensor t({2, 3, 4, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
  EXPECT_EQ(t.at(1, 2, 3, 4), static_cast<float>(((1 * 3 + 2) * 4 + 3) * 5 + 4));
}

// ---------------------------------------------------------------------------
// conv2d

TEST(Conv2d, SumOfOnes) {
  Tensor x({1, 1, 3, 3}, 1.0f), w({1, 1, 3, 3}, 1.0f);
  std::vector<float> b{0.0f};
  auto y = conv2d<float>(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y[0], 9.0f);
}

TEST(Conv2d, IdentityKernel) {
  auto x = random_tensor({2, 1, 5, 4}, 3);
  auto w = Tensor64::from({1, 1, 1, 1}, {1.0});
  std::vector<double> b{0.0};
  EXPECT_EQ(conv2d<double>(x, w, b), x);
}

TEST(Conv2d, OutputShapeFormula) {
  for (std::size_t h : {5u, 8u, 9u}) {
    for (std::size_t s : {1u, 2u, 3u}) {
      for (std::size_t p : {0u, 1u, 2u}) {
        auto shape = conv2d_output_shape({1, 2, h, h + 1}, {3, 2, 3, 3}, {s, p});
        EXPECT_EQ(shape[2], (h + 2 * p - 3) / s + 1);
        EXPECT_EQ(shape[3], (h + 1 + 2 * p - 3) / s + 1);
      }
    }
  }
}

TEST(Conv2d, MatchesDirectSumWithPadding) {
  auto x = random_tensor({2, 3, 7, 6}, 11);
  auto w = random_tensor({4, 3, 3, 3}, 12);
  auto bias = random_tensor({4}, 13);
  const Conv2dOptions opt{2, 1};
  auto y = conv2d<double>(x, w, bias.values(), opt);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          double acc = bias[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t a = 0; a < 3; ++a)
              for (std::size_t b = 0; b < 3; ++b) {
                const long r = static_cast<long>(i * 2 + a) - 1, q = static_cast<long>(j * 2 + b) - 1;
                if (r < 0 || q < 0 || r >= 7 || q >= 6) continue;
                acc += x.at(n, c, r, q) * w.at(o, c, a, b);
              }
          EXPECT_NEAR(y.at(n, o, i, j), acc, 1e-12);
        }
}

TEST(Conv2d, RejectsChannelMismatch) {
  Tensor x({1, 2, 4, 4}), w({1, 3, 3, 3});
  try {
    (void)conv2d<float>(x, w, {});
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::shape);
    EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
  }
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  auto x = random_tensor({2, 3, 8, 8}, 21);
  auto w = random_tensor({4, 3, 3, 3}, 22);
  auto b = random_tensor({4}, 23);
  const Conv2dOptions opt{2, 1};
  auto proj = random_tensor(conv2d_output_shape(x.shape(), w.shape(), opt), 24);
  auto f = [&] { return dot(proj, conv2d<double>(x, w, b.values(), opt)); };
  auto g = conv2d_backward<double>(x, w, proj, opt, true);
  EXPECT_LE(max_rel_error(g.input, numeric_gradient(x, f)), 1e-6);
  EXPECT_LE(max_rel_error(g.weight, numeric_gradient(w, f)), 1e-6);
  EXPECT_LE(max_rel_error(g.bias, numeric_gradient(b, f)), 1e-6);
}

// ---------------------------------------------------------------------------
// batchnorm2d

TEST(BatchNorm, TrainModeStandardizesChannels) {
  auto x = random_tensor({4, 3, 5, 5}, 31, 3.0);
  for (auto& v : x.values()) v += 2.0;
  std::vector<double> gamma(3, 1.0), beta(3, 0.0);
  auto y = batchnorm2d_train<double>(x, gamma, beta, {}, nullptr);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    std::size_t m = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) {
        const double v = y[(n * 3 + c) * 25 + i];
        s += v;
        s2 += v * v;
        ++m;
      }
    EXPECT_NEAR(s / m, 0.0, 1e-4);
    EXPECT_NEAR(s2 / m - (s / m) * (s / m), 1.0, 1e-4);
  }
}

TEST(BatchNorm, AffineLaw) {
  auto x = random_tensor({2, 2, 3, 3}, 32);
  std::vector<double> one(2, 1.0), zero(2, 0.0), two(2, 2.0), three(2, 3.0);
  auto base = batchnorm2d_train<double>(x, one, zero, {}, nullptr);
  auto aff = batchnorm2d_train<double>(x, two, three, {}, nullptr);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(aff[i], 2 * base[i] + 3, 1e-12);
}

TEST(BatchNorm, RunningStatisticsMovingAverage) {
  auto x = random_tensor({3, 1, 2, 2}, 33);
  std::vector<double> gamma{1.0}, beta{0.0}, mean{0.5}, var{2.0};
  RunningStats<double> rs{mean, var};
  (void)batchnorm2d_train<double>(x, gamma, beta, {0.1, 1e-5}, &rs);
  double mu = std::accumulate(x.values().begin(), x.values().end(), 0.0) / 12.0;
  double ss = 0;
  for (double v : x.values()) ss += (v - mu) * (v - mu);
  EXPECT_NEAR(mean[0], 0.9 * 0.5 + 0.1 * mu, 1e-12);
  EXPECT_NEAR(var[0], 0.9 * 2.0 + 0.1 * ss / 11.0, 1e-12);
}

TEST(BatchNorm, EvalModeUsesRunningStatistics) {
  auto x = random_tensor({2, 2, 2, 2}, 34);
  std::vector<double> gamma{1.5, 0.5}, beta{0.1, -0.2}, mean{0.3, -0.4}, var{2.0, 0.5};
  const BatchNormOptions opt{0.1, 1e-5};
  auto y = batchnorm2d_eval<double>(x, gamma, beta, mean, var, opt);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t k = (n * 2 + c) * 4 + i;
        EXPECT_NEAR(y[k], gamma[c] * (x[k] - mean[c]) / std::sqrt(var[c] + 1e-5) + beta[c], 1e-12);
      }
}

TEST(BatchNorm, RejectsSingleValuePerChannel) {
  Tensor64 x({1, 2, 1, 1});
  std::vector<double> gamma(2, 1.0), beta(2, 0.0);
  EXPECT_THROW((void)batchnorm2d_train<double>(x, gamma, beta, {}, nullptr), Error);
}

TEST(BatchNorm, BackwardMatchesFiniteDifferences) {
  auto x = random_tensor({4, 2, 5, 5}, 35);
  auto gamma = random_tensor({2}, 36);
  auto beta = random_tensor({2}, 37);
  auto proj = random_tensor(x.shape(), 38);
  auto f = [&] { return dot(proj, batchnorm2d_train<double>(x, gamma.values(), beta.values(), {}, nullptr)); };
  BatchNormCache<double> cache;
  (void)batchnorm2d_train<double>(x, gamma.values(), beta.values(), {}, nullptr, &cache);
  auto g = batchnorm2d_backward<double>(cache, gamma.values(), proj);
  EXPECT_LE(max_rel_error(g.input, numeric_gradient(x, f), 1e-6), 1e-5);
  EXPECT_LE(max_rel_error(g.gamma, numeric_gradient(gamma, f)), 1e-5);
  EXPECT_LE(max_rel_error(g.beta, numeric_gradient(beta, f)), 1e-5);
}

// ---------------------------------------------------------------------------
// relu, pooling

TEST(Relu, Examples) {
  auto y = relu(Tensor::from({3}, {-1, 0, 2}));
  EXPECT_EQ(y, Tensor::from({3}, {0, 0, 2}));
  auto pos = Tensor::from({2, 2}, {0.5f, 1, 2, 3});
  EXPECT_EQ(relu(pos), pos);
}

TEST(Relu, InPlaceMatchesOutOfPlace) {
  auto x = random_tensor({3, 7}, 41);
  auto y = relu(x);
  relu_inplace(x);
  EXPECT_EQ(x, y);
}

TEST(Relu, BackwardMatchesFiniteDifferencesAwayFromZero) {
  auto x = random_tensor({4, 6}, 42);
  for (auto& v : x.values())
    if (std::abs(v) < 1e-3) v = 0.5;
  auto proj = random_tensor(x.shape(), 43);
  auto f = [&] { return dot(proj, relu(x)); };
  auto g = relu_backward(x, proj);
  auto n = numeric_gradient(x, f);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(x[i]) < 1e-6) continue;
    EXPECT_NEAR(g[i], n[i], 1e-8);
  }
}

TEST(MaxPool, Examples) {
  auto x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto r = maxpool2d(x, {2, 2, 0});
  ASSERT_EQ(r.output.size(), 1u);
  EXPECT_EQ(r.output[0], 4.0f);
}

TEST(MaxPool, TiesRouteToFirstWindowElement) {
  Tensor x({1, 1, 4, 4}, 0.7f);
  auto r = maxpool2d(x, {2, 2, 0});
  for (float v : r.output.values()) EXPECT_EQ(v, 0.7f);
  Tensor g(r.output.shape(), 1.0f);
  auto dx = maxpool2d_backward<float>(r.argmax, g, x.shape());
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(dx.at(0, 0, i, j), (i % 2 == 0 && j % 2 == 0) ? 1.0f : 0.0f);
}

TEST(MaxPool, BackwardMatchesFiniteDifferences) {
  // Distinct, well-separated values avoid near-ties.
  Tensor64 x({1, 2, 6, 6});
  std::vector<double> vals(x.size());
  std::iota(vals.begin(), vals.end(), 0.0);
  Rng rng(51);
  rng.shuffle(std::span<double>(vals));
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.1 * vals[i];
  auto proj = random_tensor({1, 2, 3, 3}, 52);
  auto f = [&] { return dot(proj, maxpool2d(x, {2, 2, 0}).output); };
  auto r = maxpool2d(x, {2, 2, 0});
  auto g = maxpool2d_backward<double>(r.argmax, proj, x.shape());
  EXPECT_LE(max_rel_error(g, numeric_gradient(x, f)), 1e-6);
}

TEST(GlobalAvgPool, Examples) {
  auto x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_FLOAT_EQ(global_avg_pool(x)[0], 2.5f);
  Tensor c({2, 3, 4, 4}, 1.25f);
  const auto pooled = global_avg_pool(c);
  for (float v : pooled.values()) EXPECT_FLOAT_EQ(v, 1.25f);
}

TEST(GlobalAvgPool, BackwardSpreadsUniformly) {
  auto g = Tensor64::from({1, 2}, {3.0, -6.0});
  auto dx = global_avg_pool_backward(g, {1, 2, 2, 3});
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_DOUBLE_EQ(dx[i], 0.5);
    EXPECT_DOUBLE_EQ(dx[6 + i], -1.0);
  }
}

// ---------------------------------------------------------------------------
// linear, normalization, cosine

TEST(Linear, Examples) {
  auto x = Tensor::from({1, 2}, {1, 2});
  auto w = Tensor::from({1, 2}, {3, 4});
  std::vector<float> b{5};
  EXPECT_FLOAT_EQ(linear<float>(x, w, b)[0], 16.0f);

  auto in = random_tensor({3, 4}, 61);
  Tensor64 eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1;
  std::vector<double> zero(4, 0.0);
  EXPECT_EQ(linear<double>(in, eye, zero), in);
}

TEST(Linear, RejectsWidthMismatch) {
  Tensor x({2, 3}), w({2, 4});
  EXPECT_THROW((void)linear<float>(x, w, {}), Error);
}

TEST(Linear, BackwardMatchesFiniteDifferences) {
  auto x = random_tensor({4, 6}, 62);
  auto w = random_tensor({3, 6}, 63);
  auto b = random_tensor({3}, 64);
  auto proj = random_tensor({4, 3}, 65);
  auto f = [&] { return dot(proj, linear<double>(x, w, b.values())); };
  auto g = linear_backward<double>(x, w, proj);
  EXPECT_LE(max_rel_error(g.input, numeric_gradient(x, f)), 1e-6);
  EXPECT_LE(max_rel_error(g.weight, numeric_gradient(w, f)), 1e-6);
  EXPECT_LE(max_rel_error(g.bias, numeric_gradient(b, f)), 1e-6);
}

TEST(L2Normalize, Examples) {
  auto y = l2_normalize(Tensor64::from({1, 2}, {3, 4}));
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
  auto u = Tensor64::from({1, 3}, {0.6, 0.0, 0.8});
  auto v = l2_normalize(u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(v[i], u[i], 1e-6);
  auto z = l2_normalize(Tensor64({1, 3}));
  EXPECT_TRUE(z.all_finite());
}

TEST(L2Normalize, BackwardMatchesFiniteDifferences) {
  auto x = random_tensor({3, 5}, 71);
  auto proj = random_tensor({3, 5}, 72);
  auto f = [&] { return dot(proj, l2_normalize(x)); };
  auto g = l2_normalize_backward(x, proj);
  EXPECT_LE(max_rel_error(g, numeric_gradient(x, f)), 1e-5);
}

TEST(Cosine, Examples) {
  auto a = Tensor64::from({1, 2}, {1, 0});
  EXPECT_NEAR(cosine_similarity_matrix(a, Tensor64::from({1, 2}, {0, 1}))[0], 0.0, 1e-15);
  EXPECT_NEAR(cosine_similarity_matrix(a, Tensor64::from({1, 2}, {1, 1}))[0], 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(cosine_similarity_matrix(a, Tensor64::from({1, 2}, {1, 1}))[0], 0.70711, 5e-6);
  auto r = random_tensor({1, 9}, 81);
  EXPECT_NEAR(cosine_similarity_matrix(r, r)[0], 1.0, 1e-12);
}

TEST(Cosine, EntriesBoundedProperty) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto img = random_tensor({5, 7}, 100 + seed, 10.0);
    auto txt = random_tensor({4, 7}, 200 + seed, 0.01);
    const auto cos = cosine_similarity_matrix(img, txt);
    for (double v : cos.values()) {
      EXPECT_LE(v, 1.0 + 1e-5);
      EXPECT_GE(v, -1.0 - 1e-5);
    }
  }
}

TEST(Cosine, ZeroRowIsGuarded) {
  auto img = Tensor64({1, 3});
  auto txt = Tensor64::from({1, 3}, {1, 2, 3});
  EXPECT_TRUE(cosine_similarity_matrix(img, txt).all_finite());
}

TEST(Cosine, BackwardMatchesFiniteDifferences) {
  auto img = random_tensor({3, 5}, 82);
  auto txt = random_tensor({4, 5}, 83);
  auto proj = random_tensor({3, 4}, 84);
  auto f = [&] { return dot(proj, cosine_similarity_matrix(img, txt)); };
  auto g = cosine_similarity_backward(img, txt, proj);
  EXPECT_LE(max_rel_error(g.img, numeric_gradient(img, f)), 1e-5);
  EXPECT_LE(max_rel_error(g.txt, numeric_gradient(txt, f)), 1e-5);
}

// ---------------------------------------------------------------------------
// softmax cross-entropy

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogC) {
  Tensor64 logits({3, 4}, 2.5);
  std::vector<std::size_t> labels{0, 1, 3};
  EXPECT_NEAR(softmax_cross_entropy<double>(logits, labels), std::log(4.0), 1e-12);
  EXPECT_NEAR(softmax_cross_entropy<double>(logits, labels), 1.38629, 5e-6);
}

TEST(SoftmaxCrossEntropy, SingleRowExample) {
  auto logits = Tensor64::from({1, 4}, {1, 0, 0, 0});
  std::vector<std::size_t> labels{0};
  const double e = std::exp(1.0);
  EXPECT_NEAR(softmax_cross_entropy<double>(logits, labels), -std::log(e / (e + 3)), 1e-14);
  EXPECT_NEAR(softmax_cross_entropy<double>(logits, labels), 0.74366, 1e-5);
}

TEST(SoftmaxCrossEntropy, StableForLargeLogitsAndNonNegative) {
  auto logits = Tensor64::from({2, 3}, {1000, 999, -1000, -500, 2000, 0});
  std::vector<std::size_t> labels{1, 2};
  const double loss = softmax_cross_entropy<double>(logits, labels);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_GE(loss, 0.0);
  auto p = softmax_rows(logits);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
}

TEST(SoftmaxCrossEntropy, RejectsEmptyBatchAndBadLabels) {
  Tensor64 empty({0, 4});
  EXPECT_THROW((void)softmax_cross_entropy<double>(empty, std::vector<std::size_t>{}), Error);
  Tensor64 logits({1, 4});
  EXPECT_THROW((void)softmax_cross_entropy<double>(logits, std::vector<std::size_t>{4}), Error);
}

TEST(SoftmaxCrossEntropy, BackwardMatchesFiniteDifferences) {
  auto logits = random_tensor({5, 4}, 91);
  std::vector<std::size_t> labels{0, 3, 1, 2, 3};
  auto f = [&] { return softmax_cross_entropy<double>(logits, labels); };
  auto g = softmax_cross_entropy_backward<double>(logits, labels);
  EXPECT_LE(max_rel_error(g, numeric_gradient(logits, f)), 1e-6);
}

// ---------------------------------------------------------------------------
// finite-difference harness

TEST(FiniteDifferenceCheck, LinearLayerLoss) {
  auto x = random_tensor({4, 6}, 95);
  auto w = random_tensor({3, 6}, 96);
  auto proj = random_tensor({4, 3}, 97);
  auto g = linear_backward<double>(x, w, proj);
  FdObjective obj = [&] { return FdEvaluation{dot(proj, linear<double>(x, w, none())), 0}; };
  auto report = finite_difference_check(obj, {{"x", &x, &g.input}, {"w", &w, &g.weight}});
  EXPECT_LE(report.max_rel_error(), 1e-6);
  ASSERT_EQ(report.tensors.size(), 2u);
  EXPECT_EQ(report.tensors[0].checked, x.size());
}

TEST(FiniteDifferenceCheck, ConstantFunction) {
  auto x = random_tensor({5}, 98);
  Tensor64 zero({5});
  FdObjective obj = [] { return FdEvaluation{3.0, 0}; };
  auto report = finite_difference_check(obj, {{"x", &x, &zero}});
  EXPECT_EQ(report.max_rel_error(), 0.0);
}

TEST(FiniteDifferenceCheck, DetectsWrongGradient) {
  auto x = random_tensor({3}, 99);
  Tensor64 wrong({3}, 1.0);
  FdObjective obj = [&] { return FdEvaluation{x[0] * x[0] + x[1] * x[1] + x[2] * x[2], 0}; };
  auto report = finite_difference_check(obj, {{"x", &x, &wrong}});
  EXPECT_FALSE(report.passed(1e-5));
}

TEST(FiniteDifferenceCheck, RelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0, 1e-8), 0.1);
}

}  // namespace
}  // namespace lvlm
