/* Copyright 2026 The HTR Toolkit Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "htr/gradcheck.hpp"
#include "htr/lstm.hpp"
#include "htr/ops.hpp"
#include "htr/tensor.hpp"

namespace htr {
namespace {

Tensor<double> Random(Shape shape, std::mt19937_64& rng, bool grad = false) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor<double>(std::move(shape), std::move(v), grad);
}

// Direct six-loop cross-correlation.
std::vector<double> NaiveConv2d(const Tensor<double>& x, const Tensor<double>& w,
                                const Tensor<double>& b, std::size_t stride,
                                std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(B * K * Ho * Wo);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = b.data()[k];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W))
                  continue;
                acc += w.data()[((k * C + c) * kh + i) * kw + j] *
                       x.data()[((n * C + c) * H + iy) * W + ix];
              }
          out[((n * K + k) * Ho + oy) * Wo + ox] = acc;
        }
  return out;
}

TEST(TensorTest, RejectsMismatchedData) {
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
}

TEST(Conv2dTest, SumOfOnes) {
  Tensor<double> x({1, 1, 3, 3}, 1.0);
  Tensor<double> w({1, 1, 3, 3}, 1.0);
  Tensor<double> b({1}, 0.0);
  auto y = conv2d(x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv2dTest, DiracKernelIsIdentity) {
  std::mt19937_64 rng(3);
  auto x = Random({2, 3, 6, 5}, rng);
  for (std::size_t k : {1u, 3u, 5u}) {
    Tensor<double> w({3, 3, k, k}, 0.0);
    for (std::size_t c = 0; c < 3; ++c) w.data()[((c * 3 + c) * k + k / 2) * k + k / 2] = 1.0;
    auto y = conv2d(x, w, Tensor<double>({3}, 0.0), 1, (k - 1) / 2);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
  }
}

TEST(Conv2dTest, MatchesNaiveLoops) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = Random({1, 2, 5, 6}, rng);
    auto w = Random({3, 2, 3, 3}, rng);
    auto b = Random({3}, rng);
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}}) {
      auto y = conv2d(x, w, b, stride, pad);
      auto ref = NaiveConv2d(x, w, b, stride, pad);
      ASSERT_EQ(y.numel(), ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
    }
    auto x2 = Random({2, 2, 7, 5}, rng);
    auto y2 = conv2d(x2, w, b, 2, 1);
    auto ref2 = NaiveConv2d(x2, w, b, 2, 1);
    for (std::size_t i = 0; i < ref2.size(); ++i) EXPECT_NEAR(y2.data()[i], ref2[i], 1e-12);
  }
}

TEST(Conv2dTest, ShapeErrors) {
  Tensor<double> x({1, 2, 5, 5});
  EXPECT_THROW(conv2d(x, Tensor<double>({1, 3, 3, 3}), Tensor<double>({1})), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<double>({1, 2, 2, 2}), Tensor<double>({1})), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<double>({1, 2, 3, 3}), Tensor<double>({2})), ShapeError);
  EXPECT_THROW(conv2d(Tensor<double>({1, 2, 6, 6}), Tensor<double>({1, 2, 3, 3}),
                      Tensor<double>({1}), 2, 0),
               ShapeError);
}

TEST(MaxPoolTest, SingleWindow) {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(maxpool2d(x).item(), 4.0);
}

TEST(MaxPoolTest, TiesRouteGradientToFirstElement) {
  Tensor<double> x({1, 1, 4, 4}, 0.5, true);
  auto y = maxpool2d(x);
  for (double v : y.data()) EXPECT_EQ(v, 0.5);
  sum(y).backward();
  const std::vector<double> expected{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
  ASSERT_TRUE(x.has_grad());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(x.grad()[i], expected[i]);
}

TEST(MaxPoolTest, MatchesLoopOracle) {
  std::mt19937_64 rng(11);
  auto x = Random({1, 1, 4, 4}, rng);
  auto y = maxpool2d(x);
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox) {
      double m = -1e9;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) m = std::max(m, x.data()[(2 * oy + i) * 4 + 2 * ox + j]);
      EXPECT_EQ(y.data()[oy * 2 + ox], m);
    }
}

TEST(MaxPoolTest, OddExtentMentionsCanvas) {
  try {
    maxpool2d(Tensor<double>({1, 1, 3, 4}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("canvas"), std::string::npos);
  }
}

TEST(Conv1dTest, DiracKernelIsIdentity) {
  std::mt19937_64 rng(5);
  auto x = Random({2, 3, 7}, rng);
  Tensor<double> w({3, 3, 3}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) w.data()[(c * 3 + c) * 3 + 1] = 1.0;
  auto y = conv1d(x, w, Tensor<double>({3}, 0.0));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv1dTest, BoundaryArithmetic) {
  auto y = conv1d(Tensor<double>({1, 1, 4}, 1.0), Tensor<double>({1, 1, 3}, 1.0),
                  Tensor<double>({1}, 0.0));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()),
            (std::vector<double>{2, 3, 3, 2}));
}

TEST(Conv1dTest, MatchesLoopOracle) {
  std::mt19937_64 rng(8);
  auto x = Random({2, 3, 6}, rng);
  auto w = Random({4, 3, 3}, rng);
  auto b = Random({4}, rng);
  auto y = conv1d(x, w, b);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t l = 0; l < 6; ++l) {
        double acc = b.data()[k];
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t j = 0; j < 3; ++j) {
            const long p = static_cast<long>(l + j) - 1;
            if (p >= 0 && p < 6) acc += w.data()[(k * 3 + c) * 3 + j] * x.data()[(n * 3 + c) * 6 + p];
          }
        EXPECT_NEAR(y.data()[(n * 4 + k) * 6 + l], acc, 1e-12);
      }
}

TEST(Conv1dTest, RejectsOtherKernelLengths) {
  EXPECT_THROW(conv1d(Tensor<double>({1, 1, 4}), Tensor<double>({1, 1, 5}), Tensor<double>({1})),
               ShapeError);
}

TEST(BatchNormTest, NormalizedInputIsFixedPoint) {
  // Per channel: values {-1, 1} over the batch have mean 0 and variance 1.
  Tensor<double> x({2, 2, 1}, {-1, 1, 1, -1});
  BatchNormStats<double> stats(2);
  auto y = batchnorm(x, Tensor<double>({2}, 1.0), Tensor<double>({2}, 0.0), stats, true);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-5);
}

TEST(BatchNormTest, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(2);
  auto x = Random({3, 2, 4}, rng);
  BatchNormStats<double> stats(2);
  Tensor<double> beta({2}, {0.25, -0.75});
  for (bool training : {true, false}) {
    auto y = batchnorm(x, Tensor<double>({2}, 0.0), beta, stats, training);
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y.data()[(n * 2 + c) * 4 + i], beta.data()[c]);
  }
}

TEST(BatchNormTest, RunningStatisticsUseMomentum) {
  Tensor<double> x({4, 1}, {1, 2, 3, 4});
  BatchNormStats<double> stats(1);
  batchnorm(x, Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.0), stats, true);
  EXPECT_NEAR(stats.mean.data()[0], 0.1 * 2.5, 1e-12);
  // Unbiased variance of {1,2,3,4} is 5/3.
  EXPECT_NEAR(stats.var.data()[0], 0.9 * 1.0 + 0.1 * (5.0 / 3.0), 1e-12);
}

TEST(BatchNormTest, EvalBeforeTrainingUsesInitialStatistics) {
  Tensor<double> x({1, 2, 2}, {0.5, -2.0, 3.0, 1.0});
  BatchNormStats<double> stats(2);
  auto y = batchnorm(x, Tensor<double>({2}, 1.0), Tensor<double>({2}, 0.0), stats, false);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], x.data()[i] / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(LstmTest, ZeroWeightsGiveZeroOutput) {
  std::mt19937_64 rng(1);
  auto x = Random({2, 4, 3}, rng);
  LstmWeights<double> zero{Tensor<double>({8, 3}, 0.0), Tensor<double>({8, 2}, 0.0),
                           Tensor<double>({8}, 0.0)};
  auto y = bilstm_layer(x, BiLstmWeights<double>{zero, zero});
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LstmTest, ReverseDirectionMatchesReversedInput) {
  std::mt19937_64 rng(4);
  auto x = Random({2, 5, 3}, rng);
  auto w = LstmWeights<double>::init(3, 4, rng);
  std::vector<double> reversed(x.numel());
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t d = 0; d < 3; ++d)
        reversed[(b * 5 + (4 - t)) * 3 + d] = x.data()[(b * 5 + t) * 3 + d];
  auto fwd_on_reversed = lstm_direction(Tensor<double>({2, 5, 3}, reversed), w, false);
  auto bwd = lstm_direction(x, w, true);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t h = 0; h < 4; ++h)
        EXPECT_NEAR(fwd_on_reversed.data()[(b * 5 + (4 - t)) * 4 + h],
                    bwd.data()[(b * 5 + t) * 4 + h], 1e-14);
}

TEST(LstmTest, ForgetGateBiasStartsAtOne) {
  std::mt19937_64 rng(0);
  auto w = LstmWeights<float>::init(3, 4, rng);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(w.bias.data()[j], (j >= 4 && j < 8) ? 1.0f : 0.0f);
  for (float v : w.input_weight.data()) EXPECT_LE(std::abs(v), 0.5f);
}

TEST(LogSoftmaxTest, SymmetricLogits) {
  auto y = log_softmax(Tensor<double>({1, 2}, 0.0));
  EXPECT_NEAR(y.data()[0], -std::log(2.0), 1e-15);
  EXPECT_NEAR(y.data()[1], -std::log(2.0), 1e-15);
}

TEST(LogSoftmaxTest, ShiftInvarianceAndNormalization) {
  std::mt19937_64 rng(9);
  auto x = Random({4, 6}, rng);
  auto shifted = x.detach();
  for (double& v : shifted.data()) v += 37.5;
  auto a = log_softmax(x);
  auto b = log_softmax(shifted);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-9);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < 6; ++k) s += std::exp(a.data()[r * 6 + k]);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  // Large logits stay finite.
  auto big = log_softmax(Tensor<float>({1, 3}, {1000.0f, 0.0f, -1000.0f}));
  for (float v : big.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(DropoutTest, EvalIsIdentity) {
  std::mt19937_64 rng(0);
  auto x = Random({3, 7}, rng);
  auto y = dropout(x, 0.5, false, rng);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(DropoutTest, TrainExpectationMatchesEval) {
  std::mt19937_64 rng(21);
  Tensor<double> x({4}, {0.5, -1.0, 2.0, 3.0});
  std::vector<double> mean(4, 0.0);
  const int masks = 20000;
  for (int m = 0; m < masks; ++m) {
    auto y = dropout(x, 0.3, true, rng);
    for (std::size_t i = 0; i < 4; ++i) mean[i] += y.data()[i] / masks;
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(mean[i], x.data()[i], 0.02 * std::abs(x.data()[i]));
}

TEST(BackwardTest, SumOfSquares) {
  Tensor<double> x({3}, {1.0, -2.0, 0.5}, true);
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.data()[i]);
}

TEST(BackwardTest, DisconnectedParameterGetsNoGradient) {
  Tensor<double> x({2}, {1.0, 2.0}, true);
  Tensor<double> p({2}, {3.0, 4.0}, true);
  sum(x).backward();
  EXPECT_FALSE(p.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(BackwardTest, RepeatedCallsAccumulate) {
  Tensor<double> x({2}, {1.0, 2.0}, true);
  auto loss = sum(mul(x, x));
  loss.backward();
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
}

TEST(BackwardTest, SharedInputAccumulates) {
  Tensor<double> x({1}, 3.0, true);
  // y = x*x + x + x: dy/dx = 2x + 2
  sum(add(add(mul(x, x), x), x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(BackwardTest, RejectsNonScalarLoss) {
  Tensor<double> x({2}, 1.0, true);
  EXPECT_THROW(relu(x).backward(), ShapeError);
}

TEST(BackwardTest, NoGradGuardStopsRecording) {
  Tensor<double> x({2}, 1.0, true);
  NoGradGuard guard;
  EXPECT_FALSE(sum(x).requires_grad());
}

TEST(BackwardTest, ThreeLayerCompositionMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = Random({2, 4}, rng, true);
    auto w1 = Random({5, 4}, rng, true);
    auto b1 = Random({5}, rng, true);
    auto w2 = Random({3, 5}, rng, true);
    auto b2 = Random({3}, rng, true);
    auto r = Random({2, 3}, rng);
    auto loss = [=] {
      return sum(mul(log_softmax(linear(relu(linear(x, w1, b1)), w2, b2)), r));
    };
    for (const auto& t : {x, w1, b1, w2, b2}) EXPECT_LT(gradient_rel_error(loss, t), 1e-4);
  }
}

TEST(BackwardTest, DeterministicAcrossRuns) {
  auto run = [] {
    std::mt19937_64 rng(17);
    auto x = Tensor<float>({2, 1, 8, 8}, 0.0f);
    std::uniform_real_distribution<float> d(0, 1);
    for (float& v : x.data()) v = d(rng);
    auto w = Tensor<float>({4, 1, 3, 3}, 0.1f, true);
    auto b = Tensor<float>({4}, 0.0f, true);
    sum(relu(conv2d(x, w, b, 1, 1))).backward();
    return std::vector<float>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

class GradCheckSuite : public ::testing::TestWithParam<std::string> {};

TEST_P(GradCheckSuite, FiniteDifferencesAgree) {
  for (const auto& spec : gradcheck_specs()) {
    if (spec.op != GetParam()) continue;
    const auto result = run_gradcheck(spec, 20);
    EXPECT_TRUE(result.passed()) << spec.op << " rel err " << result.worst_rel_error;
    return;
  }
  FAIL() << "no gradcheck case named " << GetParam();
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradCheckSuite,
                         ::testing::Values("conv2d", "conv2d_stride2", "conv1d", "maxpool2d",
                                           "batchnorm_train", "batchnorm_eval", "linear",
                                           "bilstm_layer", "log_softmax", "ctc_loss",
                                           "flatten_maxpool", "flatten_concat", "relu_add_mul",
                                           "transpose_concat"));

}  // namespace
}  // namespace htr
