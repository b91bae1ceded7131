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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "htr/ctc.hpp"
#include "htr/gradcheck.hpp"
#include "htr/network.hpp"

namespace htr {
namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(numel(shape));
  for (T& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

std::vector<float> values(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

NetworkConfig small_config(std::size_t classes = 6) {
  NetworkConfig cfg = NetworkConfig::tiny(classes, 16);
  cfg.stem_kernel = 3;
  cfg.stem_channels = 4;
  cfg.block_channels = {4, 6, 8};
  cfg.hidden = 5;
  cfg.dropout = 0.0;
  return cfg;
}

TEST(NetworkShapeTest, TinyPresetSequenceLength) {
  Network<float> net(NetworkConfig::tiny(28), 1);
  net.eval();
  std::mt19937_64 rng(1);
  const auto images = random_tensor<float>({2, 1, 32, 256}, rng, 0.0, 1.0);
  EXPECT_EQ(net.backbone_forward(images).shape(), (Shape{2, 64, 4, 32}));
  EXPECT_EQ(net.forward(images).logits.shape(), (Shape{2, 32, 28}));
}

TEST(NetworkShapeTest, FullLinePresetFeatureMap) {
  Network<float> net(NetworkConfig::full(80), 1);
  net.eval();
  NoGradGuard no_grad;
  const Tensor<float> images(Shape{1, 1, 128, 1024}, 0.0f);
  const Tensor<float> fmap = net.backbone_forward(images);
  EXPECT_EQ(fmap.shape(), (Shape{1, 256, 16, 128}));
  for (float v : fmap.data()) ASSERT_TRUE(std::isfinite(v));
  EXPECT_EQ(flatten_maxpool(fmap).shape(), (Shape{1, 128, 256}));
  EXPECT_EQ(flatten_concat(fmap).shape(), (Shape{1, 128, 4096}));
}

TEST(NetworkShapeTest, WordPresetChain) {
  const NetworkConfig cfg = NetworkConfig::full(28, 64);
  EXPECT_EQ(cfg.feature_height(), 8u);
  EXPECT_EQ(cfg.sequence_features(FlattenMode::kConcat), 8u * 256u);
}

TEST(NetworkShapeTest, RejectsBadCanvas) {
  Network<float> net(small_config(), 1);
  EXPECT_THROW(net.forward(Tensor<float>(Shape{1, 1, 16, 20})), ShapeError);
  EXPECT_THROW(net.forward(Tensor<float>(Shape{1, 1, 24, 16})), ShapeError);
  EXPECT_THROW(net.head_forward(Tensor<float>(Shape{1, 2, 7})), ShapeError);
  NetworkConfig bad = small_config();
  bad.input_height = 20;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(NetworkParamTest, CountIsSeedFree) {
  const Network<float> a(NetworkConfig::full(80), 1), b(NetworkConfig::full(80), 2);
  EXPECT_EQ(a.parameter_count(), b.parameter_count());
  EXPECT_NE(values(a.parameters()[0].tensor), values(b.parameters()[0].tensor));
}

TEST(NetworkParamTest, NamesAreUnique) {
  const Network<float> net(NetworkConfig::full(80), 1);
  std::set<std::string> names;
  for (const auto& p : net.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  for (const auto& b : net.buffers()) EXPECT_TRUE(names.insert(b.name).second) << b.name;
  // stem + 10 blocks, 3 of them with a projection
  EXPECT_EQ(net.buffers().size(), 2u * (1 + 10 * 2 + 3));
}

// Stem 7x7 conv on one channel plus the cascades, counted by hand.
TEST(NetworkParamTest, TinyCountByHand) {
  const NetworkConfig cfg = NetworkConfig::tiny(28);
  const std::size_t stem = 16 * 49 + 16 + 2 * 16;
  const auto block = [](std::size_t in, std::size_t out) {
    std::size_t n = out * in * 9 + out + 2 * out + out * out * 9 + out + 2 * out;
    if (in != out) n += out * in + out + 2 * out;
    return n;
  };
  const std::size_t backbone = block(16, 16) + block(16, 32) + block(32, 64);
  const std::size_t lstm = 2 * (4 * 64 * 64 + 4 * 64 * 64 + 4 * 64);
  const std::size_t head = 28 * 128 + 28;
  const std::size_t shortcut = 3 * 64 * 28 + 28;
  EXPECT_EQ(Network<float>(cfg, 1).parameter_count(), stem + backbone + lstm + head + shortcut);
}

TEST(FlattenTest, ColumnMaxExample) {
  const Tensor<float> fmap(Shape{1, 1, 3, 1}, std::vector<float>{1, 3, 2});
  EXPECT_EQ(flatten_maxpool(fmap).item(), 3.0f);
}

TEST(FlattenTest, ConcatLayoutOracle) {
  std::mt19937_64 rng(2);
  const auto fmap = random_tensor<float>({2, 3, 4, 5}, rng);
  const Tensor<float> seq = flatten_concat(fmap);
  ASSERT_EQ(seq.shape(), (Shape{2, 5, 12}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j)
          ASSERT_EQ(seq.data()[(b * 5 + j) * 12 + i * 3 + c],
                    fmap.data()[((b * 3 + c) * 4 + i) * 5 + j]);
}

TEST(FlattenTest, SingleRowModesAgree) {
  std::mt19937_64 rng(3);
  const auto fmap = random_tensor<float>({2, 4, 1, 6}, rng);
  EXPECT_EQ(values(flatten_maxpool(fmap)), values(flatten_concat(fmap)));
}

// 100 random maps: independent row permutations in every (sample, channel,
// column) leave the max-pooled sequence bit-identical; concat keeps every
// column's h*d values exactly once.
TEST(FlattenTest, RowPermutationInvariance) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> ext(1, 6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = ext(rng), d = ext(rng), h = ext(rng), w = ext(rng);
    const auto fmap = random_tensor<float>({B, d, h, w}, rng);
    std::vector<float> permuted(fmap.numel());
    std::vector<std::size_t> rows(h);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t j = 0; j < w; ++j) {
          std::iota(rows.begin(), rows.end(), 0);
          std::shuffle(rows.begin(), rows.end(), rng);
          for (std::size_t i = 0; i < h; ++i)
            permuted[((b * d + c) * h + i) * w + j] = fmap.data()[((b * d + c) * h + rows[i]) * w + j];
        }
      }
    }
    const Tensor<float> other(fmap.shape(), permuted);
    ASSERT_EQ(values(flatten_maxpool(fmap)), values(flatten_maxpool(other)));

    const Tensor<float> cat = flatten_concat(fmap);
    ASSERT_EQ(cat.shape(), (Shape{B, w, h * d}));
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < w; ++j) {
        std::multiset<float> got(cat.data().begin() + static_cast<std::ptrdiff_t>((b * w + j) * h * d),
                                 cat.data().begin() + static_cast<std::ptrdiff_t>((b * w + j + 1) * h * d));
        std::multiset<float> want;
        for (std::size_t c = 0; c < d; ++c)
          for (std::size_t i = 0; i < h; ++i) want.insert(fmap.data()[((b * d + c) * h + i) * w + j]);
        ASSERT_EQ(got, want);
      }
    }
  }
}

TEST(FlattenTest, MaxPoolGradientGoesToArgmaxRow) {
  Tensor<double> fmap(Shape{1, 1, 3, 2}, std::vector<double>{1, 5, 4, 2, 0, 3}, true);
  sum(flatten_maxpool(fmap)).backward();
  EXPECT_EQ(std::vector<double>(fmap.grad().begin(), fmap.grad().end()),
            (std::vector<double>{0, 1, 1, 0, 0, 0}));
}

TEST(NetworkForwardTest, ZeroImageIsFinite) {
  Network<float> net(NetworkConfig::tiny(28), 3);
  const Tensor<float> zeros(Shape{2, 1, 32, 64}, 0.0f);
  for (bool training : {true, false}) {
    training ? net.train() : net.eval();
    for (float v : net.forward(zeros).logits.data()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(NetworkForwardTest, EvalIsDeterministicTrainIsNot) {
  Network<float> net(NetworkConfig::tiny(28), 4);
  std::mt19937_64 rng(5);
  const auto images = random_tensor<float>({2, 1, 32, 64}, rng, 0.0, 1.0);
  net.eval();
  const auto a = values(net.forward(images).logits);
  EXPECT_EQ(a, values(net.forward(images).logits));
  net.train();
  const auto first = net.forward(images);
  EXPECT_TRUE(first.shortcut_logits.defined());
  EXPECT_NE(values(first.logits), values(net.forward(images).logits));
}

TEST(NetworkForwardTest, ZeroRecurrentWeightsGiveBiasLogits) {
  NetworkConfig cfg = small_config();
  cfg.lstm_layers = 3;
  Network<float> net(cfg, 6);
  Tensor<float> bias;
  for (auto p : net.parameters()) {
    if (p.name.starts_with("head.lstm")) std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0f);
    if (p.name == "head.linear.bias") bias = p.tensor;
  }
  std::iota(bias.data().begin(), bias.data().end(), 1.0f);
  std::mt19937_64 rng(7);
  const Tensor<float> logits = net.head_forward(random_tensor<float>({2, 5, 8}, rng));
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(logits.data()[r * 6 + k], bias.data()[k]);
}

TEST(ShortcutTest, ShapeAndParameterCount) {
  Network<float> net(NetworkConfig::tiny(28), 8);
  std::mt19937_64 rng(9);
  const auto seq = random_tensor<float>({2, 11, 64}, rng);
  EXPECT_EQ(net.shortcut_forward(seq).shape(), (Shape{2, 11, 28}));
  std::size_t n = 0;
  for (const auto& p : net.parameters())
    if (p.name.starts_with("shortcut.")) n += p.tensor.numel();
  EXPECT_EQ(n, 3u * 64u * 28u + 28u);
  const std::size_t with = net.parameter_count();
  net.strip_shortcut();
  EXPECT_EQ(with - net.parameter_count(), n);
}

TEST(ShortcutTest, ConcatHeadStillUsesMaxPooledFeatures) {
  NetworkConfig cfg = NetworkConfig::tiny(28);
  cfg.flatten = FlattenMode::kConcat;
  Network<float> net(cfg, 10);
  std::mt19937_64 rng(11);
  const auto out = net.forward(random_tensor<float>({1, 1, 32, 64}, rng, 0.0, 1.0));
  EXPECT_EQ(out.logits.shape(), (Shape{1, 8, 28}));
  EXPECT_EQ(out.shortcut_logits.shape(), (Shape{1, 8, 28}));
  for (const auto& p : net.parameters()) {
    if (p.name == "head.lstm0.fwd.input_weight") {
      EXPECT_EQ(p.tensor.dim(1), 4u * 64u);
    }
  }
}

TEST(ShortcutTest, RefusedInEvalMode) {
  Network<float> net(NetworkConfig::tiny(28), 12);
  net.eval();
  EXPECT_THROW(net.shortcut_forward(Tensor<float>(Shape{1, 4, 64})), std::logic_error);
  std::mt19937_64 rng(13);
  EXPECT_FALSE(net.forward(random_tensor<float>({1, 1, 32, 64}, rng)).shortcut_logits.defined());
}

TEST(ShortcutTest, StrippingLeavesEvalOutputsBitIdentical) {
  Network<float> net(NetworkConfig::tiny(28), 14);
  std::mt19937_64 rng(15);
  const auto images = random_tensor<float>({3, 1, 32, 64}, rng, 0.0, 1.0);
  net.train();
  net.forward(images);  // move the batch-norm statistics off their initial values
  net.eval();
  const auto before = values(net.forward(images).logits);
  net.strip_shortcut();
  EXPECT_EQ(before, values(net.forward(images).logits));
}

// The shortcut loss reaches the backbone but never the recurrent head.
TEST(ShortcutTest, GradientIsolation) {
  Network<double> net(small_config(), 16);
  std::mt19937_64 rng(17);
  const auto images = random_tensor<double>({2, 1, 16, 32}, rng, 0.0, 1.0);
  const auto out = net.forward(images);
  ctc_loss(out.shortcut_logits, {{1, 2}, {3}}).backward();
  for (const auto& p : net.parameters()) {
    const bool head = p.name.starts_with("head.");
    double norm = 0.0;
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) norm += g * g;
    if (head) {
      EXPECT_EQ(norm, 0.0) << p.name;
    } else if (!p.name.ends_with(".bias") || p.name.starts_with("shortcut")) {
      EXPECT_GT(norm, 0.0) << p.name;
    }
  }
}

// Whole-network finite differences: dropout off, batch statistics in train mode.
TEST(NetworkGradientTest, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Network<double> net(small_config(), 100 + seed);
    std::mt19937_64 rng(200 + seed);
    const auto images = random_tensor<double>({2, 1, 16, 32}, rng, 0.0, 1.0);
    const std::vector<std::vector<int>> targets{{1, 2, 1}, {4}};
    const auto loss = [&] {
      const auto out = net.forward(images);
      return add(ctc_loss(out.logits, targets), scale(ctc_loss(out.shortcut_logits, targets), 0.1));
    };
    for (const auto& p : net.parameters()) {
      if (p.name != "stem.conv.weight" && p.name != "cascade2.block0.conv2.weight" &&
          p.name != "head.lstm0.bwd.recurrent_weight" && p.name != "head.linear.weight" &&
          p.name != "shortcut.weight")
        continue;
      net.zero_grad();
      EXPECT_LT(gradient_rel_error(loss, p.tensor), 1e-4) << p.name << " seed " << seed;
    }
  }
}

TEST(NetworkConfigTest, JsonRoundTripAndDefaults) {
  const NetworkConfig cfg = NetworkConfig::tiny(30);
  const nlohmann::json j = cfg;
  EXPECT_EQ(j["flatten"], "maxpool");
  EXPECT_EQ(nlohmann::json(j.get<NetworkConfig>()), j);
  const auto partial = nlohmann::json{{"hidden", 12}}.get<NetworkConfig>();
  EXPECT_EQ(partial.hidden, 12u);
  EXPECT_EQ(partial.stem_channels, 32u);
}

}  // namespace
}  // namespace htr
