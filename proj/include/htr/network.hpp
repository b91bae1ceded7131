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

// Convolutional-recurrent recognizer: residual backbone, column flattening,
// stacked BiLSTM head, and the auxiliary 1D-convolution CTC branch used only
// while training.

#ifndef HTR_NETWORK_HPP_
#define HTR_NETWORK_HPP_

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "htr/common.hpp"
#include "htr/lstm.hpp"
#include "htr/ops.hpp"
#include "htr/tensor.hpp"

namespace htr {

enum class FlattenMode { kMaxPool, kConcat };

// Like NLOHMANN_JSON_SERIALIZE_ENUM, but an unknown name is a ConfigError
// instead of silently mapping to the first enumerator.
#define HTR_STRICT_JSON_ENUM(E, ...)                                                     \
  inline void to_json(nlohmann::json& j, const E& e) {                                   \
    static const std::pair<E, const char*> table[] = __VA_ARGS__;                        \
    for (const auto& [k, v] : table) {                                                   \
      if (k == e) {                                                                      \
        j = v;                                                                           \
        return;                                                                          \
      }                                                                                  \
    }                                                                                    \
    throw std::logic_error("unnamed " #E " value");                                     \
  }                                                                                      \
  inline void from_json(const nlohmann::json& j, E& e) {                                 \
    static const std::pair<E, const char*> table[] = __VA_ARGS__;                        \
    std::string names;                                                                   \
    for (const auto& [k, v] : table) {                                                   \
      if (j.is_string() && j.get_ref<const std::string&>() == v) {                      \
        e = k;                                                                           \
        return;                                                                          \
      }                                                                                  \
      names += names.empty() ? v : std::string(", ") + v;                                \
    }                                                                                    \
    throw ConfigError("invalid " #E " " + j.dump() + ", expected one of " + names);      \
  }

HTR_STRICT_JSON_ENUM(FlattenMode, {{FlattenMode::kMaxPool, "maxpool"},
                                   {FlattenMode::kConcat, "concat"}})

struct NetworkConfig {
  std::size_t stem_kernel = 7;
  std::size_t stem_channels = 32;
  std::vector<std::size_t> block_counts{2, 4, 4};
  std::vector<std::size_t> block_channels{64, 128, 256};
  double dropout = 0.1;
  FlattenMode flatten = FlattenMode::kMaxPool;
  FlattenMode shortcut_input = FlattenMode::kMaxPool;
  std::size_t lstm_layers = 3;
  std::size_t hidden = 256;
  bool shortcut = true;
  std::size_t n_classes = 28;
  // Canvas height; only concatenation flattening depends on it.
  std::size_t input_height = 128;

  static NetworkConfig full(std::size_t n_classes, std::size_t input_height = 128) {
    NetworkConfig cfg;
    cfg.n_classes = n_classes;
    cfg.input_height = input_height;
    return cfg;
  }

  static NetworkConfig tiny(std::size_t n_classes, std::size_t input_height = 32) {
    NetworkConfig cfg;
    cfg.stem_channels = 16;
    cfg.block_counts = {1, 1, 1};
    cfg.block_channels = {16, 32, 64};
    cfg.lstm_layers = 1;
    cfg.hidden = 64;
    cfg.n_classes = n_classes;
    cfg.input_height = input_height;
    return cfg;
  }

  // One 2x2 pool precedes every cascade.
  std::size_t downscale() const { return std::size_t{1} << block_counts.size(); }
  std::size_t feature_channels() const { return block_channels.back(); }
  std::size_t feature_height() const { return input_height / downscale(); }

  std::size_t sequence_features(FlattenMode mode) const {
    return mode == FlattenMode::kMaxPool ? feature_channels()
                                         : feature_channels() * feature_height();
  }

  void validate() const {
    if (stem_kernel % 2 == 0) throw ConfigError("stem kernel must be odd");
    if (block_counts.empty() || block_counts.size() != block_channels.size()) {
      throw ConfigError("block_counts and block_channels must be nonempty and equally long");
    }
    for (std::size_t c : block_counts)
      if (c == 0) throw ConfigError("every cascade needs at least one block");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (lstm_layers == 0 || hidden == 0) throw ConfigError("recurrent head must be nonempty");
    if (n_classes < 2) throw ConfigError("n_classes must include the blank and a character");
    if (input_height == 0 || input_height % downscale() != 0) {
      throw ConfigError("input height " + std::to_string(input_height) +
                        " is not divisible by the backbone downscale " +
                        std::to_string(downscale()));
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NetworkConfig, stem_kernel, stem_channels,
                                                block_counts, block_channels, dropout, flatten,
                                                shortcut_input, lstm_layers, hidden, shortcut,
                                                n_classes, input_height)

// Column-wise max over rows: B x d x h x w -> B x w x d. Gradient flows to the
// first maximal row of each column.
template <typename T>
Tensor<T> flatten_maxpool(const Tensor<T>& fmap) {
  detail::require(fmap.rank() == 4, "flatten_maxpool: feature map must be Bxdxhxw, got " +
                                        to_string(fmap.shape()));
  const std::size_t batch = fmap.dim(0), depth = fmap.dim(1);
  const std::size_t rows = fmap.dim(2), cols = fmap.dim(3);
  std::vector<T> out(batch * cols * depth);
  std::vector<std::size_t> argmax(out.size());
  const T* x = fmap.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < depth; ++c) {
      const std::size_t base = (b * depth + c) * rows * cols;
      for (std::size_t j = 0; j < cols; ++j) {
        std::size_t best = base + j;
        for (std::size_t i = 1; i < rows; ++i) {
          const std::size_t idx = base + i * cols + j;
          if (x[idx] > x[best]) best = idx;
        }
        const std::size_t o = (b * cols + j) * depth + c;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  return Tensor<T>::from_op(Shape{batch, cols, depth}, std::move(out), "flatten_maxpool",
                            {fmap}, [argmax = std::move(argmax)](auto& self) {
                              accumulate_grad(*self.parents[0], [&](T* g) {
                                for (std::size_t o = 0; o < argmax.size(); ++o)
                                  g[argmax[o]] += self.grad[o];
                              });
                            });
}

// Column-wise concatenation: B x d x h x w -> B x w x (h*d). Feature index
// i*d + c holds row i of channel c.
template <typename T>
Tensor<T> flatten_concat(const Tensor<T>& fmap) {
  detail::require(fmap.rank() == 4, "flatten_concat: feature map must be Bxdxhxw, got " +
                                        to_string(fmap.shape()));
  const std::size_t batch = fmap.dim(0), depth = fmap.dim(1);
  const std::size_t rows = fmap.dim(2), cols = fmap.dim(3);
  const std::size_t features = rows * depth;
  const auto dst_index = [=](std::size_t b, std::size_t c, std::size_t i, std::size_t j) {
    return (b * cols + j) * features + i * depth + c;
  };
  std::vector<T> out(fmap.numel());
  const T* x = fmap.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < depth; ++c)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          out[dst_index(b, c, i, j)] = x[((b * depth + c) * rows + i) * cols + j];
  return Tensor<T>::from_op(
      Shape{batch, cols, features}, std::move(out), "flatten_concat", {fmap},
      [=](auto& self) {
        accumulate_grad(*self.parents[0], [&](T* g) {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < depth; ++c)
              for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j)
                  g[((b * depth + c) * rows + i) * cols + j] += self.grad[dst_index(b, c, i, j)];
        });
      });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& fmap, FlattenMode mode) {
  return mode == FlattenMode::kMaxPool ? flatten_maxpool(fmap) : flatten_concat(fmap);
}

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
class Network {
 public:
  struct Output {
    Tensor<T> logits;           // B x w x n_classes
    Tensor<T> shortcut_logits;  // undefined unless training with the shortcut
  };

  Network(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), dropout_rng_(seed + 1) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    stem_conv_ = conv_layer(1, cfg_.stem_channels, cfg_.stem_kernel, rng);
    stem_bn_ = BnLayer(cfg_.stem_channels);
    std::size_t channels = cfg_.stem_channels;
    for (std::size_t c = 0; c < cfg_.block_counts.size(); ++c) {
      std::vector<ResBlock> cascade;
      for (std::size_t k = 0; k < cfg_.block_counts[c]; ++k) {
        const std::size_t out = cfg_.block_channels[c];
        ResBlock block{conv_layer(channels, out, 3, rng), BnLayer(out),
                       conv_layer(out, out, 3, rng), BnLayer(out), {}, {}};
        if (channels != out) {
          block.proj = conv_layer(channels, out, 1, rng);
          block.proj_bn = BnLayer(out);
        }
        cascade.push_back(std::move(block));
        channels = out;
      }
      cascades_.push_back(std::move(cascade));
    }
    std::size_t features = cfg_.sequence_features(cfg_.flatten);
    for (std::size_t l = 0; l < cfg_.lstm_layers; ++l) {
      lstm_.push_back({LstmWeights<T>::init(features, cfg_.hidden, rng),
                       LstmWeights<T>::init(features, cfg_.hidden, rng)});
      features = 2 * cfg_.hidden;
    }
    head_weight_ = uniform({cfg_.n_classes, features}, features, rng);
    head_bias_ = Tensor<T>(Shape{cfg_.n_classes}, T(0), true);
    if (cfg_.shortcut) {
      const std::size_t d = cfg_.sequence_features(cfg_.shortcut_input);
      shortcut_weight_ = uniform({cfg_.n_classes, d, 3}, 3 * d, rng);
      shortcut_bias_ = Tensor<T>(Shape{cfg_.n_classes}, T(0), true);
    }
  }

  const NetworkConfig& config() const { return cfg_; }

  void train() { training_ = true; }
  void eval() { training_ = false; }
  bool training() const { return training_; }

  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  // B x 1 x H x W -> B x d x H/8 x W/8.
  Tensor<T> backbone_forward(const Tensor<T>& images) {
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != cfg_.input_height ||
        images.dim(3) % cfg_.downscale() != 0) {
      throw ShapeError("backbone expects Bx1x" + std::to_string(cfg_.input_height) +
                       "xW images with W divisible by " + std::to_string(cfg_.downscale()) +
                       ", got " + to_string(images.shape()));
    }
    Tensor<T> x = conv2d(images, stem_conv_.weight, stem_conv_.bias, 1, stem_conv_.padding);
    x = dropout(relu(bn(x, stem_bn_)), cfg_.dropout, training_, dropout_rng_);
    for (auto& cascade : cascades_) {
      x = maxpool2d(x, 2, 2);
      for (auto& block : cascade) x = block_forward(x, block);
    }
    return x;
  }

  // B x w x D -> B x w x n_classes raw scores.
  Tensor<T> head_forward(const Tensor<T>& seq) {
    const std::size_t expected = cfg_.sequence_features(cfg_.flatten);
    if (seq.rank() != 3 || seq.dim(2) != expected) {
      throw ShapeError("recurrent head expects BxTx" + std::to_string(expected) + ", got " +
                       to_string(seq.shape()));
    }
    Tensor<T> x = seq;
    for (auto& layer : lstm_) x = bilstm_layer(x, layer);
    return linear(x, head_weight_, head_bias_);
  }

  // Auxiliary branch on B x w x d; never part of inference.
  Tensor<T> shortcut_forward(const Tensor<T>& seq) {
    if (!cfg_.shortcut || !shortcut_weight_.defined()) {
      throw std::logic_error("shortcut branch is disabled for this network");
    }
    if (!training_) {
      throw std::logic_error("shortcut branch is train-only and must not run in eval mode");
    }
    const std::size_t expected = shortcut_weight_.dim(1);
    if (seq.rank() != 3 || seq.dim(2) != expected) {
      throw ShapeError("shortcut expects BxTx" + std::to_string(expected) + ", got " +
                       to_string(seq.shape()));
    }
    return transpose_last2(conv1d(transpose_last2(seq), shortcut_weight_, shortcut_bias_));
  }

  Output forward(const Tensor<T>& images) {
    const Tensor<T> fmap = backbone_forward(images);
    const Tensor<T> seq = flatten(fmap, cfg_.flatten);
    Output out{head_forward(seq), {}};
    if (training_ && cfg_.shortcut && shortcut_weight_.defined()) {
      out.shortcut_logits = shortcut_forward(
          cfg_.shortcut_input == cfg_.flatten ? seq : flatten(fmap, cfg_.shortcut_input));
    }
    return out;
  }

  // Trainable tensors in a fixed order.
  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    add_conv(out, "stem.conv", stem_conv_);
    add_bn(out, "stem.bn", stem_bn_);
    for (std::size_t c = 0; c < cascades_.size(); ++c) {
      for (std::size_t k = 0; k < cascades_[c].size(); ++k) {
        const std::string prefix = "cascade" + std::to_string(c) + ".block" + std::to_string(k);
        const ResBlock& b = cascades_[c][k];
        add_conv(out, prefix + ".conv1", b.conv1);
        add_bn(out, prefix + ".bn1", b.bn1);
        add_conv(out, prefix + ".conv2", b.conv2);
        add_bn(out, prefix + ".bn2", b.bn2);
        if (b.proj.weight.defined()) {
          add_conv(out, prefix + ".proj", b.proj);
          add_bn(out, prefix + ".proj_bn", b.proj_bn);
        }
      }
    }
    for (std::size_t l = 0; l < lstm_.size(); ++l) {
      const std::string prefix = "head.lstm" + std::to_string(l);
      add_lstm(out, prefix + ".fwd", lstm_[l].forward);
      add_lstm(out, prefix + ".bwd", lstm_[l].backward);
    }
    out.push_back({"head.linear.weight", head_weight_});
    out.push_back({"head.linear.bias", head_bias_});
    if (shortcut_weight_.defined()) {
      out.push_back({"shortcut.weight", shortcut_weight_});
      out.push_back({"shortcut.bias", shortcut_bias_});
    }
    return out;
  }

  // Non-trainable state that still defines the model (batch-norm statistics).
  std::vector<NamedTensor<T>> buffers() const {
    std::vector<NamedTensor<T>> out;
    const auto add = [&](const std::string& name, const BnLayer& bn) {
      out.push_back({name + ".running_mean", bn.stats.mean});
      out.push_back({name + ".running_var", bn.stats.var});
    };
    add("stem.bn", stem_bn_);
    for (std::size_t c = 0; c < cascades_.size(); ++c) {
      for (std::size_t k = 0; k < cascades_[c].size(); ++k) {
        const std::string prefix = "cascade" + std::to_string(c) + ".block" + std::to_string(k);
        const ResBlock& b = cascades_[c][k];
        add(prefix + ".bn1", b.bn1);
        add(prefix + ".bn2", b.bn2);
        if (b.proj.weight.defined()) add(prefix + ".proj_bn", b.proj_bn);
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  // Drops the auxiliary branch, as done for deployment.
  void strip_shortcut() {
    shortcut_weight_ = {};
    shortcut_bias_ = {};
    cfg_.shortcut = false;
  }

 private:
  struct ConvLayer {
    Tensor<T> weight;
    Tensor<T> bias;
    std::size_t padding = 0;
  };

  struct BnLayer {
    Tensor<T> gamma;
    Tensor<T> beta;
    BatchNormStats<T> stats;

    BnLayer() = default;
    explicit BnLayer(std::size_t channels)
        : gamma(Shape{channels}, T(1), true), beta(Shape{channels}, T(0), true), stats(channels) {}
  };

  struct ResBlock {
    ConvLayer conv1;
    BnLayer bn1;
    ConvLayer conv2;
    BnLayer bn2;
    ConvLayer proj;  // 1x1 projection when the channel count changes
    BnLayer proj_bn;
  };

  // He-style fan-in scaling for convolutions.
  template <typename Rng>
  static ConvLayer conv_layer(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng) {
    const std::size_t fan_in = in * kernel * kernel;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<T> w(out * fan_in);
    for (T& v : w) v = static_cast<T>(dist(rng));
    return {Tensor<T>(Shape{out, in, kernel, kernel}, std::move(w), true),
            Tensor<T>(Shape{out}, T(0), true), kernel / 2};
  }

  template <typename Rng>
  static Tensor<T> uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(numel(shape));
    for (T& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v), true);
  }

  Tensor<T> bn(const Tensor<T>& x, BnLayer& layer) {
    return batchnorm(x, layer.gamma, layer.beta, layer.stats, training_);
  }

  Tensor<T> conv(const Tensor<T>& x, const ConvLayer& layer) {
    return conv2d(x, layer.weight, layer.bias, 1, layer.padding);
  }

  // conv-bn-relu, conv-bn, residual add, relu, dropout.
  Tensor<T> block_forward(const Tensor<T>& x, ResBlock& b) {
    Tensor<T> y = relu(bn(conv(x, b.conv1), b.bn1));
    y = bn(conv(y, b.conv2), b.bn2);
    const Tensor<T> skip = b.proj.weight.defined() ? bn(conv(x, b.proj), b.proj_bn) : x;
    y = relu(add(y, skip));
    return dropout(y, cfg_.dropout, training_, dropout_rng_);
  }

  static void add_conv(std::vector<NamedTensor<T>>& out, const std::string& name,
                       const ConvLayer& c) {
    out.push_back({name + ".weight", c.weight});
    out.push_back({name + ".bias", c.bias});
  }

  static void add_bn(std::vector<NamedTensor<T>>& out, const std::string& name,
                     const BnLayer& b) {
    out.push_back({name + ".gamma", b.gamma});
    out.push_back({name + ".beta", b.beta});
  }

  static void add_lstm(std::vector<NamedTensor<T>>& out, const std::string& name,
                       const LstmWeights<T>& w) {
    out.push_back({name + ".input_weight", w.input_weight});
    out.push_back({name + ".recurrent_weight", w.recurrent_weight});
    out.push_back({name + ".bias", w.bias});
  }

  NetworkConfig cfg_;
  bool training_ = true;
  std::mt19937_64 dropout_rng_;
  ConvLayer stem_conv_;
  BnLayer stem_bn_;
  std::vector<std::vector<ResBlock>> cascades_;
  std::vector<BiLstmWeights<T>> lstm_;
  Tensor<T> head_weight_;
  Tensor<T> head_bias_;
  Tensor<T> shortcut_weight_;
  Tensor<T> shortcut_bias_;
};

}  // namespace htr

#endif  // HTR_NETWORK_HPP_
