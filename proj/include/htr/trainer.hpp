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

#ifndef HTR_TRAINER_HPP_
#define HTR_TRAINER_HPP_

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "htr/alphabet.hpp"
#include "htr/common.hpp"
#include "htr/ctc.hpp"
#include "htr/dataset.hpp"
#include "htr/metrics.hpp"
#include "htr/network.hpp"
#include "htr/ops.hpp"
#include "htr/preprocessing.hpp"
#include "htr/tensor.hpp"

namespace htr {

namespace fs = std::filesystem;

enum class Preset { kLine, kWord, kTiny };

HTR_STRICT_JSON_ENUM(Preset, {{Preset::kLine, "line"},
                              {Preset::kWord, "word"},
                              {Preset::kTiny, "tiny"}})
HTR_STRICT_JSON_ENUM(Placing, {{Placing::kPad, "pad"}, {Placing::kResize, "resize"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentParams, max_rotation_deg, max_shear,
                                                noise_sigma, enabled)

inline CanvasSpec canvas_for(Preset preset) {
  switch (preset) {
    case Preset::kLine: return CanvasSpec::line();
    case Preset::kWord: return CanvasSpec::word();
    case Preset::kTiny: return CanvasSpec::tiny();
  }
  throw ConfigError("unknown preset");
}

struct TrainConfig {
  Preset preset = Preset::kLine;
  std::string alphabet = " abcdefghijklmnopqrstuvwxyz";
  double base_lr = 1e-3;
  std::size_t total_epochs = 240;
  std::vector<std::size_t> milestones{120, 180};
  double gamma = 0.1;
  std::size_t batch_size = 16;
  double shortcut_weight = 0.1;  // 0 trains without the auxiliary branch
  std::uint64_t seed = 1;
  AugmentParams augment;
  FlattenMode flatten = FlattenMode::kMaxPool;
  Placing placing = Placing::kPad;
  std::string train_manifest;
  std::string val_manifest;
  std::string out_dir = "run";
  double grad_clip = 0.0;  // global L2 norm; 0 disables
  bool log_wall_time = true;
  nlohmann::json network = nlohmann::json::object();  // NetworkConfig field overrides

  // Milestones at the same 50% / 75% fractions of a shorter run.
  static std::vector<std::size_t> scaled_milestones(std::size_t epochs) {
    return {epochs / 2, epochs * 3 / 4};
  }

  void set_epochs(std::size_t epochs) {
    total_epochs = epochs;
    milestones = scaled_milestones(epochs);
  }

  CanvasSpec canvas() const { return canvas_for(preset); }

  Alphabet make_alphabet() const { return Alphabet::from_chars(alphabet); }

  NetworkConfig network_config() const {
    const std::size_t classes = make_alphabet().size();
    const CanvasSpec spec = canvas();
    NetworkConfig base = preset == Preset::kTiny ? NetworkConfig::tiny(classes, spec.height)
                                                 : NetworkConfig::full(classes, spec.height);
    nlohmann::json merged = base;
    merged.merge_patch(network);
    NetworkConfig cfg;
    try {
      cfg = merged.get<NetworkConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("network: ") + e.what());
    }
    cfg.flatten = flatten;
    cfg.shortcut = shortcut_weight > 0.0;
    cfg.validate();
    return cfg;
  }

  void validate() const {
    if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
    if (total_epochs == 0) throw ConfigError("total_epochs must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] >= total_epochs) {
        throw ConfigError("milestone " + std::to_string(milestones[i]) +
                          " is not below total_epochs " + std::to_string(total_epochs));
      }
      // Equal milestones are allowed: short scaled schedules can collapse them.
      if (i && milestones[i] < milestones[i - 1]) {
        throw ConfigError("milestones must be nondecreasing");
      }
    }
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(shortcut_weight >= 0.0) || !std::isfinite(shortcut_weight)) {
      throw ConfigError("shortcut_weight must be a finite value >= 0");
    }
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
    if (!network.is_object()) throw ConfigError("network must be a JSON object");
    for (const char* key : {"flatten", "shortcut", "n_classes", "input_height"}) {
      if (network.contains(key)) {
        throw ConfigError(std::string("network.") + key +
                          " is derived from the training config and cannot be set");
      }
    }
    augment.validate();
    make_alphabet();
    network_config();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, preset, alphabet, base_lr,
                                                total_epochs, milestones, gamma, batch_size,
                                                shortcut_weight, seed, augment, flatten, placing,
                                                train_manifest, val_manifest, out_dir, grad_clip,
                                                log_wall_time, network)

// Parses and validates a config document; unknown keys are errors.
inline TrainConfig parse_train_config(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  const nlohmann::json known = TrainConfig{};
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  TrainConfig cfg;
  try {
    cfg = doc.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_train_config(doc);
}

// L = L_main + lambda * L_shortcut.
inline double multitask_loss(double main, double shortcut, double lambda) {
  return main + lambda * shortcut;
}

// With lambda = 0 or no shortcut logits the result is the main loss itself,
// so the shortcut branch gets no gradient at all.
template <typename T>
Tensor<T> multitask_loss(const Tensor<T>& main, const Tensor<T>& shortcut, double lambda) {
  if (lambda < 0.0) throw ConfigError("shortcut weight must be >= 0");
  if (lambda == 0.0 || !shortcut.defined()) return main;
  return add(main, scale(shortcut, static_cast<T>(lambda)));
}

// Piecewise constant: base_lr, times gamma for every milestone reached.
inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.total_epochs) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside a " +
                            std::to_string(cfg.total_epochs) + "-epoch schedule");
  }
  double lr = cfg.base_lr;
  for (std::size_t m : cfg.milestones) {
    if (epoch >= m) lr *= cfg.gamma;
  }
  return lr;
}

template <typename T>
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit Adam(std::vector<NamedTensor<T>> params, Options options = {})
      : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), T(0));
      v_.emplace_back(p.tensor.numel(), T(0));
    }
  }

  // Parameters without a gradient are left alone, moments included.
  void step(double lr) {
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (T g : p.tensor.grad()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericError("non-finite gradient in parameter '" + p.name + "'");
        }
      }
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T> param = params_[i].tensor;
      if (!param.has_grad()) continue;
      const auto g = param.grad();
      auto w = param.data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        const double m = options_.beta1 * m_[i][j] + (1.0 - options_.beta1) * gj;
        const double v = options_.beta2 * v_[i][j] + (1.0 - options_.beta2) * gj * gj;
        m_[i][j] = static_cast<T>(m);
        v_[i][j] = static_cast<T>(v);
        w[j] = static_cast<T>(w[j] - lr * (m / c1) / (std::sqrt(v / c2) + options_.eps));
      }
    }
  }

  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  std::vector<T>& first_moment(std::size_t i) { return m_.at(i); }
  std::vector<T>& second_moment(std::size_t i) { return v_.at(i); }
  const std::vector<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<T>& second_moment(std::size_t i) const { return v_.at(i); }
  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t steps) { steps_ = steps; }

 private:
  std::vector<NamedTensor<T>> params_;
  Options options_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::uint64_t steps_ = 0;
};

// Rescales all gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<NamedTensor<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.mutable_grad()) g = static_cast<T>(g * factor);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Metric log

struct MetricRow {
  std::size_t epoch = 0;
  std::string split;
  double loss_main = 0.0;
  std::optional<double> loss_shortcut;
  double cer = 0.0;
  double wer = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

namespace detail {

// Shortest text that reads back as the same double.
inline std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// splitmix64 over the words; used to derive independent per-epoch streams.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> words) {
  std::uint64_t h = 0x9E3779B97F4A7C15ull;
  for (std::uint64_t w : words) {
    h ^= w + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
    h += 0x9E3779B97F4A7C15ull;
    h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ull;
    h = (h ^ (h >> 27)) * 0x94D049BB133111EBull;
    h ^= h >> 31;
  }
  return h;
}

}  // namespace detail

class MetricLog {
 public:
  static constexpr const char* kHeader =
      "epoch,split,loss_main,loss_shortcut,cer,wer,lr,wall_seconds";

  MetricLog() = default;

  // Starts a fresh file, or keeps the existing rows when `append` is set.
  MetricLog(fs::path path, bool append) : path_(std::move(path)) {
    if (append && fs::exists(path_)) {
      std::ifstream in(path_);
      std::string line;
      std::getline(in, line);
      if (line != kHeader) throw DataError(path_.string() + ": not a metrics log");
      while (std::getline(in, line)) lines_.push_back(line);
    } else {
      std::ofstream out(path_);
      if (!out) throw DataError("cannot write " + path_.string());
      out << kHeader << '\n';
    }
  }

  static std::string format(const MetricRow& r) {
    std::string line = std::to_string(r.epoch) + ',' + r.split + ',' + detail::fixed(r.loss_main, 6) +
                       ',' + (r.loss_shortcut ? detail::fixed(*r.loss_shortcut, 6) : "") + ',' +
                       detail::fixed(r.cer, 4) + ',' + detail::fixed(r.wer, 4) + ',' +
                       detail::shortest(r.lr) + ',' + detail::fixed(r.wall_seconds, 3);
    return line;
  }

  void append(const MetricRow& row) {
    const std::string line = format(row);
    lines_.push_back(line);
    rows_.push_back(row);
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    if (!out) throw DataError("cannot append to " + path_.string());
    out << line << '\n';
  }

  const std::vector<MetricRow>& rows() const { return rows_; }

  // Hex FNV-1a over every logged line, in order.
  std::string digest() const {
    std::uint64_t h = detail::fnv1a(kHeader);
    for (const auto& l : lines_) h = detail::fnv1a(l, detail::fnv1a("\n", h));
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

 private:
  fs::path path_;
  std::vector<std::string> lines_;
  std::vector<MetricRow> rows_;  // rows appended by this process
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout, all integers little-endian:
//   "HTRCKPT\0"  u32 version  u64 n  <n bytes of JSON metadata>
//   u32 blocks, then per block: u32 n <name>  u32 rank  u64 dims[rank]  f32 values

struct CheckpointBlock {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr char kMagic[8] = {'H', 'T', 'R', 'C', 'K', 'P', 'T', '\0'};

  std::uint32_t version = kVersion;
  NetworkConfig network;
  TrainConfig train;
  std::string alphabet;
  std::size_t epoch = 0;
  std::uint64_t adam_steps = 0;
  double best_cer = 0.0;
  std::string metrics_digest;
  std::vector<CheckpointBlock> blocks;

  const CheckpointBlock* find(std::string_view name) const {
    for (const auto& b : blocks) {
      if (b.name == name) return &b;
    }
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string origin)
      : bytes_(bytes), origin_(std::move(origin)) {}

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw DataError(origin_ + ": truncated checkpoint");
    const auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint64_t uint(int bytes) {
    const auto raw = take(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(raw[i]);
    return v;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(Checkpoint::kMagic, sizeof Checkpoint::kMagic);
  detail::put_u32(out, ckpt.version);
  const nlohmann::json meta = {{"network", ckpt.network},       {"train", ckpt.train},
                               {"alphabet", ckpt.alphabet},     {"epoch", ckpt.epoch},
                               {"adam_steps", ckpt.adam_steps}, {"best_cer", ckpt.best_cer},
                               {"metrics_digest", ckpt.metrics_digest}};
  const std::string text = meta.dump();
  detail::put_u64(out, text.size());
  out += text;
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.blocks.size()));
  for (const auto& b : ckpt.blocks) {
    if (b.values.size() != numel(b.shape)) {
      throw std::logic_error("checkpoint block " + b.name + " does not match its shape");
    }
    detail::put_u32(out, static_cast<std::uint32_t>(b.name.size()));
    out += b.name;
    detail::put_u32(out, static_cast<std::uint32_t>(b.shape.size()));
    for (std::size_t d : b.shape) detail::put_u64(out, d);
    for (float v : b.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes, const std::string& origin) {
  detail::ByteReader in(bytes, origin);
  if (in.take(8) != std::string_view(Checkpoint::kMagic, 8)) {
    throw DataError(origin + ": not a checkpoint file");
  }
  Checkpoint ckpt;
  ckpt.version = static_cast<std::uint32_t>(in.uint(4));
  if (ckpt.version != Checkpoint::kVersion) {
    throw DataError(origin + ": unsupported checkpoint version " + std::to_string(ckpt.version) +
                    " (expected " + std::to_string(Checkpoint::kVersion) + ")");
  }
  try {
    const auto meta = nlohmann::json::parse(in.take(in.uint(8)));
    ckpt.network = meta.at("network").get<NetworkConfig>();
    ckpt.train = meta.at("train").get<TrainConfig>();
    ckpt.alphabet = meta.at("alphabet").get<std::string>();
    ckpt.epoch = meta.at("epoch").get<std::size_t>();
    ckpt.adam_steps = meta.at("adam_steps").get<std::uint64_t>();
    ckpt.best_cer = meta.at("best_cer").get<double>();
    ckpt.metrics_digest = meta.at("metrics_digest").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": bad checkpoint metadata: " + e.what());
  }
  const auto count = in.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointBlock b;
    b.name = std::string(in.take(in.uint(4)));
    const auto rank = in.uint(4);
    for (std::uint64_t r = 0; r < rank; ++r) b.shape.push_back(in.uint(8));
    const std::size_t n = numel(b.shape);
    if (n > bytes.size()) throw DataError(origin + ": corrupt block " + b.name);
    b.values.resize(n);
    for (float& v : b.values) v = std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4)));
    ckpt.blocks.push_back(std::move(b));
  }
  if (!in.done()) throw DataError(origin + ": trailing bytes after the last block");
  return ckpt;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    const std::string bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str(), path.string());
}

// Snapshot of a float network; optimizer moments go in as adam.m.* / adam.v.*.
inline Checkpoint make_checkpoint(const Network<float>& net, const TrainConfig& cfg,
                                  const Adam<float>* adam = nullptr) {
  Checkpoint ckpt;
  ckpt.network = net.config();
  ckpt.train = cfg;
  ckpt.alphabet = cfg.alphabet;
  const auto add = [&](const std::string& name, const Shape& shape, std::span<const float> v) {
    ckpt.blocks.push_back({name, shape, std::vector<float>(v.begin(), v.end())});
  };
  for (const auto& p : net.parameters()) add(p.name, p.tensor.shape(), p.tensor.data());
  for (const auto& b : net.buffers()) add(b.name, b.tensor.shape(), b.tensor.data());
  if (adam) {
    ckpt.adam_steps = adam->steps();
    const auto& params = adam->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      add("adam.m." + params[i].name, params[i].tensor.shape(), adam->first_moment(i));
      add("adam.v." + params[i].name, params[i].tensor.shape(), adam->second_moment(i));
    }
  }
  return ckpt;
}

// Drops the auxiliary branch and its optimizer state.
inline void strip_shortcut(Checkpoint& ckpt) {
  std::erase_if(ckpt.blocks, [](const CheckpointBlock& b) {
    return b.name.starts_with("shortcut.") || b.name.starts_with("adam.m.shortcut.") ||
           b.name.starts_with("adam.v.shortcut.");
  });
  ckpt.network.shortcut = false;
}

namespace detail {

inline void copy_block(const Checkpoint& ckpt, const std::string& name, Tensor<float> dst) {
  const CheckpointBlock* b = ckpt.find(name);
  if (!b) throw DataError("checkpoint has no block '" + name + "'");
  if (b->shape != dst.shape()) {
    throw DataError("checkpoint block '" + name + "' has shape " + to_string(b->shape) +
                    ", network expects " + to_string(dst.shape()));
  }
  std::copy(b->values.begin(), b->values.end(), dst.data().begin());
}

}  // namespace detail

// Rebuilds the network a checkpoint describes. A checkpoint without the
// shortcut blocks yields a network without the branch.
inline Network<float> restore_network(const Checkpoint& ckpt) {
  NetworkConfig cfg = ckpt.network;
  const bool has_shortcut = ckpt.find("shortcut.weight") != nullptr;
  cfg.shortcut = cfg.shortcut && has_shortcut;
  Network<float> net(cfg, 0);
  for (const auto& p : net.parameters()) detail::copy_block(ckpt, p.name, p.tensor);
  for (const auto& b : net.buffers()) detail::copy_block(ckpt, b.name, b.tensor);
  net.eval();
  return net;
}

inline void restore_optimizer(Adam<float>& adam, const Checkpoint& ckpt) {
  const auto& params = adam.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (const char* kind : {"adam.m.", "adam.v."}) {
      const std::string name = kind + params[i].name;
      const CheckpointBlock* b = ckpt.find(name);
      if (!b) throw DataError("checkpoint has no optimizer block '" + name + "'");
      auto& dst = kind[5] == 'm' ? adam.first_moment(i) : adam.second_moment(i);
      if (b->values.size() != dst.size()) throw DataError("optimizer block '" + name + "' size");
      dst = b->values;
    }
  }
  adam.set_steps(ckpt.adam_steps);
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  EvalReport report;
  std::vector<std::string> hypotheses;
  double loss_main = 0.0;       // mean over samples whose target fits
  std::size_t loss_samples = 0;
};

// Eval-mode pass: no augmentation, no dropout, no shortcut, greedy decoding
// with margin spaces stripped. The loss uses margin-padded transcripts.
inline Evaluation evaluate_samples(Network<float>& net, std::span<const Sample> samples,
                                   const Alphabet& alphabet, const CanvasSpec& spec,
                                   Placing placing, std::size_t batch_size = 16,
                                   const ScoreOptions& scoring = {}) {
  if (alphabet.size() != net.config().n_classes) {
    throw DataError("alphabet has " + std::to_string(alphabet.size()) +
                    " classes but the network predicts " +
                    std::to_string(net.config().n_classes));
  }
  const bool was_training = net.training();
  net.eval();
  NoGradGuard no_grad;
  Evaluation out;
  std::vector<std::string> refs;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const auto chunk = samples.subspan(start, std::min(batch_size, samples.size() - start));
    const Batch<float> batch = make_batch<float>(chunk, spec, alphabet, Mode::kTrain, placing);
    const Tensor<float> logits = net.forward(batch.images).logits;
    const std::size_t steps = logits.dim(1), classes = logits.dim(2);
    std::vector<double> slice(steps * classes);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto row = logits.data().subspan(b * steps * classes, steps * classes);
      out.hypotheses.push_back(strip_margins(greedy_decode<float>(row, steps, alphabet)));
      refs.push_back(chunk[b].text);
      if (ctc_min_steps(batch.labels[b]) > steps) continue;
      std::copy(row.begin(), row.end(), slice.begin());
      loss_sum += ctc_forward_backward(slice, steps, classes, batch.labels[b]).loss;
      ++out.loss_samples;
    }
  }
  if (out.loss_samples) out.loss_main = loss_sum / static_cast<double>(out.loss_samples);
  out.report = corpus_scores(refs, out.hypotheses, scoring);
  if (was_training) net.train();
  return out;
}

inline std::vector<Sample> load_split(const fs::path& manifest, const Alphabet& alphabet,
                                      const std::string& split) {
  return load_samples(load_manifest(manifest, alphabet, split));
}

inline Evaluation evaluate(const fs::path& checkpoint, const fs::path& manifest,
                           bool strip = false, const ScoreOptions& scoring = {}) {
  Checkpoint ckpt = load_checkpoint(checkpoint);
  if (strip) strip_shortcut(ckpt);
  Network<float> net = restore_network(ckpt);
  const Alphabet alphabet = Alphabet::from_chars(ckpt.alphabet);
  const auto samples = load_split(manifest, alphabet, "eval");
  return evaluate_samples(net, samples, alphabet, ckpt.train.canvas(), ckpt.train.placing,
                          ckpt.train.batch_size, scoring);
}

inline std::string decode_image(const fs::path& checkpoint, const fs::path& image) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  Network<float> net = restore_network(ckpt);
  const Alphabet alphabet = Alphabet::from_chars(ckpt.alphabet);
  const std::vector<Sample> one{{read_image(image), " "}};
  return evaluate_samples(net, one, alphabet, ckpt.train.canvas(), ckpt.train.placing, 1)
      .hypotheses.front();
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::optional<fs::path> resume;        // checkpoint to continue from
  std::optional<std::size_t> stop_epoch;  // end this invocation early, before that epoch
  std::ostream* log = &std::clog;        // progress and warnings; null silences
};

struct TrainResult {
  fs::path out_dir;
  fs::path last_checkpoint;
  fs::path best_checkpoint;
  double best_cer = 0.0;
  std::size_t skipped_samples = 0;
  std::vector<MetricRow> rows;  // rows written by this run
};

// Indices of samples whose margin-padded target fits in `steps` frames;
// the rest are reported and counted.
inline std::vector<std::size_t> satisfiable_samples(std::span<const Sample> samples,
                                                    const Alphabet& alphabet, std::size_t steps,
                                                    std::size_t& skipped, std::ostream* log) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::vector<int> target;
    try {
      target = alphabet.encode(pad_transcript(samples[i].text, Mode::kTrain));
    } catch (const DataError& e) {
      throw DataError("training sample " + std::to_string(i) + ": " + e.what());
    }
    const std::size_t need = ctc_min_steps(target);
    if (need > steps) {
      ++skipped;
      if (log) {
        *log << "warning: skipping sample " << i << " (\"" << samples[i].text << "\"): needs "
             << need << " frames, the canvas gives " << steps << '\n';
      }
      continue;
    }
    keep.push_back(i);
  }
  return keep;
}

inline TrainResult train(const TrainConfig& cfg, const TrainOptions& opts = {}) {
  cfg.validate();
  if (cfg.train_manifest.empty()) throw ConfigError("no training manifest given");
  std::ostream* log = opts.log;
  const Alphabet alphabet = cfg.make_alphabet();
  const CanvasSpec spec = cfg.canvas();
  const NetworkConfig net_cfg = cfg.network_config();
  const std::vector<Sample> train_set = load_split(cfg.train_manifest, alphabet, "train");
  std::vector<Sample> val_set;
  if (!cfg.val_manifest.empty()) val_set = load_split(cfg.val_manifest, alphabet, "val");

  TrainResult result;
  result.out_dir = cfg.out_dir;
  result.last_checkpoint = result.out_dir / "last.ckpt";
  result.best_checkpoint = result.out_dir / "best.ckpt";
  fs::create_directories(result.out_dir);

  const std::size_t steps = spec.width / net_cfg.downscale();
  const std::vector<std::size_t> usable =
      satisfiable_samples(train_set, alphabet, steps, result.skipped_samples, log);
  if (usable.empty()) throw DataError("no training sample fits the canvas");

  Network<float> net(net_cfg, cfg.seed);
  Adam<float> adam(net.parameters());
  std::size_t first_epoch = 0;
  result.best_cer = std::numeric_limits<double>::infinity();
  if (opts.resume) {
    const Checkpoint ckpt = load_checkpoint(*opts.resume);
    if (nlohmann::json(ckpt.network) != nlohmann::json(net_cfg)) {
      throw ConfigError("checkpoint network does not match the training config");
    }
    for (const auto& p : net.parameters()) detail::copy_block(ckpt, p.name, p.tensor);
    for (const auto& b : net.buffers()) detail::copy_block(ckpt, b.name, b.tensor);
    restore_optimizer(adam, ckpt);
    first_epoch = ckpt.epoch + 1;
    result.best_cer = ckpt.best_cer;
  }
  MetricLog metrics(result.out_dir / "metrics.csv", opts.resume.has_value());

  const auto started = std::chrono::steady_clock::now();
  const auto wall = [&] {
    if (!cfg.log_wall_time) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };

  std::vector<Sample> batch_samples;
  std::vector<float> fills;
  const std::size_t end_epoch = std::min(cfg.total_epochs, opts.stop_epoch.value_or(cfg.total_epochs));
  for (std::size_t epoch = first_epoch; epoch < end_epoch; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    std::vector<std::size_t> order = usable;
    std::mt19937_64 shuffle_rng(detail::mix_seed({cfg.seed, epoch, 1}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    net.train();
    net.reseed_dropout(detail::mix_seed({cfg.seed, epoch, 2}));

    double main_sum = 0.0, shortcut_sum = 0.0;
    bool has_shortcut = false;
    std::vector<std::string> refs, hyps;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      batch_samples.clear();
      fills.clear();
      for (std::size_t i = 0; i < n; ++i) {
        const Sample& s = train_set[order[start + i]];
        const std::uint64_t aug_seed = detail::mix_seed({cfg.seed, epoch, 3, order[start + i]});
        batch_samples.push_back({augment(s.image, cfg.augment, aug_seed), s.text});
        fills.push_back(median(s.image));
      }
      const Batch<float> batch =
          make_batch<float>(batch_samples, spec, alphabet, Mode::kTrain, cfg.placing, fills);
      const auto out = net.forward(batch.images);
      const Tensor<float> main = ctc_loss(out.logits, batch.labels);
      Tensor<float> shortcut;
      if (out.shortcut_logits.defined()) shortcut = ctc_loss(out.shortcut_logits, batch.labels);
      const Tensor<float> total = multitask_loss(main, shortcut, cfg.shortcut_weight);
      if (!std::isfinite(total.item())) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(start / cfg.batch_size));
      }
      net.zero_grad();
      total.backward();
      if (cfg.grad_clip > 0.0) clip_grad_norm(net.parameters(), cfg.grad_clip);
      adam.step(lr);

      main_sum += static_cast<double>(main.item()) * static_cast<double>(n);
      if (shortcut.defined()) {
        has_shortcut = true;
        shortcut_sum += static_cast<double>(shortcut.item()) * static_cast<double>(n);
      }
      const std::size_t t = out.logits.dim(1), c = out.logits.dim(2);
      for (std::size_t b = 0; b < n; ++b) {
        hyps.push_back(strip_margins(
            greedy_decode<float>(out.logits.data().subspan(b * t * c, t * c), t, alphabet)));
        refs.push_back(batch.transcripts[b]);
      }
    }

    const double count = static_cast<double>(order.size());
    const EvalReport running = corpus_scores(refs, hyps);
    MetricRow row{epoch, "train", main_sum / count, std::nullopt, running.cer, running.wer, lr,
                  wall()};
    if (has_shortcut) row.loss_shortcut = shortcut_sum / count;
    metrics.append(row);
    result.rows.push_back(row);
    double selection_cer = running.cer;
    if (!val_set.empty()) {
      const Evaluation val =
          evaluate_samples(net, val_set, alphabet, spec, cfg.placing, cfg.batch_size);
      MetricRow vrow{epoch, "val", val.loss_main, std::nullopt, val.report.cer, val.report.wer,
                     lr, wall()};
      metrics.append(vrow);
      result.rows.push_back(vrow);
      selection_cer = val.report.cer;
    }
    if (log) {
      *log << "epoch " << epoch + 1 << '/' << cfg.total_epochs << " lr "
           << detail::shortest(lr) << " loss " << detail::fixed(row.loss_main, 4);
      if (row.loss_shortcut) *log << " shortcut " << detail::fixed(*row.loss_shortcut, 4);
      *log << " train cer " << detail::fixed(row.cer, 2);
      if (!val_set.empty()) *log << " val cer " << detail::fixed(selection_cer, 2);
      *log << '\n';
    }

    const bool improved = selection_cer < result.best_cer;
    if (improved) result.best_cer = selection_cer;
    Checkpoint ckpt = make_checkpoint(net, cfg, &adam);
    ckpt.epoch = epoch;
    ckpt.best_cer = result.best_cer;
    ckpt.metrics_digest = metrics.digest();
    if (improved) save_checkpoint(result.best_checkpoint, ckpt);
    save_checkpoint(result.last_checkpoint, ckpt);
  }
  if (log && result.skipped_samples) {
    *log << "warning: " << result.skipped_samples << " training samples skipped\n";
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationCell {
  Placing placing = Placing::kPad;
  FlattenMode flatten = FlattenMode::kMaxPool;
  bool shortcut = true;

  std::string name() const {
    return std::string(placing == Placing::kPad ? "padded" : "resized") + '-' +
           (flatten == FlattenMode::kMaxPool ? "maxpool" : "concat") + '-' +
           (shortcut ? "shortcut" : "plain");
  }
};

struct AblationRow {
  AblationCell cell;
  EvalReport train;
  std::optional<EvalReport> val;
};

// Row order of the published table: resized before padded, concatenation
// before max-pooling, shortcut off before on.
inline std::vector<AblationCell> ablation_grid() {
  std::vector<AblationCell> cells;
  for (Placing p : {Placing::kResize, Placing::kPad})
    for (FlattenMode f : {FlattenMode::kConcat, FlattenMode::kMaxPool})
      for (bool s : {false, true}) cells.push_back({p, f, s});
  return cells;
}

inline constexpr const char* kAblationHeader =
    "preprocessing,flattening,ctc_shortcut,train_cer,train_wer,val_cer,val_wer";

inline std::string format_ablation_row(const AblationRow& r) {
  std::string line = std::string(r.cell.placing == Placing::kPad ? "padded" : "resized") + ',' +
                     (r.cell.flatten == FlattenMode::kMaxPool ? "max-pooling" : "concatenation") +
                     ',' + (r.cell.shortcut ? "yes" : "no") + ',' +
                     detail::fixed(r.train.cer, 2) + ',' + detail::fixed(r.train.wer, 2) + ',';
  if (r.val) line += detail::fixed(r.val->cer, 2) + ',' + detail::fixed(r.val->wer, 2);
  else line += ',';
  return line;
}

// Trains every cell from the same seed under `base`/<cell name>/ and scores
// each cell's selected checkpoint. Writes `base.out_dir`/ablation.csv.
inline std::vector<AblationRow> ablate(const TrainConfig& base, const TrainOptions& opts = {}) {
  base.validate();
  const double lambda = base.shortcut_weight > 0.0 ? base.shortcut_weight : 0.1;
  const fs::path root = base.out_dir;
  fs::create_directories(root);
  std::vector<AblationRow> rows;
  for (const AblationCell& cell : ablation_grid()) {
    TrainConfig cfg = base;
    cfg.placing = cell.placing;
    cfg.flatten = cell.flatten;
    cfg.shortcut_weight = cell.shortcut ? lambda : 0.0;
    cfg.out_dir = (root / cell.name()).string();
    if (opts.log) *opts.log << "== " << cell.name() << '\n';
    const TrainResult trained = train(cfg, {std::nullopt, std::nullopt, opts.log});
    AblationRow row{cell, evaluate(trained.best_checkpoint, cfg.train_manifest).report, {}};
    if (!cfg.val_manifest.empty()) {
      row.val = evaluate(trained.best_checkpoint, cfg.val_manifest).report;
    }
    rows.push_back(std::move(row));
  }
  std::ofstream out(root / "ablation.csv");
  if (!out) throw DataError("cannot write " + (root / "ablation.csv").string());
  out << kAblationHeader << '\n';
  for (const auto& r : rows) out << format_ablation_row(r) << '\n';
  return rows;
}

}  // namespace htr

#endif  // HTR_TRAINER_HPP_
