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

// Image and transcript preparation: fixed-canvas placement with median
// padding, train-time augmentation, margin spaces, and batch collation.

#ifndef HTR_PREPROCESSING_HPP_
#define HTR_PREPROCESSING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "htr/alphabet.hpp"
#include "htr/common.hpp"
#include "htr/tensor.hpp"

namespace htr {

// Grayscale image, intensities in [0, 1], row-major. Ink is high.
struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  RawImage() = default;
  RawImage(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), pixels(h * w, fill) {}
  RawImage(std::size_t h, std::size_t w, std::vector<float> values)
      : height(h), width(w), pixels(std::move(values)) {
    validate();
  }

  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }

  void validate() const {
    if (height == 0 || width == 0) throw DataError("image must have a positive size");
    if (pixels.size() != height * width) {
      throw DataError("image buffer has " + std::to_string(pixels.size()) +
                      " pixels, expected " + std::to_string(height * width));
    }
    for (float v : pixels) {
      if (!(v >= 0.0f && v <= 1.0f)) throw DataError("image intensity outside [0, 1]");
    }
  }

  bool operator==(const RawImage&) const = default;
};

struct CanvasSpec {
  std::size_t height = 64;
  std::size_t width = 256;

  static CanvasSpec line() { return {128, 1024}; }
  static CanvasSpec word() { return {64, 256}; }
  static CanvasSpec tiny() { return {32, 256}; }

  // The backbone downsamples by 8 in both directions.
  void validate() const {
    if (height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0) {
      throw ConfigError("canvas " + std::to_string(height) + "x" + std::to_string(width) +
                        " must have both extents >= 8 and divisible by 8");
    }
  }

  bool operator==(const CanvasSpec&) const = default;
};

// Where the source content sits inside the canvas.
struct Placement {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool rescaled = false;
};

struct FittedImage {
  RawImage canvas;
  Placement placement;
};

// Median intensity; the mean of the two middle values for even counts.
inline float median(const RawImage& img) {
  std::vector<float> v = img.pixels;
  if (v.empty()) throw DataError("median of an empty image");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const float upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const float lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5f * (lower + upper);
}

// Bilinear resampling with pixel-center alignment.
inline RawImage resize_bilinear(const RawImage& img, std::size_t height, std::size_t width) {
  RawImage out(height, width);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = img.at(y0, x0) * (1.0 - wx) + img.at(y0, x1) * wx;
      const double bottom = img.at(y1, x0) * (1.0 - wx) + img.at(y1, x1) * wx;
      out.at(y, x) = static_cast<float>(std::clamp(top * (1.0 - wy) + bottom * wy, 0.0, 1.0));
    }
  }
  return out;
}

// Centers the image on the canvas without scaling when it fits, otherwise
// scales it down by min(H/h, W/w) first. Everything outside the content is
// filled with `fill`, which defaults to the median of `img`.
inline FittedImage fit_to_canvas(const RawImage& img, const CanvasSpec& spec,
                                 std::optional<float> fill = std::nullopt) {
  spec.validate();
  const float pad = fill.value_or(median(img));
  const RawImage* content = &img;
  RawImage scaled;
  Placement place;
  if (img.height > spec.height || img.width > spec.width) {
    const double s = std::min(static_cast<double>(spec.height) / static_cast<double>(img.height),
                              static_cast<double>(spec.width) / static_cast<double>(img.width));
    const auto extent = [s](std::size_t v, std::size_t limit) {
      const auto r = static_cast<std::size_t>(std::lround(static_cast<double>(v) * s));
      return std::clamp<std::size_t>(r, 1, limit);
    };
    scaled = resize_bilinear(img, extent(img.height, spec.height), extent(img.width, spec.width));
    content = &scaled;
    place.rescaled = true;
  }
  place.height = content->height;
  place.width = content->width;
  place.top = (spec.height - content->height) / 2;
  place.left = (spec.width - content->width) / 2;
  FittedImage out{RawImage(spec.height, spec.width, pad), place};
  for (std::size_t y = 0; y < content->height; ++y) {
    std::copy_n(content->pixels.begin() + static_cast<std::ptrdiff_t>(y * content->width),
                content->width,
                out.canvas.pixels.begin() +
                    static_cast<std::ptrdiff_t>((place.top + y) * spec.width + place.left));
  }
  return out;
}

// Anisotropic stretch to the whole canvas, ignoring aspect ratio.
inline RawImage stretch_to_canvas(const RawImage& img, const CanvasSpec& spec) {
  spec.validate();
  if (img.height == spec.height && img.width == spec.width) return img;
  return resize_bilinear(img, spec.height, spec.width);
}

struct AugmentParams {
  double max_rotation_deg = 1.5;
  double max_shear = 0.1;
  double noise_sigma = 0.1;
  bool enabled = true;

  void validate() const {
    if (max_rotation_deg < 0 || max_shear < 0 || noise_sigma < 0) {
      throw ConfigError("augmentation parameters must be nonnegative");
    }
  }
};

// One global rotation+shear about the image center with median fill for
// uncovered pixels, then additive Gaussian noise, clamped to [0, 1].
inline RawImage augment(const RawImage& img, const AugmentParams& params, std::uint64_t seed) {
  params.validate();
  if (!params.enabled) return img;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double angle = unit(rng) * params.max_rotation_deg * std::numbers::pi / 180.0;
  const double shear = unit(rng) * params.max_shear;

  RawImage out = img;
  if (angle != 0.0 || shear != 0.0) {
    const float fill = median(img);
    // Forward map v' = R * S * v with S = [[1, shear], [0, 1]]; sample the
    // source at S^-1 * R^-1 * v'.
    const double c = std::cos(angle), s = std::sin(angle);
    const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
    const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double rx = c * dx + s * dy;
        const double ry = -s * dx + c * dy;
        const double sx = rx - shear * ry + cx;
        const double sy = ry + cy;
        if (sx < 0.0 || sy < 0.0 || sx > static_cast<double>(img.width - 1) ||
            sy > static_cast<double>(img.height - 1)) {
          out.at(y, x) = fill;
          continue;
        }
        const auto x0 = static_cast<std::size_t>(sx);
        const auto y0 = static_cast<std::size_t>(sy);
        const std::size_t x1 = std::min(x0 + 1, img.width - 1);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const double wx = sx - static_cast<double>(x0), wy = sy - static_cast<double>(y0);
        const double v = (img.at(y0, x0) * (1 - wx) + img.at(y0, x1) * wx) * (1 - wy) +
                         (img.at(y1, x0) * (1 - wx) + img.at(y1, x1) * wx) * wy;
        out.at(y, x) = static_cast<float>(v);
      }
    }
  }
  if (params.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, params.noise_sigma);
    for (float& v : out.pixels) v = static_cast<float>(v + noise(rng));
  }
  for (float& v : out.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

enum class Mode { kTrain, kEval };

// Training transcripts get one space on each side to match the empty margins
// of padded images.
inline std::string pad_transcript(const std::string& text, Mode mode) {
  return mode == Mode::kTrain ? " " + text + " " : text;
}

// Drops leading and trailing spaces from a decoded string.
inline std::string strip_margins(const std::string& text) {
  const auto first = text.find_first_not_of(' ');
  if (first == std::string::npos) return {};
  const auto last = text.find_last_not_of(' ');
  return text.substr(first, last - first + 1);
}

// How images reach the canvas: aspect-preserving padding or plain resizing.
enum class Placing { kPad, kResize };

struct Sample {
  RawImage image;
  std::string text;
};

template <typename T>
struct Batch {
  Tensor<T> images;                     // B x 1 x H x W
  std::vector<std::vector<int>> labels;  // encoded, after pad_transcript
  std::vector<std::string> transcripts;  // as given
};

inline RawImage place_on_canvas(const RawImage& img, const CanvasSpec& spec, Placing placing,
                                std::optional<float> fill = std::nullopt) {
  return placing == Placing::kPad ? fit_to_canvas(img, spec, fill).canvas
                                  : stretch_to_canvas(img, spec);
}

// Stacks samples, in order, into a B x 1 x H x W tensor and encodes their
// transcripts. `fills` optionally overrides the pad value per sample.
template <typename T>
Batch<T> make_batch(std::span<const Sample> samples, const CanvasSpec& spec,
                    const Alphabet& alphabet, Mode mode, Placing placing = Placing::kPad,
                    std::span<const float> fills = {}) {
  if (samples.empty()) throw DataError("cannot build an empty batch");
  spec.validate();
  const std::size_t plane = spec.height * spec.width;
  std::vector<T> pixels(samples.size() * plane);
  Batch<T> batch;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::optional<float> fill;
    if (!fills.empty()) fill = fills[i];
    const RawImage canvas = place_on_canvas(samples[i].image, spec, placing, fill);
    std::copy(canvas.pixels.begin(), canvas.pixels.end(),
              pixels.begin() + static_cast<std::ptrdiff_t>(i * plane));
    try {
      batch.labels.push_back(alphabet.encode(pad_transcript(samples[i].text, mode)));
    } catch (const DataError& e) {
      throw DataError("sample " + std::to_string(i) + " (\"" + samples[i].text +
                      "\"): " + e.what());
    }
    batch.transcripts.push_back(samples[i].text);
  }
  batch.images = Tensor<T>(Shape{samples.size(), 1, spec.height, spec.width}, std::move(pixels));
  return batch;
}

}  // namespace htr

#endif  // HTR_PREPROCESSING_HPP_
