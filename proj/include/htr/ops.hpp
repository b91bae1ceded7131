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

// Differentiable operations used by the recognizer.
//
// Layouts are row-major: images B x C x H x W, channel sequences B x C x L,
// feature sequences B x T x D. Every operation validates shapes eagerly and
// throws ShapeError with both offending shapes in the message.

#ifndef HTR_OPS_HPP_
#define HTR_OPS_HPP_

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "htr/common.hpp"
#include "htr/tensor.hpp"

namespace htr {
namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m x n] (+)= op(A) * op(B) on row-major buffers, op being an optional
// transpose. A is m x k (k x m when transposed), B is k x n (n x k).
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  using ConstMap = Eigen::Map<const RowMatrix<T>>;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  ConstMap A(a, ei(trans_a ? k : m), ei(trans_a ? m : k));
  ConstMap B(b, ei(trans_b ? n : k), ei(trans_b ? k : n));
  Eigen::Map<RowMatrix<T>> C(c, ei(m), ei(n));
  if (!accumulate) C.setZero();
  if (trans_a && trans_b) {
    C.noalias() += A.transpose() * B.transpose();
  } else if (trans_a) {
    C.noalias() += A.transpose() * B;
  } else if (trans_b) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A * B;
  }
}

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      to_string(a.shape()) + " vs " +
                                      to_string(b.shape()));
}

// Unfolds one B-slice of a C x H x W image into (C*kh*kw) x (Ho*Wo) columns.
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad_h,
            std::size_t pad_w, std::size_t out_h, std::size_t out_w, T* cols) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                          static_cast<std::ptrdiff_t>(pad_h);
          T* dst = row + oy * out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = img + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad_w);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width))
                          ? T(0)
                          : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad_h,
            std::size_t pad_w, std::size_t out_h, std::size_t out_w, T* img) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                          static_cast<std::ptrdiff_t>(pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          T* dst = img + (c * height + static_cast<std::size_t>(iy)) * width;
          const T* src = row + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad_w);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "add", {a, b}, [](auto& self) {
    for (auto& parent : self.parents) {
      accumulate_grad(*parent, [&](T* g) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      });
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "mul", {a, b}, [](auto& self) {
    auto& lhs = *self.parents[0];
    auto& rhs = *self.parents[1];
    accumulate_grad(lhs, [&](T* g) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * rhs.data[i];
    });
    accumulate_grad(rhs, [&](T* g) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * lhs.data[i];
    });
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v *= factor;
  return Tensor<T>::from_op(a.shape(), std::move(out), "scale", {a},
                            [factor](auto& self) {
                              accumulate_grad(*self.parents[0], [&](T* g) {
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  g[i] += factor * self.grad[i];
                              });
                            });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return Tensor<T>::from_op(Shape{1}, {total}, "sum", {a}, [](auto& self) {
    accumulate_grad(*self.parents[0], [&](T* g) {
      const std::size_t n = self.parents[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    });
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], T(0));
  return Tensor<T>::from_op(a.shape(), std::move(out), "relu", {a}, [](auto& self) {
    accumulate_grad(*self.parents[0], [&](T* g) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (self.data[i] > T(0)) g[i] += self.grad[i];
    });
  });
}

// Inverted dropout: kept activations are scaled by 1/(1-p) during training so
// that evaluation is the identity.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& a, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
  if (!training || p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  const T inv_keep = T(1.0 / (1.0 - p));
  std::vector<T> mask(a.numel());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = keep(rng) ? inv_keep : T(0);
    out[i] = a.data()[i] * mask[i];
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), "dropout", {a},
                            [mask = std::move(mask)](auto& self) {
                              accumulate_grad(*self.parents[0], [&](T* g) {
                                for (std::size_t i = 0; i < mask.size(); ++i)
                                  g[i] += self.grad[i] * mask[i];
                              });
                            });
}

// Log-softmax over the last axis, stabilized by subtracting the row maximum.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  std::vector<T> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * n;
    T* y = out.data() + r * n;
    const T mx = *std::max_element(x, x + n);
    T acc = T(0);
    for (std::size_t k = 0; k < n; ++k) acc += std::exp(x[k] - mx);
    const T lse = mx + std::log(acc);
    for (std::size_t k = 0; k < n; ++k) y[k] = x[k] - lse;
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), "log_softmax", {a},
                            [n, rows](auto& self) {
                              accumulate_grad(*self.parents[0], [&](T* g) {
                                for (std::size_t r = 0; r < rows; ++r) {
                                  const T* dy = self.grad.data() + r * n;
                                  const T* y = self.data.data() + r * n;
                                  T total = T(0);
                                  for (std::size_t k = 0; k < n; ++k) total += dy[k];
                                  for (std::size_t k = 0; k < n; ++k)
                                    g[r * n + k] += dy[k] - std::exp(y[k]) * total;
                                }
                              });
                            });
}

// y[..., out] = x[..., in] * W^T + b with W stored out x in.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require(weight.rank() == 2, "linear: weight must be out x in, got " +
                                          to_string(weight.shape()));
  const std::size_t out_features = weight.dim(0);
  const std::size_t in_features = weight.dim(1);
  detail::require(x.shape().back() == in_features,
                  "linear: input " + to_string(x.shape()) + " does not match weight " +
                      to_string(weight.shape()));
  detail::require(bias.shape() == Shape{out_features},
                  "linear: bias " + to_string(bias.shape()) + " for " +
                      std::to_string(out_features) + " outputs");
  const std::size_t rows = x.numel() / in_features;
  std::vector<T> out(rows * out_features);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * out_features);
  detail::gemm(false, true, rows, out_features, in_features, x.data().data(),
               weight.data().data(), out.data(), true);
  Shape shape = x.shape();
  shape.back() = out_features;
  return Tensor<T>::from_op(
      std::move(shape), std::move(out), "linear", {x, weight, bias},
      [rows, in_features, out_features](auto& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        auto& bn = *self.parents[2];
        const T* dy = self.grad.data();
        accumulate_grad(xn, [&](T* g) {
          detail::gemm(false, false, rows, in_features, out_features, dy, wn.data.data(), g, true);
        });
        accumulate_grad(wn, [&](T* g) {
          detail::gemm(true, false, out_features, in_features, rows, dy, xn.data.data(), g, true);
        });
        accumulate_grad(bn, [&](T* g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_features; ++o) g[o] += dy[r * out_features + o];
        });
      });
}

// Concatenates two tensors along their last axis.
template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == b.rank() &&
                      std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin()),
                  "concat_last: incompatible " + to_string(a.shape()) + " and " +
                      to_string(b.shape()));
  const std::size_t na = a.shape().back();
  const std::size_t nb = b.shape().back();
  const std::size_t rows = a.numel() / na;
  std::vector<T> out(rows * (na + nb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * na, na, out.data() + r * (na + nb));
    std::copy_n(b.data().data() + r * nb, nb, out.data() + r * (na + nb) + na);
  }
  Shape shape = a.shape();
  shape.back() = na + nb;
  return Tensor<T>::from_op(std::move(shape), std::move(out), "concat_last", {a, b},
                            [rows, na, nb](auto& self) {
                              accumulate_grad(*self.parents[0], [&](T* g) {
                                for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t k = 0; k < na; ++k)
                                    g[r * na + k] += self.grad[r * (na + nb) + k];
                              });
                              accumulate_grad(*self.parents[1], [&](T* g) {
                                for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t k = 0; k < nb; ++k)
                                    g[r * nb + k] += self.grad[r * (na + nb) + na + k];
                              });
                            });
}

// 2D cross-correlation. Kernel extents must be odd.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  detail::require(input.rank() == 4, "conv2d: input must be BxCxHxW, got " +
                                         to_string(input.shape()));
  detail::require(weight.rank() == 4, "conv2d: weight must be KxCxkhxkw, got " +
                                          to_string(weight.shape()));
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t height = input.dim(2), width = input.dim(3);
  const std::size_t filters = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  detail::require(weight.dim(1) == channels,
                  "conv2d: weight " + to_string(weight.shape()) +
                      " does not match input channels of " + to_string(input.shape()));
  detail::require(kh % 2 == 1 && kw % 2 == 1,
                  "conv2d: kernel extents must be odd, got " + to_string(weight.shape()));
  detail::require(bias.shape() == Shape{filters},
                  "conv2d: bias " + to_string(bias.shape()) + " for " +
                      std::to_string(filters) + " filters");
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  detail::require(height + 2 * padding >= kh && width + 2 * padding >= kw &&
                      (height + 2 * padding - kh) % stride == 0 &&
                      (width + 2 * padding - kw) % stride == 0,
                  "conv2d: input " + to_string(input.shape()) + " with kernel " +
                      to_string(weight.shape()) + ", stride " + std::to_string(stride) +
                      ", padding " + std::to_string(padding) +
                      " gives a non-integral output extent");
  const std::size_t out_h = (height + 2 * padding - kh) / stride + 1;
  const std::size_t out_w = (width + 2 * padding - kw) / stride + 1;
  const std::size_t patch = channels * kh * kw;
  const std::size_t plane = out_h * out_w;
  const std::size_t in_plane = channels * height * width;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  std::vector<T> out(batch * filters * plane);
  std::vector<T> cols(pointwise ? 0 : patch * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* img = input.data().data() + b * in_plane;
    const T* col = img;
    if (!pointwise) {
      detail::im2col(img, channels, height, width, kh, kw, stride, padding, padding, out_h, out_w,
                     cols.data());
      col = cols.data();
    }
    T* dst = out.data() + b * filters * plane;
    for (std::size_t k = 0; k < filters; ++k)
      std::fill_n(dst + k * plane, plane, bias.data()[k]);
    detail::gemm(false, false, filters, plane, patch, weight.data().data(), col, dst, true);
  }
  return Tensor<T>::from_op(
      Shape{batch, filters, out_h, out_w}, std::move(out), "conv2d", {input, weight, bias},
      [=](auto& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        auto& bn = *self.parents[2];
        std::vector<T> scratch(pointwise ? 0 : patch * plane);
        std::vector<T> dcols(pointwise ? 0 : patch * plane);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* dy = self.grad.data() + b * filters * plane;
          const T* img = xn.data.data() + b * in_plane;
          if (wn.requires_grad) {
            const T* col = img;
            if (!pointwise) {
              detail::im2col(img, channels, height, width, kh, kw, stride, padding, padding, out_h,
                             out_w, scratch.data());
              col = scratch.data();
            }
            detail::gemm(false, true, filters, patch, plane, dy, col, wn.grad_buffer(), true);
          }
          if (xn.requires_grad) {
            T* dx = xn.grad_buffer() + b * in_plane;
            if (pointwise) {
              detail::gemm(true, false, patch, plane, filters, wn.data.data(), dy, dx, true);
            } else {
              detail::gemm(true, false, patch, plane, filters, wn.data.data(), dy,
                           dcols.data(), false);
              detail::col2im(dcols.data(), channels, height, width, kh, kw, stride, padding,
                             padding, out_h, out_w, dx);
            }
          }
          accumulate_grad(bn, [&](T* g) {
            for (std::size_t k = 0; k < filters; ++k) {
              T acc = T(0);
              for (std::size_t i = 0; i < plane; ++i) acc += dy[k * plane + i];
              g[k] += acc;
            }
          });
        }
      });
}

// Non-overlapping max-pooling; the gradient goes to the first maximum met in
// row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t size = 2, std::size_t stride = 2) {
  detail::require(input.rank() == 4, "maxpool2d: input must be BxCxHxW, got " +
                                         to_string(input.shape()));
  detail::require(size == stride && size >= 1,
                  "maxpool2d: only non-overlapping windows (size == stride) are supported");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t height = input.dim(2), width = input.dim(3);
  detail::require(height % size == 0 && width % size == 0,
                  "maxpool2d: spatial extents of " + to_string(input.shape()) +
                      " must be divisible by " + std::to_string(size) +
                      "; choose a canvas whose height and width are multiples of 8");
  const std::size_t out_h = height / size, out_w = width / size;
  std::vector<T> out(planes * out_h * out_w);
  std::vector<std::size_t> argmax(out.size());
  const T* x = input.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        std::size_t best = (p * height + oy * size) * width + ox * size;
        for (std::size_t i = 0; i < size; ++i) {
          for (std::size_t j = 0; j < size; ++j) {
            const std::size_t idx = (p * height + oy * size + i) * width + ox * size + j;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (p * out_h + oy) * out_w + ox;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  return Tensor<T>::from_op(
      Shape{input.dim(0), input.dim(1), out_h, out_w}, std::move(out), "maxpool2d", {input},
      [argmax = std::move(argmax)](auto& self) {
        accumulate_grad(*self.parents[0], [&](T* g) {
          for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
        });
      });
}

// Length-preserving 1D convolution over B x C x L with a width-3 kernel and
// one step of zero padding on each side.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require(input.rank() == 3, "conv1d: input must be BxCxL, got " +
                                         to_string(input.shape()));
  detail::require(weight.rank() == 3 && weight.dim(2) == 3,
                  "conv1d: kernel must be KxCx3, got " + to_string(weight.shape()));
  detail::require(weight.dim(1) == input.dim(1),
                  "conv1d: weight " + to_string(weight.shape()) +
                      " does not match input " + to_string(input.shape()));
  detail::require(bias.shape() == Shape{weight.dim(0)},
                  "conv1d: bias " + to_string(bias.shape()) + " for weight " +
                      to_string(weight.shape()));
  const std::size_t batch = input.dim(0), channels = input.dim(1), length = input.dim(2);
  const std::size_t filters = weight.dim(0);
  const std::size_t patch = channels * 3;
  std::vector<T> out(batch * filters * length);
  std::vector<T> cols(patch * length);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* seq = input.data().data() + b * channels * length;
    detail::im2col(seq, channels, 1, length, 1, 3, 1, 0, 1, 1, length, cols.data());
    T* dst = out.data() + b * filters * length;
    for (std::size_t k = 0; k < filters; ++k)
      std::fill_n(dst + k * length, length, bias.data()[k]);
    detail::gemm(false, false, filters, length, patch, weight.data().data(), cols.data(),
                 dst, true);
  }
  return Tensor<T>::from_op(
      Shape{batch, filters, length}, std::move(out), "conv1d", {input, weight, bias},
      [=](auto& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        auto& bn = *self.parents[2];
        std::vector<T> scratch(patch * length);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* dy = self.grad.data() + b * filters * length;
          const T* seq = xn.data.data() + b * channels * length;
          if (wn.requires_grad) {
            detail::im2col(seq, channels, 1, length, 1, 3, 1, 0, 1, 1, length, scratch.data());
            detail::gemm(false, true, filters, patch, length, dy, scratch.data(),
                         wn.grad_buffer(), true);
          }
          if (xn.requires_grad) {
            detail::gemm(true, false, patch, length, filters, wn.data.data(), dy,
                         scratch.data(), false);
            detail::col2im(scratch.data(), channels, 1, length, 1, 3, 1, 0, 1, 1, length,
                           xn.grad_buffer() + b * channels * length);
          }
          accumulate_grad(bn, [&](T* g) {
            for (std::size_t k = 0; k < filters; ++k)
              for (std::size_t l = 0; l < length; ++l) g[k] += dy[k * length + l];
          });
        }
      });
}

// Same values under a new shape of equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(numel(shape) == a.numel(), "reshape: cannot view " + to_string(a.shape()) +
                                                 " as " + to_string(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return Tensor<T>::from_op(std::move(shape), std::move(out), "reshape", {a}, [](auto& self) {
    accumulate_grad(*self.parents[0], [&](T* g) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
  });
}

// Swaps the last two axes of a rank-3 tensor: B x M x N -> B x N x M.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  detail::require(a.rank() == 3, "transpose_last2: rank-3 input required, got " +
                                     to_string(a.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), n = a.dim(2);
  std::vector<T> out(a.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[(b * n + j) * m + i] = a.data()[(b * m + i) * n + j];
  return Tensor<T>::from_op(Shape{batch, n, m}, std::move(out), "transpose_last2", {a},
                            [=](auto& self) {
                              accumulate_grad(*self.parents[0], [&](T* g) {
                                for (std::size_t b = 0; b < batch; ++b)
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < n; ++j)
                                      g[(b * m + i) * n + j] += self.grad[(b * n + j) * m + i];
                              });
                            });
}

// Running statistics of a batch-norm layer. They are buffers, not
// parameters: they never take gradients but are persisted with checkpoints.
template <typename T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels)
      : mean(Shape{channels}, T(0)), var(Shape{channels}, T(1)) {}
};

// Per-channel normalization over the batch axis and every axis after the
// channel axis. Training mode uses batch statistics (biased variance) and
// folds them into the running estimates (unbiased variance); evaluation uses
// the running estimates, which start at mean 0 and variance 1.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, bool training) {
  detail::require(input.rank() >= 2, "batchnorm: input needs a channel axis, got " +
                                         to_string(input.shape()));
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t inner = input.numel() / (batch * channels);
  detail::require(gamma.shape() == Shape{channels} && beta.shape() == Shape{channels},
                  "batchnorm: affine parameters must have shape [" +
                      std::to_string(channels) + "]");
  detail::require(stats.mean.defined() && stats.mean.shape() == Shape{channels},
                  "batchnorm: running statistics do not match " +
                      to_string(input.shape()));
  const std::size_t count = batch * inner;
  if (training && count < 2) {
    throw ShapeError("batchnorm: training needs more than one value per channel, got " +
                     to_string(input.shape()));
  }
  const T* x = input.data().data();
  std::vector<T> xhat(input.numel());
  std::vector<T> inv_std(channels);
  std::vector<T> out(input.numel());
  for (std::size_t c = 0; c < channels; ++c) {
    T mu, var;
    if (training) {
      // Accumulate in double so float batches are not order sensitive.
      double s = 0.0, ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* row = x + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += row[i];
      }
      const double m = s / static_cast<double>(count);
      for (std::size_t b = 0; b < batch; ++b) {
        const T* row = x + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) ss += (row[i] - m) * (row[i] - m);
      }
      const double v = ss / static_cast<double>(count);
      mu = static_cast<T>(m);
      var = static_cast<T>(v);
      const double unbiased = ss / static_cast<double>(count - 1);
      T& rm = stats.mean.data()[c];
      T& rv = stats.var.data()[c];
      rm = static_cast<T>((1.0 - stats.momentum) * rm + stats.momentum * m);
      rv = static_cast<T>((1.0 - stats.momentum) * rv + stats.momentum * unbiased);
    } else {
      mu = stats.mean.data()[c];
      var = stats.var.data()[c];
    }
    inv_std[c] = T(1) / std::sqrt(var + static_cast<T>(stats.eps));
    const T g = gamma.data()[c], be = beta.data()[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        xhat[base + i] = (x[base + i] - mu) * inv_std[c];
        out[base + i] = g * xhat[base + i] + be;
      }
    }
  }
  return Tensor<T>::from_op(
      input.shape(), std::move(out), "batchnorm", {input, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](auto& self) {
        auto& xn = *self.parents[0];
        auto& gn = *self.parents[1];
        auto& bn = *self.parents[2];
        const T* dy = self.grad.data();
        for (std::size_t c = 0; c < channels; ++c) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              sum_dy += dy[base + i];
              sum_dy_xhat += dy[base + i] * xhat[base + i];
            }
          }
          accumulate_grad(gn, [&](T* g) { g[c] += sum_dy_xhat; });
          accumulate_grad(bn, [&](T* g) { g[c] += sum_dy; });
          const T scale_c = gn.data[c] * inv_std[c];
          accumulate_grad(xn, [&](T* g) {
            const T n = static_cast<T>(count);
            for (std::size_t b = 0; b < batch; ++b) {
              const std::size_t base = (b * channels + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) {
                if (training) {
                  g[base + i] += scale_c / n *
                                 (n * dy[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat);
                } else {
                  g[base + i] += scale_c * dy[base + i];
                }
              }
            }
          });
        }
      });
}

}  // namespace htr

#endif  // HTR_OPS_HPP_
