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

#ifndef HTR_LSTM_HPP_
#define HTR_LSTM_HPP_

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "htr/ops.hpp"
#include "htr/tensor.hpp"

namespace htr {

// Weights of one LSTM direction. Gate blocks are stacked in the order
// input, forget, cell, output along the first axis of every tensor.
template <typename T>
struct LstmWeights {
  Tensor<T> input_weight;      // 4H x D
  Tensor<T> recurrent_weight;  // 4H x H
  Tensor<T> bias;              // 4H

  std::size_t hidden() const { return recurrent_weight.dim(1); }

  // Uniform in +-1/sqrt(H); the forget-gate bias starts at 1.
  template <typename Rng>
  static LstmWeights init(std::size_t input_size, std::size_t hidden, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto draw = [&](Shape shape) {
      std::vector<T> v(numel(shape));
      for (T& x : v) x = static_cast<T>(dist(rng));
      return Tensor<T>(std::move(shape), std::move(v), true);
    };
    LstmWeights w{draw({4 * hidden, input_size}), draw({4 * hidden, hidden}),
                  Tensor<T>(Shape{4 * hidden}, T(0), true)};
    for (std::size_t j = hidden; j < 2 * hidden; ++j) w.bias.data()[j] = T(1);
    return w;
  }
};

template <typename T>
struct BiLstmWeights {
  LstmWeights<T> forward;
  LstmWeights<T> backward;
};

namespace detail {

template <typename T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

}  // namespace detail

// Runs one LSTM direction over a batch-first sequence B x T x D and returns
// the hidden states B x T x H. With `reverse` the recurrence starts at the
// last step. Initial hidden and cell states are zero.
template <typename T>
Tensor<T> lstm_direction(const Tensor<T>& input, const LstmWeights<T>& w, bool reverse) {
  detail::require(input.rank() == 3, "lstm: input must be BxTxD, got " +
                                         to_string(input.shape()));
  const std::size_t batch = input.dim(0), steps = input.dim(1), features = input.dim(2);
  const std::size_t hidden = w.hidden();
  const std::size_t gates = 4 * hidden;
  detail::require(w.input_weight.shape() == Shape{gates, features},
                  "lstm: input weight " + to_string(w.input_weight.shape()) +
                      " does not match input " + to_string(input.shape()));
  detail::require(w.recurrent_weight.shape() == Shape{gates, hidden} &&
                      w.bias.shape() == Shape{gates},
                  "lstm: recurrent weight/bias shapes are inconsistent");

  // pre[b, t, :] = x[b, t, :] * Wih^T + bias; later overwritten in place by
  // the activated gates.
  std::vector<T> act(batch * steps * gates);
  for (std::size_t r = 0; r < batch * steps; ++r)
    std::copy(w.bias.data().begin(), w.bias.data().end(), act.begin() + r * gates);
  detail::gemm(false, true, batch * steps, gates, features, input.data().data(),
               w.input_weight.data().data(), act.data(), true);

  std::vector<T> cell(batch * steps * hidden);
  std::vector<T> out(batch * steps * hidden);
  std::vector<T> h_prev(batch * hidden, T(0));
  std::vector<T> c_prev(batch * hidden, T(0));
  std::vector<T> rec(batch * gates);
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t t = reverse ? steps - 1 - step : step;
    detail::gemm(false, true, batch, gates, hidden, h_prev.data(),
                 w.recurrent_weight.data().data(), rec.data(), false);
    for (std::size_t b = 0; b < batch; ++b) {
      T* a = act.data() + (b * steps + t) * gates;
      const T* r = rec.data() + b * gates;
      for (std::size_t j = 0; j < hidden; ++j) {
        const T i = detail::sigmoid(a[j] + r[j]);
        const T f = detail::sigmoid(a[hidden + j] + r[hidden + j]);
        const T g = std::tanh(a[2 * hidden + j] + r[2 * hidden + j]);
        const T o = detail::sigmoid(a[3 * hidden + j] + r[3 * hidden + j]);
        a[j] = i;
        a[hidden + j] = f;
        a[2 * hidden + j] = g;
        a[3 * hidden + j] = o;
        const T c = f * c_prev[b * hidden + j] + i * g;
        const T h = o * std::tanh(c);
        cell[(b * steps + t) * hidden + j] = c;
        out[(b * steps + t) * hidden + j] = h;
        c_prev[b * hidden + j] = c;
        h_prev[b * hidden + j] = h;
      }
    }
  }

  return Tensor<T>::from_op(
      Shape{batch, steps, hidden}, std::move(out), "lstm",
      {input, w.input_weight, w.recurrent_weight, w.bias},
      [=, act = std::move(act), cell = std::move(cell)](auto& self) {
        auto& xn = *self.parents[0];
        auto& wih = *self.parents[1];
        auto& whh = *self.parents[2];
        auto& bn = *self.parents[3];
        const std::vector<T>& h_all = self.data;
        std::vector<T> dpre(batch * steps * gates, T(0));
        std::vector<T> dh_next(batch * hidden, T(0));
        std::vector<T> dc_next(batch * hidden, T(0));
        std::vector<T> dgates(batch * gates);
        std::vector<T> h_before(batch * hidden);
        for (std::size_t step = steps; step-- > 0;) {
          const std::size_t t = reverse ? steps - 1 - step : step;
          const bool first = step == 0;
          const std::size_t t_prev = reverse ? t + 1 : t - 1;
          for (std::size_t b = 0; b < batch; ++b) {
            const T* a = act.data() + (b * steps + t) * gates;
            T* da = dgates.data() + b * gates;
            for (std::size_t j = 0; j < hidden; ++j) {
              const T i = a[j], f = a[hidden + j], g = a[2 * hidden + j],
                      o = a[3 * hidden + j];
              const T c = cell[(b * steps + t) * hidden + j];
              const T c_before = first ? T(0) : cell[(b * steps + t_prev) * hidden + j];
              const T tc = std::tanh(c);
              const T dh = self.grad[(b * steps + t) * hidden + j] + dh_next[b * hidden + j];
              const T dc = dh * o * (T(1) - tc * tc) + dc_next[b * hidden + j];
              da[j] = dc * g * i * (T(1) - i);
              da[hidden + j] = dc * c_before * f * (T(1) - f);
              da[2 * hidden + j] = dc * i * (T(1) - g * g);
              da[3 * hidden + j] = dh * tc * o * (T(1) - o);
              dc_next[b * hidden + j] = dc * f;
              h_before[b * hidden + j] = first ? T(0) : h_all[(b * steps + t_prev) * hidden + j];
            }
            std::copy_n(da, gates, dpre.data() + (b * steps + t) * gates);
          }
          if (whh.requires_grad) {
            detail::gemm(true, false, gates, hidden, batch, dgates.data(), h_before.data(),
                         whh.grad_buffer(), true);
          }
          detail::gemm(false, false, batch, hidden, gates, dgates.data(), whh.data.data(),
                       dh_next.data(), false);
        }
        accumulate_grad(wih, [&](T* g) {
          detail::gemm(true, false, gates, features, batch * steps, dpre.data(),
                       xn.data.data(), g, true);
        });
        accumulate_grad(xn, [&](T* g) {
          detail::gemm(false, false, batch * steps, features, gates, dpre.data(),
                       wih.data.data(), g, true);
        });
        accumulate_grad(bn, [&](T* g) {
          for (std::size_t r = 0; r < batch * steps; ++r)
            for (std::size_t j = 0; j < gates; ++j) g[j] += dpre[r * gates + j];
        });
      });
}

// Bidirectional layer: B x T x D -> B x T x 2H, forward-direction features
// first.
template <typename T>
Tensor<T> bilstm_layer(const Tensor<T>& input, const BiLstmWeights<T>& w) {
  return concat_last(lstm_direction(input, w.forward, false),
                     lstm_direction(input, w.backward, true));
}

}  // namespace htr

#endif  // HTR_LSTM_HPP_
