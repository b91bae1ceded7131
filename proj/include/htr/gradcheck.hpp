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

// Central finite-difference checks of every differentiable operation, run in
// double precision over a range of seeds. The numeric side only evaluates
// forward passes, so it is independent of the backward rules under test.

#ifndef HTR_GRADCHECK_HPP_
#define HTR_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "htr/ctc.hpp"
#include "htr/lstm.hpp"
#include "htr/network.hpp"
#include "htr/ops.hpp"
#include "htr/tensor.hpp"

namespace htr {

// ||analytic - numeric|| / max(||analytic||, ||numeric||) over all entries of
// `wrt`; 0 when both gradients vanish.
inline double gradient_rel_error(const std::function<Tensor<double>()>& loss_fn,
                                 Tensor<double> wrt, double step = 1e-5) {
  wrt.zero_grad();
  loss_fn().backward();
  std::vector<double> analytic(wrt.numel(), 0.0);
  if (wrt.has_grad()) std::copy(wrt.grad().begin(), wrt.grad().end(), analytic.begin());
  wrt.zero_grad();

  double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
  NoGradGuard no_grad;
  auto values = wrt.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double plus = loss_fn().item();
    values[i] = saved - step;
    const double minus = loss_fn().item();
    values[i] = saved;
    const double numeric = (plus - minus) / (2.0 * step);
    diff += (analytic[i] - numeric) * (analytic[i] - numeric);
    norm_a += analytic[i] * analytic[i];
    norm_n += numeric * numeric;
  }
  const double denom = std::sqrt(std::max(norm_a, norm_n));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

struct GradCheckResult {
  std::string op;
  int seeds = 0;
  double worst_rel_error = 0.0;
  double tolerance = 1e-4;

  bool passed() const { return worst_rel_error < tolerance; }
};

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad,
                                    double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

// Projects an output onto fixed random weights so every output entry
// contributes to the scalar being differentiated.
inline Tensor<double> project(const Tensor<double>& out, const Tensor<double>& weights) {
  return sum(mul(out, weights));
}

// A case builds its inputs from a seed and returns the tensors to check plus
// the scalar function of them.
struct GradCase {
  std::vector<Tensor<double>> inputs;
  std::function<Tensor<double>()> loss;
};

inline double check_case(const GradCase& c) {
  double worst = 0.0;
  for (const auto& input : c.inputs) worst = std::max(worst, gradient_rel_error(c.loss, input));
  return worst;
}

}  // namespace detail

using GradCaseFactory = std::function<detail::GradCase(std::mt19937_64&)>;

struct GradCheckSpec {
  std::string op;
  GradCaseFactory make;
};

// Every differentiable operation of the engine with a small random instance.
inline std::vector<GradCheckSpec> gradcheck_specs() {
  using detail::GradCase;
  using detail::project;
  using detail::random_tensor;
  std::vector<GradCheckSpec> specs;

  specs.push_back({"conv2d", [](std::mt19937_64& rng) {
                     auto x = random_tensor({1, 2, 5, 6}, rng, true);
                     auto w = random_tensor({3, 2, 3, 3}, rng, true);
                     auto b = random_tensor({3}, rng, true);
                     auto r = random_tensor({1, 3, 5, 6}, rng, false);
                     return GradCase{{x, w, b},
                                     [=] { return project(conv2d(x, w, b, 1, 1), r); }};
                   }});
  specs.push_back({"conv2d_stride2", [](std::mt19937_64& rng) {
                     auto x = random_tensor({2, 2, 7, 5}, rng, true);
                     auto w = random_tensor({2, 2, 3, 1}, rng, true);
                     auto b = random_tensor({2}, rng, true);
                     auto r = random_tensor({2, 2, 3, 3}, rng, false);
                     return GradCase{{x, w, b},
                                     [=] { return project(conv2d(x, w, b, 2, 0), r); }};
                   }});
  specs.push_back({"conv1d", [](std::mt19937_64& rng) {
                     auto x = random_tensor({2, 3, 5}, rng, true);
                     auto w = random_tensor({4, 3, 3}, rng, true);
                     auto b = random_tensor({4}, rng, true);
                     auto r = random_tensor({2, 4, 5}, rng, false);
                     return GradCase{{x, w, b}, [=] { return project(conv1d(x, w, b), r); }};
                   }});
  specs.push_back({"maxpool2d", [](std::mt19937_64& rng) {
                     auto x = random_tensor({2, 2, 4, 6}, rng, true);
                     auto r = random_tensor({2, 2, 2, 3}, rng, false);
                     return GradCase{{x}, [=] { return project(maxpool2d(x, 2, 2), r); }};
                   }});
  specs.push_back({"batchnorm_train", [](std::mt19937_64& rng) {
                     auto x = random_tensor({3, 2, 2, 3}, rng, true);
                     auto g = random_tensor({2}, rng, true, 0.5, 1.5);
                     auto b = random_tensor({2}, rng, true);
                     auto r = random_tensor({3, 2, 2, 3}, rng, false);
                     auto stats = std::make_shared<BatchNormStats<double>>(2);
                     return GradCase{{x, g, b}, [=] {
                                       return project(batchnorm(x, g, b, *stats, true), r);
                                     }};
                   }});
  specs.push_back({"batchnorm_eval", [](std::mt19937_64& rng) {
                     auto x = random_tensor({2, 3, 4}, rng, true);
                     auto g = random_tensor({3}, rng, true, 0.5, 1.5);
                     auto b = random_tensor({3}, rng, true);
                     auto r = random_tensor({2, 3, 4}, rng, false);
                     auto stats = std::make_shared<BatchNormStats<double>>(3);
                     stats->mean = random_tensor({3}, rng, false);
                     stats->var = random_tensor({3}, rng, false, 0.5, 2.0);
                     return GradCase{{x, g, b}, [=] {
                                       return project(batchnorm(x, g, b, *stats, false), r);
                                     }};
                   }});
  specs.push_back({"linear", [](std::mt19937_64& rng) {
                     auto x = random_tensor({2, 3, 4}, rng, true);
                     auto w = random_tensor({5, 4}, rng, true);
                     auto b = random_tensor({5}, rng, true);
                     auto r = random_tensor({2, 3, 5}, rng, false);
                     return GradCase{{x, w, b}, [=] { return project(linear(x, w, b), r); }};
                   }});
  specs.push_back({"bilstm_layer", [](std::mt19937_64& rng) {
                     auto x = random_tensor({1, 3, 2}, rng, true);
                     auto fwd = LstmWeights<double>{random_tensor({8, 2}, rng, true),
                                                    random_tensor({8, 2}, rng, true),
                                                    random_tensor({8}, rng, true)};
                     auto bwd = LstmWeights<double>{random_tensor({8, 2}, rng, true),
                                                    random_tensor({8, 2}, rng, true),
                                                    random_tensor({8}, rng, true)};
                     auto r = random_tensor({1, 3, 4}, rng, false);
                     BiLstmWeights<double> w{fwd, bwd};
                     return GradCase{{x, fwd.input_weight, fwd.recurrent_weight, fwd.bias,
                                      bwd.input_weight, bwd.recurrent_weight, bwd.bias},
                                     [=] { return project(bilstm_layer(x, w), r); }};
                   }});
  specs.push_back({"log_softmax", [](std::mt19937_64& rng) {
                     auto x = random_tensor({3, 5}, rng, true, -3.0, 3.0);
                     auto r = random_tensor({3, 5}, rng, false);
                     return GradCase{{x}, [=] { return project(log_softmax(x), r); }};
                   }});
  specs.push_back({"ctc_loss", [](std::mt19937_64& rng) {
                     std::uniform_int_distribution<int> steps_dist(3, 5);
                     const auto steps = static_cast<std::size_t>(steps_dist(rng));
                     const std::size_t classes = 4;
                     auto x = random_tensor({2, steps, classes}, rng, true, -2.0, 2.0);
                     std::uniform_int_distribution<int> label(1, static_cast<int>(classes) - 1);
                     std::vector<std::vector<int>> targets;
                     while (targets.size() < 2) {
                       std::vector<int> t(1 + targets.size());
                       for (int& v : t) v = label(rng);
                       if (ctc_min_steps(t) <= steps) targets.push_back(t);
                     }
                     return GradCase{{x}, [=] { return ctc_loss(x, targets); }};
                   }});
  specs.push_back({"flatten_maxpool", [](std::mt19937_64& rng) {
                     auto x = random_tensor({2, 3, 4, 5}, rng, true);
                     auto r = random_tensor({2, 5, 3}, rng, false);
                     return GradCase{{x}, [=] { return project(flatten_maxpool(x), r); }};
                   }});
  specs.push_back({"flatten_concat", [](std::mt19937_64& rng) {
                     auto x = random_tensor({2, 3, 4, 5}, rng, true);
                     auto r = random_tensor({2, 5, 12}, rng, false);
                     return GradCase{{x}, [=] { return project(flatten_concat(x), r); }};
                   }});
  specs.push_back({"relu_add_mul", [](std::mt19937_64& rng) {
                     auto a = random_tensor({3, 4}, rng, true);
                     auto b = random_tensor({3, 4}, rng, true);
                     auto r = random_tensor({3, 4}, rng, false);
                     return GradCase{{a, b}, [=] {
                                       return project(relu(add(mul(a, b), scale(a, 0.5))), r);
                                     }};
                   }});
  specs.push_back({"transpose_concat", [](std::mt19937_64& rng) {
                     auto a = random_tensor({2, 3, 4}, rng, true);
                     auto b = random_tensor({2, 4, 2}, rng, true);
                     auto r = random_tensor({2, 4, 5}, rng, false);
                     return GradCase{{a, b}, [=] {
                                       return project(concat_last(transpose_last2(a), b), r);
                                     }};
                   }});
  return specs;
}

inline GradCheckResult run_gradcheck(const GradCheckSpec& spec, int seeds = 20,
                                     std::uint64_t base_seed = 0) {
  GradCheckResult result{spec.op, seeds, 0.0};
  for (int s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(base_seed + static_cast<std::uint64_t>(s));
    result.worst_rel_error = std::max(result.worst_rel_error, detail::check_case(spec.make(rng)));
  }
  return result;
}

inline std::vector<GradCheckResult> run_gradcheck_suite(int seeds = 20,
                                                        std::uint64_t base_seed = 0) {
  std::vector<GradCheckResult> results;
  for (const auto& spec : gradcheck_specs()) results.push_back(run_gradcheck(spec, seeds, base_seed));
  return results;
}

}  // namespace htr

#endif  // HTR_GRADCHECK_HPP_
