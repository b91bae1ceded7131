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

// Connectionist temporal classification: loss by the log-domain
// forward-backward recursions, an enumeration oracle, and greedy decoding.
//
// Time-major lattices are T x C row-major with class 0 the blank.

#ifndef HTR_CTC_HPP_
#define HTR_CTC_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "htr/alphabet.hpp"
#include "htr/common.hpp"
#include "htr/tensor.hpp"

namespace htr {

// Raised when no alignment of the given length can emit the target.
class UnsatisfiableTargetError : public DataError {
 public:
  using DataError::DataError;
};

inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

// Number of frames needed to emit `target`: one per label plus a separating
// blank between every pair of equal neighbours.
inline std::size_t ctc_min_steps(std::span<const int> target) {
  std::size_t steps = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++steps;
  return steps;
}

// Target with blanks interleaved and at both ends: length 2U+1, blanks at
// even positions.
struct ExtendedTarget {
  std::vector<int> labels;
  std::vector<int> extended;

  explicit ExtendedTarget(std::span<const int> target) : labels(target.begin(), target.end()) {
    extended.assign(2 * labels.size() + 1, Alphabet::kBlank);
    for (std::size_t u = 0; u < labels.size(); ++u) {
      if (labels[u] == Alphabet::kBlank) {
        throw DataError("CTC targets must not contain the blank id");
      }
      extended[2 * u + 1] = labels[u];
    }
  }
};

// Log-domain forward/backward tables for one sequence. Both alpha and beta
// include the emission at their own frame.
struct LogProbLattice {
  std::size_t steps = 0;
  std::size_t classes = 0;
  std::vector<double> log_probs;  // T x C
  std::vector<double> alpha;      // T x (2U+1)
  std::vector<double> beta;       // T x (2U+1)
  double log_likelihood = kLogZero;
};

struct CtcResult {
  double loss = 0.0;               // -log p(target | x)
  std::vector<double> grad_logits;  // d loss / d logits, T x C
  LogProbLattice lattice;
};

// Loss and logit gradient for one sequence given unnormalized scores. The
// log-softmax is taken here so the gradient is the closed form
// softmax - occupancy.
inline CtcResult ctc_forward_backward(std::span<const double> logits, std::size_t steps,
                                      std::size_t classes, std::span<const int> target) {
  if (logits.size() != steps * classes) {
    throw ShapeError("ctc: lattice has " + std::to_string(logits.size()) +
                     " entries, expected " + std::to_string(steps * classes));
  }
  const ExtendedTarget ext(target);
  for (int id : ext.labels) {
    if (id < 0 || static_cast<std::size_t>(id) >= classes) {
      throw DataError("ctc: label id " + std::to_string(id) + " out of range for " +
                      std::to_string(classes) + " classes");
    }
  }
  const std::size_t needed = ctc_min_steps(target);
  if (needed > steps) {
    throw UnsatisfiableTargetError("ctc: target needs " + std::to_string(needed) +
                                   " frames but only " + std::to_string(steps) +
                                   " are available");
  }

  CtcResult result;
  LogProbLattice& lat = result.lattice;
  lat.steps = steps;
  lat.classes = classes;
  lat.log_probs.resize(steps * classes);
  for (std::size_t t = 0; t < steps; ++t) {
    const double* x = logits.data() + t * classes;
    const double mx = *std::max_element(x, x + classes);
    double acc = 0.0;
    for (std::size_t k = 0; k < classes; ++k) acc += std::exp(x[k] - mx);
    const double lse = mx + std::log(acc);
    for (std::size_t k = 0; k < classes; ++k) lat.log_probs[t * classes + k] = x[k] - lse;
  }

  const std::vector<int>& ext_ids = ext.extended;
  const std::size_t states = ext_ids.size();
  const auto lp = [&](std::size_t t, std::size_t s) {
    return lat.log_probs[t * classes + static_cast<std::size_t>(ext_ids[s])];
  };
  // A state may be entered by skipping the preceding blank unless it is a
  // blank itself or repeats the label two states back.
  const auto can_skip = [&](std::size_t s) {
    return s >= 2 && ext_ids[s] != Alphabet::kBlank && ext_ids[s] != ext_ids[s - 2];
  };

  lat.alpha.assign(steps * states, kLogZero);
  lat.alpha[0] = lp(0, 0);
  if (states > 1) lat.alpha[1] = lp(0, 1);
  for (std::size_t t = 1; t < steps; ++t) {
    const double* prev = lat.alpha.data() + (t - 1) * states;
    double* cur = lat.alpha.data() + t * states;
    for (std::size_t s = 0; s < states; ++s) {
      double v = prev[s];
      if (s >= 1) v = log_add(v, prev[s - 1]);
      if (can_skip(s)) v = log_add(v, prev[s - 2]);
      cur[s] = v == kLogZero ? kLogZero : v + lp(t, s);
    }
  }

  lat.beta.assign(steps * states, kLogZero);
  double* last = lat.beta.data() + (steps - 1) * states;
  last[states - 1] = lp(steps - 1, states - 1);
  if (states > 1) last[states - 2] = lp(steps - 1, states - 2);
  for (std::size_t t = steps - 1; t-- > 0;) {
    const double* next = lat.beta.data() + (t + 1) * states;
    double* cur = lat.beta.data() + t * states;
    for (std::size_t s = 0; s < states; ++s) {
      double v = next[s];
      if (s + 1 < states) v = log_add(v, next[s + 1]);
      if (s + 2 < states && can_skip(s + 2)) v = log_add(v, next[s + 2]);
      cur[s] = v == kLogZero ? kLogZero : v + lp(t, s);
    }
  }

  const double* alpha_end = lat.alpha.data() + (steps - 1) * states;
  double ll = alpha_end[states - 1];
  if (states > 1) ll = log_add(ll, alpha_end[states - 2]);
  if (ll == kLogZero || !std::isfinite(ll)) {
    // Satisfiability was checked above, so this is log-probability underflow.
    throw NumericError("ctc: target probability underflowed to zero (non-finite loss)");
  }
  lat.log_likelihood = ll;
  result.loss = -ll;

  // d(-log p)/d logit[t,k] = y[t,k] - (1/p) sum_{s: l'_s = k} alpha_t(s) beta_t(s) / y[t,k]
  result.grad_logits.resize(steps * classes);
  std::vector<double> occupancy(classes);
  for (std::size_t t = 0; t < steps; ++t) {
    std::fill(occupancy.begin(), occupancy.end(), kLogZero);
    for (std::size_t s = 0; s < states; ++s) {
      const double ab = lat.alpha[t * states + s] + lat.beta[t * states + s];
      if (ab == kLogZero || std::isnan(ab)) continue;
      auto& slot = occupancy[static_cast<std::size_t>(ext_ids[s])];
      slot = log_add(slot, ab);
    }
    for (std::size_t k = 0; k < classes; ++k) {
      const double logy = lat.log_probs[t * classes + k];
      const double gamma =
          occupancy[k] == kLogZero ? 0.0 : std::exp(occupancy[k] - ll - logy);
      result.grad_logits[t * classes + k] = std::exp(logy) - gamma;
    }
  }
  return result;
}

// Mean CTC loss over a batch of B x T x C logits. The backward rule is the
// analytic gradient computed alongside the forward recursions.
template <typename T>
Tensor<T> ctc_loss(const Tensor<T>& logits, const std::vector<std::vector<int>>& targets) {
  if (logits.rank() != 3) {
    throw ShapeError("ctc_loss: logits must be BxTxC, got " + to_string(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), steps = logits.dim(1), classes = logits.dim(2);
  if (targets.size() != batch) {
    throw ShapeError("ctc_loss: " + std::to_string(targets.size()) + " targets for batch of " +
                     std::to_string(batch));
  }
  std::vector<T> grad(logits.numel());
  std::vector<double> slice(steps * classes);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = logits.data().data() + b * steps * classes;
    std::copy(src, src + steps * classes, slice.begin());
    const CtcResult r = ctc_forward_backward(slice, steps, classes, targets[b]);
    total += r.loss;
    for (std::size_t i = 0; i < slice.size(); ++i)
      grad[b * steps * classes + i] = static_cast<T>(r.grad_logits[i] / static_cast<double>(batch));
  }
  const T mean = static_cast<T>(total / static_cast<double>(batch));
  return Tensor<T>::from_op(Shape{1}, {mean}, "ctc_loss", {logits},
                            [grad = std::move(grad)](auto& self) {
                              accumulate_grad(*self.parents[0], [&](T* g) {
                                for (std::size_t i = 0; i < grad.size(); ++i)
                                  g[i] += self.grad[0] * grad[i];
                              });
                            });
}

// Sums the probability of every length-T path that collapses to `target`.
// Exponential in T; meant as a reference at toy sizes.
inline double ctc_brute_force(std::span<const double> probs, std::size_t steps,
                              std::size_t classes, std::span<const int> target) {
  if (probs.size() != steps * classes) {
    throw ShapeError("ctc_brute_force: lattice size does not match T x C");
  }
  double paths = 1.0;
  for (std::size_t t = 0; t < steps; ++t) paths *= static_cast<double>(classes);
  if (paths > 1e6) {
    throw std::invalid_argument("ctc_brute_force: " + std::to_string(classes) + "^" +
                                std::to_string(steps) + " paths exceeds the 1e6 guard");
  }
  std::vector<std::size_t> path(steps, 0);
  std::vector<int> collapsed;
  double total = 0.0;
  for (;;) {
    collapsed.clear();
    int prev = -1;
    for (std::size_t k : path) {
      const int id = static_cast<int>(k);
      if (id != prev && id != Alphabet::kBlank) collapsed.push_back(id);
      prev = id;
    }
    if (std::equal(collapsed.begin(), collapsed.end(), target.begin(), target.end())) {
      double p = 1.0;
      for (std::size_t t = 0; t < steps; ++t) p *= probs[t * classes + path[t]];
      total += p;
    }
    std::size_t t = 0;
    while (t < steps && ++path[t] == classes) path[t++] = 0;
    if (t == steps) break;
  }
  if (total <= 0.0) {
    throw UnsatisfiableTargetError("ctc_brute_force: no path collapses to the target");
  }
  return -std::log(total);
}

// Best-path ids: per-frame argmax (lowest id on ties), adjacent repeats
// merged, blanks removed.
template <typename T>
std::vector<int> greedy_decode_ids(std::span<const T> logits, std::size_t steps,
                                   std::size_t classes) {
  std::vector<int> ids;
  int prev = -1;
  for (std::size_t t = 0; t < steps; ++t) {
    const T* row = logits.data() + t * classes;
    const int best = static_cast<int>(std::max_element(row, row + classes) - row);
    if (best != prev && best != Alphabet::kBlank) ids.push_back(best);
    prev = best;
  }
  return ids;
}

template <typename T>
std::string greedy_decode(std::span<const T> logits, std::size_t steps,
                          const Alphabet& alphabet) {
  return alphabet.decode(greedy_decode_ids(logits, steps, alphabet.size()));
}

}  // namespace htr

#endif  // HTR_CTC_HPP_
