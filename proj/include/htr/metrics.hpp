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

#ifndef HTR_METRICS_HPP_
#define HTR_METRICS_HPP_

#include <algorithm>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "htr/common.hpp"

namespace htr {

// Levenshtein distance with unit costs over any random-access sequences.
template <typename SeqA, typename SeqB>
std::size_t edit_distance(const SeqA& a, const SeqB& b) {
  const std::size_t n = std::size(a), m = std::size(b);
  std::vector<std::size_t> row(m + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  for (std::size_t i = 1; i <= n; ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t up = row[j];
      const std::size_t sub = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
      row[j] = std::min({up + 1, row[j - 1] + 1, sub});
      diag = up;
    }
  }
  return row[m];
}

// Whitespace-delimited words; runs of spaces count as one separator.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    const std::size_t start = i;
    while (i < text.size() && text[i] != ' ') ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

struct SampleScore {
  std::size_t char_distance = 0;
  std::size_t ref_chars = 0;
  std::size_t word_distance = 0;
  std::size_t ref_words = 0;
};

// Micro-averaged error rates in percent: summed distances over summed
// reference lengths. Spaces count as characters.
struct EvalReport {
  double cer = 0.0;
  double wer = 0.0;
  std::size_t ref_chars = 0;
  std::size_t ref_words = 0;
  std::size_t char_errors = 0;
  std::size_t word_errors = 0;
  std::vector<SampleScore> samples;
};

struct ScoreOptions {
  bool count_spaces = true;  // false drops ' ' from both sides before the CER distance
};

inline EvalReport corpus_scores(const std::vector<std::string>& refs,
                                const std::vector<std::string>& hyps,
                                const ScoreOptions& options = {}) {
  if (refs.size() != hyps.size()) {
    throw std::invalid_argument("corpus_scores: " + std::to_string(refs.size()) +
                                " references but " + std::to_string(hyps.size()) +
                                " hypotheses");
  }
  EvalReport report;
  report.samples.reserve(refs.size());
  const auto chars = [&](const std::string& text) {
    auto out = utf8::split(text);
    if (!options.count_spaces) std::erase(out, std::string(" "));
    return out;
  };
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto ref_chars = chars(refs[i]);
    const auto ref_words = split_words(refs[i]);
    SampleScore s;
    s.char_distance = edit_distance(ref_chars, chars(hyps[i]));
    s.ref_chars = ref_chars.size();
    s.word_distance = edit_distance(ref_words, split_words(hyps[i]));
    s.ref_words = ref_words.size();
    report.char_errors += s.char_distance;
    report.ref_chars += s.ref_chars;
    report.word_errors += s.word_distance;
    report.ref_words += s.ref_words;
    report.samples.push_back(s);
  }
  const auto percent = [](std::size_t errors, std::size_t total) {
    if (total == 0) return errors == 0 ? 0.0 : 100.0;
    return 100.0 * static_cast<double>(errors) / static_cast<double>(total);
  };
  report.cer = percent(report.char_errors, report.ref_chars);
  report.wer = percent(report.word_errors, report.ref_words);
  return report;
}

}  // namespace htr

#endif  // HTR_METRICS_HPP_
