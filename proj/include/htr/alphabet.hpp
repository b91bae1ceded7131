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

#ifndef HTR_ALPHABET_HPP_
#define HTR_ALPHABET_HPP_

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "htr/common.hpp"

namespace htr {

// Ordered character inventory. Id 0 is the CTC blank and never appears in an
// encoded transcript; characters are UTF-8 code points with ids 1..size()-1.
class Alphabet {
 public:
  static constexpr int kBlank = 0;

  Alphabet() : Alphabet(std::vector<std::string>{" "}) {}

  explicit Alphabet(std::vector<std::string> symbols) {
    symbols_.reserve(symbols.size() + 1);
    symbols_.emplace_back();
    for (auto& s : symbols) {
      if (utf8::length(s) != 1) {
        throw ConfigError("alphabet entries must be single characters, got '" + s + "'");
      }
      if (!index_.emplace(s, static_cast<int>(symbols_.size())).second) {
        throw ConfigError("duplicate alphabet character '" + s + "'");
      }
      symbols_.push_back(std::move(s));
    }
    if (!index_.contains(" ")) throw ConfigError("alphabet must contain the space character");
  }

  // Every distinct character of `chars`, in order of first appearance.
  static Alphabet from_chars(std::string_view chars) {
    std::vector<std::string> symbols;
    std::unordered_map<std::string, bool> seen;
    for (auto& ch : utf8::split(chars)) {
      if (seen.emplace(ch, true).second) symbols.push_back(ch);
    }
    return Alphabet(std::move(symbols));
  }

  // Blank, space and a-z: 28 classes.
  static Alphabet desk() { return from_chars(" abcdefghijklmnopqrstuvwxyz"); }

  std::size_t size() const { return symbols_.size(); }

  const std::string& symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id)); }

  std::optional<int> find(std::string_view ch) const {
    auto it = index_.find(std::string(ch));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(std::string_view ch) const { return find(ch).has_value(); }

  // Characters without the blank, concatenated.
  std::string chars() const {
    std::string out;
    for (std::size_t i = 1; i < symbols_.size(); ++i) out += symbols_[i];
    return out;
  }

  std::vector<int> encode(std::string_view text) const {
    if (text.empty()) throw DataError("cannot encode an empty transcript");
    std::vector<int> ids;
    for (const auto& ch : utf8::split(text)) {
      auto id = find(ch);
      if (!id) throw DataError("character '" + ch + "' is not in the alphabet");
      ids.push_back(*id);
    }
    return ids;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (id <= kBlank || static_cast<std::size_t>(id) >= symbols_.size()) {
        throw DataError("label id " + std::to_string(id) + " is not a character id");
      }
      out += symbols_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  bool operator==(const Alphabet& other) const { return symbols_ == other.symbols_; }

 private:
  std::vector<std::string> symbols_;  // [0] is the blank
  std::unordered_map<std::string, int> index_;
};

}  // namespace htr

#endif  // HTR_ALPHABET_HPP_
