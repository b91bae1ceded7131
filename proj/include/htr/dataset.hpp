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

// Corpus ingestion: JSON Lines manifests, binary PGM images, and a
// deterministic synthetic line generator built on a 5x7 dot-matrix font.

#ifndef HTR_DATASET_HPP_
#define HTR_DATASET_HPP_

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "htr/alphabet.hpp"
#include "htr/common.hpp"
#include "htr/preprocessing.hpp"

namespace htr {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PGM

enum class Polarity {
  kAuto,    // invert when the image is mostly light (dark ink on paper)
  kInvert,  // always invert
  kKeep,    // file already stores ink as high values
};

inline RawImage decode_pgm(std::string_view bytes, Polarity polarity = Polarity::kAuto) {
  std::size_t pos = 0;
  const auto fail = [](const std::string& why) { return DataError("PGM decode: " + why); };
  const auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto read_uint = [&](const char* field) {
    skip_space();
    std::size_t start = pos;
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (value > (1u << 24)) throw fail(std::string(field) + " is too large");
      ++pos;
    }
    if (pos == start) throw fail(std::string("missing ") + field);
    return value;
  };
  if (bytes.size() < 2 || bytes.substr(0, 2) != "P5") throw fail("not a binary PGM (magic P5)");
  pos = 2;
  const std::size_t width = read_uint("width");
  const std::size_t height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (width == 0 || height == 0) throw fail("zero image extent");
  if (maxval == 0 || maxval > 255) throw fail("maxval must be in 1..255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw fail("missing separator before pixel data");
  }
  ++pos;
  if (bytes.size() - pos < width * height) {
    throw fail("truncated pixel data: " + std::to_string(bytes.size() - pos) + " of " +
               std::to_string(width * height) + " bytes");
  }
  std::vector<float> pixels(width * height);
  double mean = 0.0;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const auto v = static_cast<unsigned char>(bytes[pos + i]);
    if (v > maxval) throw fail("sample exceeds maxval");
    pixels[i] = static_cast<float>(v) / static_cast<float>(maxval);
    mean += pixels[i];
  }
  mean /= static_cast<double>(pixels.size());
  const bool invert =
      polarity == Polarity::kInvert || (polarity == Polarity::kAuto && mean >= 0.5);
  if (invert) {
    for (float& v : pixels) v = 1.0f - v;
  }
  return RawImage(height, width, std::move(pixels));
}

inline RawImage read_image(const fs::path& path, Polarity polarity = Polarity::kAuto) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return decode_pgm(buf.str(), polarity);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// Writes ink-high intensities as a dark-on-light 8-bit PGM.
inline void write_image(const fs::path& path, const RawImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::string payload(img.pixels.size(), '\0');
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const long v = std::lround((1.0f - std::clamp(img.pixels[i], 0.0f, 1.0f)) * 255.0f);
    payload[i] = static_cast<char>(static_cast<unsigned char>(v));
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestEntry {
  std::string image;  // as written in the manifest, relative to its directory
  std::string text;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetIndex {
  std::vector<ManifestEntry> entries;
  std::string split = "train";
  fs::path root;  // directory image paths are relative to

  std::size_t size() const { return entries.size(); }

  fs::path resolve(const ManifestEntry& e) const {
    const fs::path p(e.image);
    return p.is_absolute() ? p : root / p;
  }

  bool operator==(const DatasetIndex& o) const {
    return entries == o.entries && split == o.split;
  }
};

// Parses JSON Lines records {"image": ..., "text": ...}. Blank lines are
// skipped; every other problem is reported with its line number.
inline DatasetIndex load_manifest(const fs::path& path, const Alphabet& alphabet,
                                  std::string split = "train") {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  DatasetIndex index;
  index.split = std::move(split);
  index.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + "malformed JSON record (" + e.what() + ")");
    }
    if (!rec.is_object() || !rec.contains("image") || !rec.contains("text") ||
        !rec["image"].is_string() || !rec["text"].is_string()) {
      throw DataError(where + "record needs string fields \"image\" and \"text\"");
    }
    ManifestEntry entry{rec["image"].get<std::string>(), rec["text"].get<std::string>()};
    if (entry.image.empty()) throw DataError(where + "empty \"image\" path");
    if (entry.text.empty()) throw DataError(where + "empty \"text\" transcript");
    try {
      alphabet.encode(entry.text);
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
    index.entries.push_back(std::move(entry));
  }
  return index;
}

inline void write_manifest(const fs::path& path, const DatasetIndex& index) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& e : index.entries) {
    out << nlohmann::json{{"image", e.image}, {"text", e.text}}.dump() << '\n';
  }
}

inline std::vector<Sample> load_samples(const DatasetIndex& index,
                                        Polarity polarity = Polarity::kAuto) {
  std::vector<Sample> samples;
  samples.reserve(index.size());
  for (const auto& e : index.entries) samples.push_back({read_image(index.resolve(e), polarity), e.text});
  return samples;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

inline constexpr std::size_t kGlyphWidth = 5;
inline constexpr std::size_t kGlyphHeight = 7;
using GlyphBitmap = std::array<const char*, kGlyphHeight>;

// Dot-matrix glyphs for space and a-z; '#' is ink.
inline const std::array<std::pair<char, GlyphBitmap>, 27>& glyph_atlas() {
  static const std::array<std::pair<char, GlyphBitmap>, 27> atlas{{
      {' ', {".....", ".....", ".....", ".....", ".....", ".....", "....."}},
      {'a', {".....", ".....", ".###.", "....#", ".####", "#...#", ".####"}},
      {'b', {"#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."}},
      {'c', {".....", ".....", ".###.", "#....", "#....", "#...#", ".###."}},
      {'d', {"....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"}},
      {'e', {".....", ".....", ".###.", "#...#", "#####", "#....", ".###."}},
      {'f', {"..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."}},
      {'g', {".....", ".####", "#...#", "#...#", ".####", "....#", ".###."}},
      {'h', {"#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"}},
      {'i', {"..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."}},
      {'j', {"...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."}},
      {'k', {"#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."}},
      {'l', {".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."}},
      {'m', {".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"}},
      {'n', {".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"}},
      {'o', {".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."}},
      {'p', {".....", ".....", "####.", "#...#", "####.", "#....", "#...."}},
      {'q', {".....", ".....", ".##.#", "#..##", ".####", "....#", "....#"}},
      {'r', {".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."}},
      {'s', {".....", ".....", ".###.", "#....", ".###.", "....#", "####."}},
      {'t', {".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."}},
      {'u', {".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"}},
      {'v', {".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."}},
      {'w', {".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."}},
      {'x', {".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"}},
      {'y', {".....", "#...#", "#...#", ".####", "....#", "#...#", ".###."}},
      {'z', {".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"}},
  }};
  return atlas;
}

inline const GlyphBitmap& glyph(char ch) {
  for (const auto& [c, bitmap] : glyph_atlas()) {
    if (c == ch) return bitmap;
  }
  throw DataError(std::string("no glyph for character '") + ch + "'");
}

struct SynthConfig {
  std::string letters = "abcdefghijklmnopqrstuvwxyz";
  std::size_t min_words = 1;
  std::size_t max_words = 3;
  std::size_t min_word_length = 2;
  std::size_t max_word_length = 4;
  double glyph_jitter = 0.15;  // max per-glyph horizontal shear
  std::size_t size = 32;
  std::uint64_t seed = 7;

  static constexpr std::size_t kScale = 3;
  static constexpr std::size_t kMargin = 2;
  static constexpr int kBaselineJitter = 2;

  void validate() const {
    if (size == 0) throw ConfigError("synthetic corpus size must be positive");
    if (letters.empty()) throw ConfigError("synthetic alphabet is empty");
    for (char c : letters) {
      if (c < 'a' || c > 'z') throw ConfigError(std::string("no glyph for '") + c + "'");
    }
    if (min_words == 0 || min_words > max_words || min_word_length == 0 ||
        min_word_length > max_word_length) {
      throw ConfigError("synthetic word/length ranges are empty");
    }
    if (glyph_jitter < 0) throw ConfigError("glyph jitter must be nonnegative");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, letters, min_words, max_words,
                                                min_word_length, max_word_length,
                                                glyph_jitter, size, seed)

// Renders `text` left to right: glyphs upscaled x3, 1-4 px gaps, +-2 px
// baseline jitter and a random shear per glyph.
template <typename Rng>
RawImage render_line(const std::string& text, double glyph_jitter, Rng& rng) {
  constexpr std::size_t s = SynthConfig::kScale;
  constexpr std::size_t gw = kGlyphWidth * s, gh = kGlyphHeight * s;
  constexpr int jitter = SynthConfig::kBaselineJitter;
  const std::size_t shear_room = static_cast<std::size_t>(std::ceil(glyph_jitter * gh / 2.0));
  std::uniform_int_distribution<int> gap(1, 4);
  std::uniform_int_distribution<int> baseline(-jitter, jitter);
  std::uniform_real_distribution<double> shear(-glyph_jitter, glyph_jitter);

  struct Placed {
    char ch;
    std::size_t x;
    int dy;
    double shear;
  };
  std::vector<Placed> placed;
  std::size_t x = SynthConfig::kMargin + shear_room;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (i) x += static_cast<std::size_t>(gap(rng));
    const int dy = baseline(rng);
    const double k = glyph_jitter > 0 ? shear(rng) : 0.0;
    placed.push_back({text[i], x, dy, k});
    x += gw;
  }
  const std::size_t width = x + SynthConfig::kMargin + shear_room;
  const std::size_t height = gh + 2 * static_cast<std::size_t>(jitter) + 2 * SynthConfig::kMargin;
  RawImage img(height, width, 0.0f);
  const double center = (static_cast<double>(gh) - 1.0) / 2.0;
  for (const auto& p : placed) {
    const GlyphBitmap& bitmap = glyph(p.ch);
    const std::size_t top = SynthConfig::kMargin + static_cast<std::size_t>(jitter + p.dy);
    for (std::size_t y = 0; y < gh; ++y) {
      const auto offset =
          static_cast<long>(std::lround(p.shear * (center - static_cast<double>(y))));
      for (std::size_t gx = 0; gx < gw; ++gx) {
        if (bitmap[y / s][gx / s] != '#') continue;
        const long px = static_cast<long>(p.x + gx) + offset;
        img.at(top + y, static_cast<std::size_t>(px)) = 1.0f;
      }
    }
  }
  return img;
}

// In-memory corpus; a pure function of the configuration.
inline std::vector<Sample> synth_samples(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> words(cfg.min_words, cfg.max_words);
  std::uniform_int_distribution<std::size_t> length(cfg.min_word_length, cfg.max_word_length);
  std::uniform_int_distribution<std::size_t> letter(0, cfg.letters.size() - 1);
  std::vector<Sample> out;
  out.reserve(cfg.size);
  for (std::size_t n = 0; n < cfg.size; ++n) {
    std::string text;
    const std::size_t count = words(rng);
    for (std::size_t w = 0; w < count; ++w) {
      if (w) text += ' ';
      const std::size_t len = length(rng);
      for (std::size_t i = 0; i < len; ++i) text += cfg.letters[letter(rng)];
    }
    RawImage img = render_line(text, cfg.glyph_jitter, rng);
    out.push_back({std::move(img), std::move(text)});
  }
  return out;
}

// Writes images/NNNNNN.pgm, manifest.jsonl and synthconfig.json under `dir`.
inline DatasetIndex synth_generate(const SynthConfig& cfg, const fs::path& dir) {
  const std::vector<Sample> samples = synth_samples(cfg);
  fs::create_directories(dir / "images");
  DatasetIndex index;
  index.root = dir;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".pgm";
    write_image(dir / name.str(), samples[i].image);
    index.entries.push_back({name.str(), samples[i].text});
  }
  write_manifest(dir / "manifest.jsonl", index);
  std::ofstream(dir / "synthconfig.json") << nlohmann::json(cfg).dump(2) << '\n';
  return index;
}

}  // namespace htr

#endif  // HTR_DATASET_HPP_
