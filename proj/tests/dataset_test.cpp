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

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <unistd.h>

#include "htr/alphabet.hpp"
#include "htr/dataset.hpp"

namespace htr {
namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() /
            ("htr_dataset_" + std::to_string(::getpid()) + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::string pgm(std::size_t w, std::size_t h, int maxval, const std::string& payload) {
  return "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n" + std::to_string(maxval) +
         "\n" + payload;
}

TEST(AlphabetTest, BlankReservedAndLookup) {
  const Alphabet a = Alphabet::from_chars(" a");
  EXPECT_EQ(a.size(), 3u);
  EXPECT_EQ(a.encode("a"), (std::vector<int>{2}));
  EXPECT_THROW(a.encode(""), DataError);
  EXPECT_THROW(a.encode("b"), DataError);
  const std::vector<int> blank{0};
  EXPECT_THROW(a.decode(blank), std::exception);
  EXPECT_EQ(Alphabet::desk().size(), 28u);
}

TEST(AlphabetTest, UnicodeRoundTrip) {
  const Alphabet a = Alphabet::from_chars(" aé€");
  const std::vector<int> ids = a.encode("é€ a");
  EXPECT_EQ(ids.size(), 4u);
  EXPECT_EQ(a.decode(ids), "é€ a");
}

TEST(AlphabetTest, RequiresSpaceAndUniqueness) {
  EXPECT_THROW(Alphabet::from_chars("ab"), ConfigError);
  EXPECT_THROW(Alphabet(std::vector<std::string>{" ", "a", "a"}), ConfigError);
}

TEST(GlyphAtlasTest, WellFormed) {
  const auto& atlas = glyph_atlas();
  EXPECT_EQ(atlas[0].first, ' ');
  for (const auto& [ch, bitmap] : atlas) {
    for (const char* row : bitmap) {
      ASSERT_EQ(std::string(row).size(), kGlyphWidth) << ch;
      for (const char* p = row; *p; ++p) ASSERT_TRUE(*p == '#' || *p == '.') << ch;
    }
  }
  for (char c = 'a'; c <= 'z'; ++c) EXPECT_NO_THROW(glyph(c));
  EXPECT_THROW(glyph('A'), DataError);
}

// Exhaustive pairwise Hamming distance over the 27 bitmaps.
TEST(GlyphAtlasTest, PairwiseDistinct) {
  const auto& atlas = glyph_atlas();
  ASSERT_EQ(atlas.size(), 27u);
  for (std::size_t i = 0; i < atlas.size(); ++i) {
    for (std::size_t j = i + 1; j < atlas.size(); ++j) {
      int hamming = 0;
      for (std::size_t y = 0; y < kGlyphHeight; ++y)
        for (std::size_t x = 0; x < kGlyphWidth; ++x)
          hamming += atlas[i].second[y][x] != atlas[j].second[y][x];
      EXPECT_GT(hamming, 0) << atlas[i].first << " vs " << atlas[j].first;
    }
  }
}

TEST(PgmTest, InvertsLightBackground) {
  const std::string bytes = pgm(2, 2, 255, std::string("\x00\xff\x00\xff", 4));
  EXPECT_EQ(decode_pgm(bytes).pixels, (std::vector<float>{1, 0, 1, 0}));
  EXPECT_EQ(decode_pgm(bytes, Polarity::kKeep).pixels, (std::vector<float>{0, 1, 0, 1}));
}

TEST(PgmTest, KeepsDarkBackground) {
  const std::string bytes = pgm(3, 1, 255, std::string("\x00\x00\xff", 3));
  EXPECT_EQ(decode_pgm(bytes).pixels, (std::vector<float>{0, 0, 1}));
}

TEST(PgmTest, ScalesByMaxval) {
  const std::string bytes = pgm(3, 1, 15, std::string("\x00\x03\x0f", 3));
  const RawImage img = decode_pgm(bytes, Polarity::kKeep);
  EXPECT_FLOAT_EQ(img.pixels[1], 3.0f / 15.0f);
  EXPECT_FLOAT_EQ(img.pixels[2], 1.0f);
}

TEST(PgmTest, HeaderComments) {
  const std::string bytes = "P5\n# made by hand\n2 1\n255\n" + std::string("\x00\x10", 2);
  EXPECT_EQ(decode_pgm(bytes, Polarity::kKeep).width, 2u);
}

TEST(PgmTest, Rejections) {
  EXPECT_THROW(decode_pgm(pgm(2, 2, 255, std::string(3, '\0'))), DataError);
  EXPECT_THROW(decode_pgm("P2\n1 1\n255\n0"), DataError);
  EXPECT_THROW(decode_pgm(pgm(0, 2, 255, "")), DataError);
  EXPECT_THROW(decode_pgm(pgm(1, 1, 256, std::string(2, '\0'))), DataError);
  EXPECT_THROW(decode_pgm(pgm(1, 1, 10, "\x0b")), DataError);
  EXPECT_THROW(decode_pgm("P5\n"), DataError);
}

TEST(PgmTest, WriteReadRoundTrip) {
  TempDir dir;
  RawImage img(3, 4);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(i % 3) / 255.0f;
  img.pixels[5] = 1.0f;
  write_image(dir.path() / "x.pgm", img);
  // 1 - (255 - k) / 255 and k / 255 can differ in the last float bit.
  const RawImage back = read_image(dir.path() / "x.pgm");
  ASSERT_EQ(back.height, img.height);
  ASSERT_EQ(back.width, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 1e-6f);
  EXPECT_THROW(read_image(dir.path() / "missing.pgm"), DataError);
}

TEST(ManifestTest, LoadsValidRecords) {
  TempDir dir;
  write_text(dir.path() / "m.jsonl",
             "{\"image\": \"a.pgm\", \"text\": \"ab c\"}\n\n{\"image\": \"b.pgm\", \"text\": \"z\"}\n");
  const DatasetIndex idx = load_manifest(dir.path() / "m.jsonl", Alphabet::desk(), "val");
  EXPECT_EQ(idx.size(), 2u);
  EXPECT_EQ(idx.split, "val");
  EXPECT_EQ(idx.resolve(idx.entries[1]), dir.path() / "b.pgm");
}

void expect_manifest_error(const std::string& body, const std::string& needle) {
  const fs::path p = fs::temp_directory_path() / ("htr_manifest_" + std::to_string(::getpid()));
  write_text(p, body);
  try {
    load_manifest(p, Alphabet::from_chars(" abc"));
    ADD_FAILURE() << "expected DataError for: " << body;
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
  fs::remove(p);
}

TEST(ManifestTest, ErrorsNameTheLine) {
  const std::string ok = "{\"image\": \"a.pgm\", \"text\": \"abc\"}\n";
  expect_manifest_error(ok + "{\"image\": \"b.pgm\", \"text\": \"\"}\n", ":2: ");
  expect_manifest_error(ok + ok + "{\"image\": \"b.pgm\", \"text\": \"a€\"}\n", ":3: ");
  expect_manifest_error("{\"image\": \"b.pgm\", \"text\": \"a€\"}\n", "€");
  expect_manifest_error("not json\n", ":1: ");
  expect_manifest_error("{\"image\": 3, \"text\": \"a\"}\n", ":1: ");
  expect_manifest_error("{\"text\": \"a\"}\n", ":1: ");
  EXPECT_THROW(load_manifest("/nonexistent/m.jsonl", Alphabet::desk()), DataError);
}

TEST(ManifestTest, WriteLoadRoundTrip) {
  TempDir dir;
  DatasetIndex idx;
  idx.entries = {{"images/0.pgm", "one two"}, {"images/1.pgm", "a \"quoted\" x"}};
  write_manifest(dir.path() / "m.jsonl", idx);
  const Alphabet a = Alphabet::from_chars(" abcdefghijklmnopqrstuvwxyz\"");
  EXPECT_EQ(load_manifest(dir.path() / "m.jsonl", a), idx);
}

TEST(SynthTest, LayoutBound) {
  std::mt19937_64 rng(1);
  const RawImage img = render_line("ab", 0.0, rng);
  EXPECT_GE(img.width, 2 * kGlyphWidth * SynthConfig::kScale);
  EXPECT_EQ(img.height, kGlyphHeight * SynthConfig::kScale + 2 * SynthConfig::kBaselineJitter +
                            2 * SynthConfig::kMargin);
  float ink = 0.0f;
  for (float v : img.pixels) ink += v;
  EXPECT_GT(ink, 0.0f);
}

TEST(SynthTest, InkMatchesAtlasWithoutJitter) {
  std::mt19937_64 rng(2);
  const RawImage img = render_line("l", 0.0, rng);
  std::size_t dots = 0;
  for (const char* row : glyph('l'))
    for (const char* p = row; *p; ++p) dots += *p == '#';
  std::size_t lit = 0;
  for (float v : img.pixels) lit += v > 0.5f;
  EXPECT_EQ(lit, dots * SynthConfig::kScale * SynthConfig::kScale);
}

TEST(SynthTest, DeterministicCorpus) {
  TempDir a, b;
  SynthConfig cfg;
  cfg.size = 6;
  synth_generate(cfg, a.path());
  synth_generate(cfg, b.path());
  for (const auto& entry : fs::directory_iterator(a.path() / "images")) {
    EXPECT_EQ(slurp(entry.path()), slurp(b.path() / "images" / entry.path().filename()));
  }
  EXPECT_EQ(slurp(a.path() / "manifest.jsonl"), slurp(b.path() / "manifest.jsonl"));
  EXPECT_EQ(slurp(a.path() / "synthconfig.json"), slurp(b.path() / "synthconfig.json"));

  cfg.seed = 8;
  const auto other = synth_samples(cfg);
  const auto base = synth_samples(SynthConfig{.size = 6});
  bool differs = false;
  for (std::size_t i = 0; i < base.size(); ++i) differs |= base[i].text != other[i].text;
  EXPECT_TRUE(differs);
}

TEST(SynthTest, CorpusLoadsBackAndEncodes) {
  TempDir dir;
  SynthConfig cfg;
  cfg.size = 20;
  const auto samples = synth_samples(cfg);
  synth_generate(cfg, dir.path());
  const Alphabet alphabet = Alphabet::desk();
  const auto loaded = load_samples(load_manifest(dir.path() / "manifest.jsonl", alphabet));
  ASSERT_EQ(loaded.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(loaded[i].text, samples[i].text);
    EXPECT_EQ(loaded[i].image, samples[i].image);
    const auto ids = alphabet.encode(pad_transcript(samples[i].text, Mode::kTrain));
    EXPECT_EQ(alphabet.decode(ids), " " + samples[i].text + " ");
  }
}

TEST(SynthTest, ConfigValidation) {
  EXPECT_THROW(synth_samples(SynthConfig{.size = 0}), ConfigError);
  EXPECT_THROW(synth_samples(SynthConfig{.letters = "aB"}), ConfigError);
  EXPECT_THROW(synth_samples(SynthConfig{.min_words = 3, .max_words = 2}), ConfigError);
}

}  // namespace
}  // namespace htr
