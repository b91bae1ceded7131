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

// Command-line driver: synth, train, eval, decode, ablate, gradcheck.
//
// Exit codes: 0 success, 1 usage or config error, 2 data error,
// 3 numeric failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "htr/dataset.hpp"
#include "htr/gradcheck.hpp"
#include "htr/trainer.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct RunFlags {
  std::string config;
  std::string manifest;
  std::string val_manifest;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<htr::Preset> preset;
  std::optional<std::size_t> epochs;
  bool no_wall_clock = false;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  const std::map<std::string, htr::Preset> presets{
      {"line", htr::Preset::kLine}, {"word", htr::Preset::kWord}, {"tiny", htr::Preset::kTiny}};
  cmd->add_option("--config", f.config, "JSON training config")->check(CLI::ExistingFile);
  cmd->add_option("--manifest", f.manifest, "training manifest (JSONL)");
  cmd->add_option("--val-manifest", f.val_manifest, "validation manifest (JSONL)");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--preset", f.preset, "line, word or tiny")
      ->transform(CLI::CheckedTransformer(presets, CLI::ignore_case));
  cmd->add_option("--epochs", f.epochs,
                  "total epochs; milestones move to 50% and 75% of the run")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--no-wall-clock", f.no_wall_clock,
                "log wall_seconds as 0 so reruns produce identical metrics.csv");
}

htr::TrainConfig resolve(const RunFlags& f) {
  htr::TrainConfig cfg = f.config.empty() ? htr::TrainConfig{} : htr::load_train_config(f.config);
  if (!f.manifest.empty()) cfg.train_manifest = f.manifest;
  if (!f.val_manifest.empty()) cfg.val_manifest = f.val_manifest;
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (f.seed) cfg.seed = *f.seed;
  if (f.preset) cfg.preset = *f.preset;
  if (f.epochs) cfg.set_epochs(*f.epochs);
  if (f.no_wall_clock) cfg.log_wall_time = false;
  cfg.validate();
  return cfg;
}

void print_report(const htr::Evaluation& e) {
  std::cout << "samples " << e.report.samples.size() << "\ncer " << htr::detail::fixed(e.report.cer, 4)
            << "\nwer " << htr::detail::fixed(e.report.wer, 4) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Handwritten text recognition toolkit"};
  app.require_subcommand(1);

  htr::SynthConfig synth_cfg;
  std::string synth_config, synth_out;
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> synth_count;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dot-matrix line corpus");
  synth->add_option("--config", synth_config, "JSON synthesis config")->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "random seed");
  synth->add_option("--count", synth_count, "number of lines")->check(CLI::PositiveNumber);

  RunFlags train_flags;
  std::string resume;
  auto* train = app.add_subcommand("train", "train a recognizer");
  add_run_flags(train, train_flags);
  train->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  std::string eval_checkpoint, eval_manifest;
  bool eval_strip = false, eval_no_spaces = false;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a manifest");
  eval->add_option("--checkpoint", eval_checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", eval_manifest)->required()->check(CLI::ExistingFile);
  eval->add_flag("--strip-shortcut", eval_strip, "drop the shortcut branch before scoring");
  eval->add_flag("--cer-exclude-spaces", eval_no_spaces, "leave spaces out of the CER");

  std::string decode_checkpoint, decode_path;
  auto* decode = app.add_subcommand("decode", "transcribe a single PGM image");
  decode->add_option("--checkpoint", decode_checkpoint)->required()->check(CLI::ExistingFile);
  decode->add_option("image", decode_path, "binary PGM (P5)")->required()->check(CLI::ExistingFile);

  RunFlags ablate_flags;
  auto* ablate = app.add_subcommand("ablate", "train and score the 8-cell ablation grid");
  add_run_flags(ablate, ablate_flags);

  int grad_seeds = 20;
  std::uint64_t grad_base = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--seeds", grad_seeds, "seeds per op")->check(CLI::PositiveNumber);
  gradcheck->add_option("--seed", grad_base, "first seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) {
      if (!synth_config.empty()) {
        std::ifstream in(synth_config);
        try {
          synth_cfg = nlohmann::json::parse(in).get<htr::SynthConfig>();
        } catch (const nlohmann::json::exception& e) {
          throw htr::ConfigError(synth_config + ": " + e.what());
        }
      }
      if (synth_seed) synth_cfg.seed = *synth_seed;
      if (synth_count) synth_cfg.size = *synth_count;
      synth_cfg.validate();
      const auto index = htr::synth_generate(synth_cfg, synth_out);
      std::cout << "wrote " << index.size() << " lines to " << (fs::path(synth_out) / "manifest.jsonl").string() << '\n';
    } else if (*train) {
      htr::TrainOptions opts;
      if (!resume.empty()) opts.resume = resume;
      const auto result = htr::train(resolve(train_flags), opts);
      std::cout << "best cer " << htr::detail::fixed(result.best_cer, 4) << "\nskipped "
                << result.skipped_samples << "\ncheckpoint " << result.best_checkpoint.string()
                << '\n';
    } else if (*eval) {
      print_report(htr::evaluate(eval_checkpoint, eval_manifest, eval_strip,
                                 {.count_spaces = !eval_no_spaces}));
    } else if (*decode) {
      std::cout << htr::decode_image(decode_checkpoint, decode_path) << '\n';
    } else if (*ablate) {
      const htr::TrainConfig cfg = resolve(ablate_flags);
      htr::ablate(cfg);
      std::ifstream table(fs::path(cfg.out_dir) / "ablation.csv");
      std::cout << table.rdbuf();
    } else if (*gradcheck) {
      bool ok = true;
      for (const auto& r : htr::run_gradcheck_suite(grad_seeds, grad_base)) {
        std::printf("%-18s seeds %3d  worst rel err %.3e  %s\n", r.op.c_str(), r.seeds,
                    r.worst_rel_error, r.passed() ? "ok" : "FAIL");
        ok = ok && r.passed();
      }
      return ok ? kOk : kNumeric;
    }
  } catch (const htr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const htr::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const htr::ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const htr::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kOk;
}
