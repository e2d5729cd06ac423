#pragma once

// Run configuration: a flat text file of `section.key = value` lines.
//
//   # comment
//   seed = 3
//   bt.lambda_x = 0.01
//   model.width = 32
//
// Unknown keys and malformed values are errors.

#include "e2ebt/data.hpp"
#include "e2ebt/model.hpp"
#include "e2ebt/trainer.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace e2ebt {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunPaths {
  std::filesystem::path data = "data";  // corpus directory written by gen-data
  std::filesystem::path work = "work";  // checkpoints
  std::filesystem::path metrics;        // defaults to <work>/metrics.jsonl

  std::filesystem::path vocab() const { return data / "vocab.txt"; }
  std::filesystem::path lm(const std::string& side) const { return work / ("lm_" + side + ".ckpt"); }
  std::filesystem::path nmt(const std::string& direction) const { return work / ("nmt_" + direction + ".ckpt"); }
  std::filesystem::path bt() const { return work / "bt.ckpt"; }
  std::filesystem::path metrics_file() const { return metrics.empty() ? work / "metrics.jsonl" : metrics; }
};

struct RunConfig {
  RunConfig();

  std::uint64_t seed = 1;
  RunPaths paths;
  SyntheticTaskSpec data;
  int length_cap = 50;
  ModelDims model;  // translation models; vocab comes from the corpus
  ModelDims lm;     // language models (decoder layers only)
  PretrainConfig pretrain;
  PretrainConfig lm_pretrain;
  BTConfig bt;  // bt.as_total_iters = 0 follows bt.max_iters
  long log_interval = 1;
  long checkpoint_interval = 500;
  int beam = 5;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  // Applies every assignment in a config text. Line numbers appear in errors.
  void apply_text(const std::string& text, const std::string& origin = "config");
  void apply_file(const std::filesystem::path& path);
  // Full dump, one key per line, readable by apply_text.
  std::string to_text() const;

  // BTConfig with the seed and the AS horizon filled in.
  BTConfig resolved_bt() const;
  PretrainConfig resolved_pretrain() const;
  PretrainConfig resolved_lm_pretrain() const;
};

// Defaults, then the E2EBT_SEED environment variable, then the file, then
// `key=value` overrides.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides);

}  // namespace e2ebt
