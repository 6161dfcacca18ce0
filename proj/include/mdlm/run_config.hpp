#pragma once

// The run configuration file: one JSON document with the sections corpus,
// model, train, decode and analysis. Every field is optional; unknown keys
// are rejected.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "mdlm/analysis.hpp"
#include "mdlm/corpus.hpp"
#include "mdlm/denoiser.hpp"
#include "mdlm/sampler.hpp"
#include "mdlm/trainer.hpp"

namespace mdlm {

struct CorpusConfig {
  Task task = Task::kAdditionCot;
  int train_size = 2000;
  int eval_size = 200;
  Tokenization tokenization = Tokenization::kChar;
  SyntheticOptions synthetic;
  // Sequences at or above this many tokens are dropped.
  int max_len = 256;

  void validate() const;
  nlohmann::json to_json() const;
  static CorpusConfig from_json(const nlohmann::json& j, CorpusConfig base);
};

struct AnalysisConfig {
  int samples_per_example = 4;
  int time_bins = 8;
  // "log": freq_bins log-spaced bins between the smallest and largest
  // nonzero response-token frequency. "decade": 1, 10, ..., 10^5, inf.
  std::string freq_binning = "log";
  int freq_bins = 4;
  int top_tokens = 5;
  int max_examples = 0;  // 0 = whole corpus

  void validate() const;
  nlohmann::json to_json() const;
  static AnalysisConfig from_json(const nlohmann::json& j, AnalysisConfig base);
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  CorpusConfig corpus;
  ModelConfig model;  // vocab_size 0 = taken from the vocabulary
  TrainConfig train;
  DecodeConfig decode;
  AnalysisConfig analysis;

  RunConfig();

  void validate() const;
  nlohmann::json to_json() const;
  // Fills unspecified fields from the defaults. When decode.gen_len is not
  // given it becomes the task's response width, and decode.steps, when also
  // absent, the fewest steps that cover it.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  // Seeds every stream that the run consumes from `seed`.
  void set_seed(std::uint64_t s);
};

// The seeded train/eval split a run trains and evaluates on, with sequences
// at or above corpus.max_len dropped.
CorpusSplit make_corpus(const RunConfig& cfg);

// Frequency and time edges for an analysis run. Log frequency bins span the
// smallest and largest nonzero token frequencies of `vocab`.
GridSpec make_grid(const AnalysisConfig& cfg, const Vocabulary& vocab);

}  // namespace mdlm
