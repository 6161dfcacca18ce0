#pragma once

// Reverse-diffusion decoding and task evaluation.
//
// The response starts fully masked. Each step runs one forward pass over the
// whole sequence and commits up to tokens_per_step masked positions: the
// most confident ones (confidence strategy) or uniformly random ones. A
// committed token is never revisited.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdlm/corpus.hpp"
#include "mdlm/denoiser.hpp"

namespace mdlm {

enum class RemaskStrategy { kConfidence, kRandom };

std::string remask_name(RemaskStrategy strategy);
RemaskStrategy parse_remask(std::string_view name);

struct DecodeConfig {
  int gen_len = 64;
  int steps = 32;
  int tokens_per_step = 2;
  double temperature = 0.0;
  RemaskStrategy remask = RemaskStrategy::kConfidence;

  // steps * tokens_per_step must cover gen_len.
  void validate() const;
  nlohmann::json to_json() const;
  static DecodeConfig from_json(const nlohmann::json& j, DecodeConfig base);
  static DecodeConfig from_json(const nlohmann::json& j) { return from_json(j, DecodeConfig()); }
  bool operator==(const DecodeConfig&) const = default;
};

// Called after every step with the full batch of ids (batch x length).
using StepObserver = std::function<void(int step, std::span<const int> ids)>;

// Decodes gen_len tokens after each prompt. Prompts must share one length.
// Returns prompt + response for each prompt. Deterministic at temperature 0;
// otherwise draws from `rng` in a fixed order.
std::vector<TokenSequence> generate_batch(const Denoiser& model,
                                          std::span<const std::vector<int>> prompts,
                                          const DecodeConfig& config, SpecialIds ids,
                                          RngStream& rng, const StepObserver& observer = {});

TokenSequence generate(const Denoiser& model, std::span<const int> prompt,
                       const DecodeConfig& config, SpecialIds ids, RngStream& rng,
                       const StepObserver& observer = {});

// Unbiased estimator 1 - C(n-c, k) / C(n, k).
double pass_at_k(int n, int c, int k);

struct EvalRecord {
  std::string prompt;
  std::string canonical;
  std::vector<std::string> generations;
  std::vector<bool> correct;
  int num_correct = 0;
};

struct EvalReport {
  int samples_per_prompt = 1;
  double accuracy = 0.0;  // mean first-sample correctness
  std::map<int, double> pass_at_k;
  std::map<int, double> avg_at_k;
  std::vector<EvalRecord> records;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row(const std::string& label, std::uint64_t seed) const;
};

// Runs max(k_list) generations per prompt. Generation is split into chunks of
// equal-length prompts, each with its own derived RNG, so the report does not
// depend on `threads`.
EvalReport evaluate(const Denoiser& model, const Vocabulary& vocab,
                    std::span<const TextExample> eval_set, const DecodeConfig& config,
                    std::span<const int> k_list, std::uint64_t seed, int threads = 1);

}  // namespace mdlm
