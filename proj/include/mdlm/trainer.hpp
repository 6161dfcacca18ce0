#pragma once

// Optimization loop: AdamW with bias correction, global-norm clipping,
// gradient accumulation, a linear learning-rate decay to zero, periodic
// checkpoints with bit-identical resume, and JSON-lines step logs.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdlm/checkpoint.hpp"
#include "mdlm/objectives.hpp"

namespace mdlm {

inline constexpr const char* kCodeVersion = "mdlm 0.1.0";

struct TrainConfig {
  double learning_rate = 7e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double max_grad_norm = 1.0;
  int grad_accum_steps = 1;
  int batch_size = 32;
  int epochs = 30;
  std::uint64_t seed = 0;
  int checkpoint_every = 500;
  ObjectiveSpec objective;
  // Per-objective learning rates keyed by objective name; unset kinds use
  // learning_rate.
  std::map<std::string, double> objective_learning_rates;

  void validate() const;
  double base_learning_rate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig()); }
};

// Linear decay: lr * (1 - step / total_steps), reaching 0 at step == total_steps.
double linear_schedule(double base_lr, std::int64_t step, std::int64_t total_steps);

// Scales `grads` in place so their global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_global_norm(std::span<Tensor<double>> grads, double max_norm);

// One AdamW update (decoupled weight decay, bias correction). Gradients are
// clipped to config.max_grad_norm first. Returns the pre-clip norm.
double adam_step(std::span<Var<double>> params, std::span<Tensor<double>> grads,
                 OptimizerState& state, const TrainConfig& config, double learning_rate);

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double t_mean = 0.0;
  double rho_mean = 0.0;
  int regime_counts[3] = {0, 0, 0};  // bottom, vanilla, top
  double loss = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
  int examples = 0;
  int skipped_examples = 0;
  bool skipped = false;
  std::uint64_t forward_passes = 0;

  nlohmann::json to_json() const;
};

struct TrainerState {
  int epoch = 0;
  int micro_batch = 0;  // next micro-batch within the epoch
  std::int64_t step = 0;
  std::vector<std::string> rng_states;

  nlohmann::json to_json() const;
  static TrainerState from_json(const nlohmann::json& j);
};

struct RunManifest {
  nlohmann::json config;
  std::uint64_t vocab_hash = 0;
  std::uint64_t corpus_hash = 0;
  std::string code_version = kCodeVersion;
  std::vector<StepRecord> records;

  nlohmann::json to_json() const;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // logs, manifest, checkpoints
  const Checkpoint* resume = nullptr;
  std::int64_t stop_after_step = -1;  // stop early (for resume tests); -1 = full run
  std::function<void(const StepRecord&)> on_step;
  nlohmann::json manifest_config;  // echoed into the manifest; defaults to config.to_json()
  std::uint64_t vocab_hash = 0;
  std::uint64_t corpus_hash = 0;
};

struct TrainResult {
  Checkpoint checkpoint;  // final model + optimizer + trainer state
  RunManifest manifest;
  TrainerState state;
};

std::int64_t total_optimizer_steps(const TrainConfig& config, std::size_t dataset_size);

// Trains `model` in place. Throws NumericError on a non-finite loss or
// gradient after logging a diagnostic record.
TrainResult train(const TrainConfig& config, std::span<const TokenSequence> data, SpecialIds ids,
                  Denoiser& model, const TrainOptions& options = {});

}  // namespace mdlm
