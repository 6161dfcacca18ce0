#pragma once

// Versioned binary checkpoint container. Layout (little-endian):
//
//   magic "MDLMCKPT" | u32 version
//   ModelConfig: u32 vocab_size, d_model, n_heads, n_layers, max_seq_len; f64 dropout_rate
//   u64 parameter count, then per parameter in declaration order:
//     u32 name length, name bytes, u32 rank, u64 dims[rank], f64 data[numel]
//   optimizer: u64 step, u8 has_moments, then (if set) first and second
//     moments for every parameter as f64 data in parameter order
//   u64 length + trainer state bytes (JSON text)
//   u64 FNV-1a checksum of every preceding byte
//
// Values are stored as raw IEEE doubles so save/load round-trips bit-exactly.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mdlm/denoiser.hpp"

namespace mdlm {

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<Tensor<double>> first_moment;
  std::vector<Tensor<double>> second_moment;

  bool operator==(const OptimizerState& other) const;
};

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor<double>> tensors;
  OptimizerState optimizer;
  std::string trainer_state;  // opaque JSON owned by the trainer
};

Checkpoint make_checkpoint(const Denoiser& model, const OptimizerState& optimizer = {},
                           std::string trainer_state = "{}");
// Builds a model whose parameters are the checkpoint's tensors.
Denoiser model_from_checkpoint(const Checkpoint& checkpoint);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& bytes);

}  // namespace mdlm
