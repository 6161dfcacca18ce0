#pragma once

// Bidirectional pre-norm transformer mapping a (partially masked) token
// sequence to per-position log-probabilities over the vocabulary.
//
//   x  = tok_emb[ids] + pos_emb[0..T)
//   x += Wo * attn(LN1(x))            (per layer, no causal mask)
//   x += W2 * gelu(W1 * LN2(x))       (4x expansion)
//   log_probs = log_softmax(LN_f(x) * W_head + b_head)
//
// Padding keys are excluded from attention when a pad id is supplied.
//
// Parameter count for vocab V, width D, length T, L layers:
//   V*D + T*D + L*(12*D^2 + 13*D) + 2*D + D*V + V

#include <atomic>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdlm/autodiff.hpp"
#include "mdlm/diffusion.hpp"
#include "mdlm/rng.hpp"

namespace mdlm {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 128;
  int n_heads = 4;
  int n_layers = 4;
  int max_seq_len = 256;
  double dropout_rate = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  // `j` may omit fields; they keep the values already in `base`.
  static ModelConfig from_json(const nlohmann::json& j, ModelConfig base);
  static ModelConfig from_json(const nlohmann::json& j) { return from_json(j, ModelConfig()); }
  bool operator==(const ModelConfig&) const = default;
};

std::int64_t parameter_count(const ModelConfig& config);

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Var<Scalar> var;
};

struct ForwardOptions {
  bool train = false;             // enables dropout
  RngStream* dropout_rng = nullptr;
  int pad_id = -1;                // keys holding this id are not attended to
};

template <typename Scalar_>
class BasicDenoiser {
 public:
  using Scalar = Scalar_;

  BasicDenoiser(const ModelConfig& config, std::uint64_t init_seed);

  BasicDenoiser(const BasicDenoiser& other);
  BasicDenoiser& operator=(const BasicDenoiser&) = delete;

  const ModelConfig& config() const { return config_; }

  // Declaration order: embeddings, blocks, final norm, output head.
  std::vector<NamedParameter<Scalar>>& parameters() { return params_; }
  const std::vector<NamedParameter<Scalar>>& parameters() const { return params_; }
  std::vector<Var<Scalar>> parameter_vars() const;
  Var<Scalar>& parameter(const std::string& name);
  std::int64_t num_parameters() const;

  void zero_grad();

  // ids: batch x seq_len, row-major. Returns [batch, seq_len, vocab].
  Var<Scalar> forward(std::span<const int> ids, int batch, int seq_len,
                      const ForwardOptions& options = {}) const;
  Var<Scalar> forward(std::span<const CorruptedSequence> batch,
                      const ForwardOptions& options = {}) const;

  std::uint64_t forward_passes() const { return forward_passes_.load(); }
  void reset_forward_passes() { forward_passes_ = 0; }

 private:
  struct Block {
    Var<Scalar> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Var<Scalar> ln2_g, ln2_b, w1, b1, w2, b2;
  };
  void rebuild_views();

  ModelConfig config_;
  std::vector<NamedParameter<Scalar>> params_;
  // Typed views into params_.
  Var<Scalar> tok_emb_, pos_emb_, lnf_g_, lnf_b_, head_w_, head_b_;
  std::vector<Block> blocks_;
  mutable std::atomic<std::uint64_t> forward_passes_{0};
};

using Denoiser = BasicDenoiser<double>;

extern template class BasicDenoiser<double>;
extern template class BasicDenoiser<float>;

// Probability assigned to the clean token at each masked position.
// Positions must belong to the corrupted sequence's mask set.
std::map<int, double> confidence(const Denoiser& model, const CorruptedSequence& corrupted,
                                 const TokenSequence& clean, std::span<const int> positions,
                                 int pad_id = -1);
// All masked positions.
std::map<int, double> confidence(const Denoiser& model, const CorruptedSequence& corrupted,
                                 const TokenSequence& clean, int pad_id = -1);

}  // namespace mdlm
