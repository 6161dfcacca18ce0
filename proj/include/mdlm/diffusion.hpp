#pragma once

// Forward corruption for masked diffusion with the linear schedule
// alpha_t = 1 - t: each response token is replaced by [MASK] independently
// with probability t. Prompt and padding positions are never masked.

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdlm/corpus.hpp"
#include "mdlm/rng.hpp"

namespace mdlm {

// Lower bound on sampled diffusion time; keeps the 1/t weight bounded.
inline constexpr double kDefaultTMin = 1e-3;

struct SpecialIds {
  int mask_id = -1;
  int pad_id = -1;
};

inline SpecialIds special_ids(const Vocabulary& vocab) { return {vocab.mask_id(), vocab.pad_id()}; }

// How the secondary ratio rho is drawn given t:
//   uniform            rho ~ U(0, 1-t)
//   fixed(k)           rho = min(k, 1-t)
//   truncated_uniform  rho ~ U over [min(k, 1-t), 1-t]
// The truncated form reads the bounds of the "U(1-t, k)" ablation as an
// unordered pair clamped to the feasible range [0, 1-t].
struct RhoStrategy {
  enum class Kind { kUniform, kFixed, kTruncatedUniform };
  Kind kind = Kind::kUniform;
  double k = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static RhoStrategy from_json(const nlohmann::json& j);
  bool operator==(const RhoStrategy&) const = default;
};

std::string rho_kind_name(RhoStrategy::Kind kind);
RhoStrategy::Kind parse_rho_kind(std::string_view name);

struct TimestepDraw {
  double t = 1.0;
  double rho = 0.0;
};

double sample_rho(const RhoStrategy& strategy, double t, RngStream& rng);

// t ~ U[t_min, 1) from `t_rng`, then rho from `rho_rng`.
TimestepDraw sample_timestep(const RhoStrategy& strategy, RngStream& t_rng, RngStream& rho_rng,
                             double t_min = kDefaultTMin);

struct CorruptedSequence {
  std::vector<int> ids;
  std::vector<int> mask_set;  // sorted
  double source_t = 0.0;

  bool operator==(const CorruptedSequence&) const = default;
};

enum class MaskingMode { kBernoulli, kExactCount };

// Draws one uniform per response position, in order, in Bernoulli mode.
// Exact-count mode masks round(rate * response_len) positions chosen
// uniformly without replacement.
CorruptedSequence corrupt(const TokenSequence& clean, double rate, int mask_id, RngStream& rng,
                          MaskingMode mode = MaskingMode::kBernoulli);

// Bernoulli masking with a per-response-position probability.
CorruptedSequence corrupt_with_probabilities(const TokenSequence& clean,
                                             std::span<const double> probabilities, int mask_id,
                                             RngStream& rng, double source_t);

// Every response position masked; consumes no randomness.
CorruptedSequence fully_masked(const TokenSequence& clean, int mask_id);

// Restores clean ids at `positions`, which must lie in the mask set.
CorruptedSequence unmask_positions(const CorruptedSequence& corrupted, const TokenSequence& clean,
                                   std::span<const int> positions);

// Throws ContractError if the mask-set / ids / span invariants fail.
void validate_corrupted(const CorruptedSequence& corrupted, const TokenSequence& clean, int mask_id);

}  // namespace mdlm
