#include "mdlm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mdlm/errors.hpp"

namespace mdlm {

std::string rho_kind_name(RhoStrategy::Kind kind) {
  switch (kind) {
    case RhoStrategy::Kind::kUniform: return "uniform";
    case RhoStrategy::Kind::kFixed: return "fixed";
    case RhoStrategy::Kind::kTruncatedUniform: return "truncated_uniform";
  }
  throw ConfigError("unknown rho kind");
}

RhoStrategy::Kind parse_rho_kind(std::string_view name) {
  if (name == "uniform") return RhoStrategy::Kind::kUniform;
  if (name == "fixed") return RhoStrategy::Kind::kFixed;
  if (name == "truncated_uniform") return RhoStrategy::Kind::kTruncatedUniform;
  throw ConfigError("unknown rho kind '" + std::string(name) + "'");
}

void RhoStrategy::validate() const {
  if (kind != Kind::kUniform && !(k > 0.0 && k < 1.0)) {
    throw ConfigError("rho.k must lie in (0, 1), got " + std::to_string(k));
  }
}

nlohmann::json RhoStrategy::to_json() const { return {{"kind", rho_kind_name(kind)}, {"k", k}}; }

RhoStrategy RhoStrategy::from_json(const nlohmann::json& j) {
  RhoStrategy s;
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") {
      s.kind = parse_rho_kind(value.get<std::string>());
    } else if (key == "k") {
      s.k = value.get<double>();
    } else {
      throw ConfigError("unknown key rho." + key);
    }
  }
  s.validate();
  return s;
}

double sample_rho(const RhoStrategy& strategy, double t, RngStream& rng) {
  strategy.validate();
  const double room = std::max(0.0, 1.0 - t);
  switch (strategy.kind) {
    case RhoStrategy::Kind::kUniform: return rng.uniform() * room;
    case RhoStrategy::Kind::kFixed: return std::min(strategy.k, room);
    case RhoStrategy::Kind::kTruncatedUniform: {
      const double lo = std::min(strategy.k, room);
      return lo + (room - lo) * rng.uniform();
    }
  }
  throw ConfigError("unknown rho kind");
}

TimestepDraw sample_timestep(const RhoStrategy& strategy, RngStream& t_rng, RngStream& rho_rng,
                             double t_min) {
  if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigError("t_min must lie in (0, 1)");
  TimestepDraw draw;
  draw.t = t_min + (1.0 - t_min) * t_rng.uniform();
  draw.rho = sample_rho(strategy, draw.t, rho_rng);
  return draw;
}

CorruptedSequence corrupt(const TokenSequence& clean, double rate, int mask_id, RngStream& rng,
                          MaskingMode mode) {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw ContractError("masking rate must lie in [0, 1], got " + std::to_string(rate));
  }
  CorruptedSequence out{clean.ids, {}, rate};
  if (mode == MaskingMode::kBernoulli) {
    for (int pos = clean.response_begin(); pos < clean.response_end(); ++pos) {
      if (rng.uniform() < rate) {
        out.ids[pos] = mask_id;
        out.mask_set.push_back(pos);
      }
    }
    return out;
  }
  const int count = static_cast<int>(std::lround(rate * clean.response_len));
  std::vector<int> positions(clean.response_len);
  std::iota(positions.begin(), positions.end(), clean.response_begin());
  // Partial Fisher-Yates.
  for (int i = 0; i < count; ++i) {
    const auto j = i + static_cast<int>(rng.below(positions.size() - i));
    std::swap(positions[i], positions[j]);
  }
  positions.resize(count);
  std::sort(positions.begin(), positions.end());
  for (int pos : positions) out.ids[pos] = mask_id;
  out.mask_set = std::move(positions);
  return out;
}

CorruptedSequence corrupt_with_probabilities(const TokenSequence& clean,
                                             std::span<const double> probabilities, int mask_id,
                                             RngStream& rng, double source_t) {
  if (static_cast<int>(probabilities.size()) != clean.response_len) {
    throw ContractError("one masking probability per response position required");
  }
  CorruptedSequence out{clean.ids, {}, source_t};
  for (int i = 0; i < clean.response_len; ++i) {
    if (rng.uniform() < probabilities[i]) {
      const int pos = clean.response_begin() + i;
      out.ids[pos] = mask_id;
      out.mask_set.push_back(pos);
    }
  }
  return out;
}

CorruptedSequence fully_masked(const TokenSequence& clean, int mask_id) {
  CorruptedSequence out{clean.ids, {}, 1.0};
  for (int pos = clean.response_begin(); pos < clean.response_end(); ++pos) {
    out.ids[pos] = mask_id;
    out.mask_set.push_back(pos);
  }
  return out;
}

CorruptedSequence unmask_positions(const CorruptedSequence& corrupted, const TokenSequence& clean,
                                   std::span<const int> positions) {
  std::vector<int> drop(positions.begin(), positions.end());
  std::sort(drop.begin(), drop.end());
  if (std::adjacent_find(drop.begin(), drop.end()) != drop.end()) {
    throw ContractError("unmask_positions: duplicate position");
  }
  if (!std::includes(corrupted.mask_set.begin(), corrupted.mask_set.end(), drop.begin(),
                     drop.end())) {
    throw ContractError("unmask_positions: position outside the mask set");
  }
  CorruptedSequence out = corrupted;
  for (int pos : drop) out.ids[pos] = clean.ids[pos];
  out.mask_set.clear();
  std::set_difference(corrupted.mask_set.begin(), corrupted.mask_set.end(), drop.begin(),
                      drop.end(), std::back_inserter(out.mask_set));
  return out;
}

void validate_corrupted(const CorruptedSequence& corrupted, const TokenSequence& clean,
                        int mask_id) {
  if (corrupted.ids.size() != clean.ids.size()) throw ContractError("length mismatch");
  if (!std::is_sorted(corrupted.mask_set.begin(), corrupted.mask_set.end())) {
    throw ContractError("mask set not sorted");
  }
  std::size_t next = 0;
  for (int pos = 0; pos < clean.length(); ++pos) {
    const bool in_set = next < corrupted.mask_set.size() && corrupted.mask_set[next] == pos;
    if (in_set) ++next;
    const bool masked = corrupted.ids[pos] == mask_id;
    if (masked != in_set) throw ContractError("mask set disagrees with [MASK] positions");
    if (masked && !clean.is_response(pos)) {
      throw ContractError("mask outside the response span");
    }
    if (!masked && corrupted.ids[pos] != clean.ids[pos]) {
      throw ContractError("unmasked position differs from the clean sequence");
    }
  }
  if (next != corrupted.mask_set.size()) throw ContractError("mask set has stray entries");
}

}  // namespace mdlm
