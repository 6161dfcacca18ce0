#include <doctest.h>

#include <cmath>

#include "mdlm/diffusion.hpp"
#include "mdlm/errors.hpp"

using namespace mdlm;

namespace {

TokenSequence clean_sequence(int prompt_len, int response_len) {
  TokenSequence s;
  for (int i = 0; i < prompt_len + response_len; ++i) s.ids.push_back(i % 5);
  s.prompt_len = prompt_len;
  s.response_len = response_len;
  return s;
}

constexpr int kMask = 9;

}  // namespace

TEST_CASE("rho strategies stay within [0, 1 - t]") {
  RngStream rng(1);
  for (auto kind : {RhoStrategy::Kind::kUniform, RhoStrategy::Kind::kFixed,
                    RhoStrategy::Kind::kTruncatedUniform}) {
    const RhoStrategy s{kind, 0.3};
    for (int i = 0; i < 2000; ++i) {
      const double t = rng.uniform();
      const double rho = sample_rho(s, t, rng);
      CHECK(rho >= 0.0);
      CHECK(rho <= 1.0 - t + 1e-15);
      if (kind == RhoStrategy::Kind::kFixed) CHECK(rho == std::min(0.3, 1.0 - t));
      if (kind == RhoStrategy::Kind::kTruncatedUniform) CHECK(rho >= std::min(0.3, 1.0 - t));
    }
  }
}

TEST_CASE("uniform rho has mean (1 - t) / 2") {
  RngStream rng(2);
  const RhoStrategy s;
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sum += sample_rho(s, 0.4, rng);
  // sd of U(0, 0.6) is 0.6 / sqrt(12)
  CHECK(std::abs(sum / n - 0.3) < 3.0 * 0.6 / std::sqrt(12.0 * n));
}

TEST_CASE("rho strategy validation and JSON") {
  CHECK_THROWS_AS((RhoStrategy{RhoStrategy::Kind::kFixed, 0.0}.validate()), ConfigError);
  CHECK_THROWS_AS((RhoStrategy{RhoStrategy::Kind::kFixed, 1.0}.validate()), ConfigError);
  const RhoStrategy s{RhoStrategy::Kind::kTruncatedUniform, 0.2};
  CHECK(RhoStrategy::from_json(s.to_json()) == s);
  CHECK_THROWS_AS(RhoStrategy::from_json({{"kind", "uniform"}, {"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(parse_rho_kind("gaussian"), ConfigError);
}

TEST_CASE("timesteps lie in [t_min, 1)") {
  RngStream a(3), b(4);
  for (int i = 0; i < 10000; ++i) {
    const auto d = sample_timestep(RhoStrategy{}, a, b, 0.05);
    CHECK(d.t >= 0.05);
    CHECK(d.t < 1.0);
    CHECK(d.t + d.rho <= 1.0 + 1e-15);
  }
}

TEST_CASE("corruption touches only response positions") {
  const auto clean = clean_sequence(4, 12);
  RngStream rng(5);
  for (double rate : {0.0, 0.3, 1.0}) {
    const auto c = corrupt(clean, rate, kMask, rng);
    validate_corrupted(c, clean, kMask);
    for (int i = 0; i < clean.length(); ++i) {
      const bool masked = std::binary_search(c.mask_set.begin(), c.mask_set.end(), i);
      CHECK(c.ids[i] == (masked ? kMask : clean.ids[i]));
      if (!clean.is_response(i)) CHECK_FALSE(masked);
    }
    if (rate == 0.0) CHECK(c.mask_set.empty());
    if (rate == 1.0) CHECK(static_cast<int>(c.mask_set.size()) == clean.response_len);
  }
  CHECK_THROWS_AS(corrupt(clean, 1.5, kMask, rng), ContractError);
}

TEST_CASE("exact-count masking") {
  const auto clean = clean_sequence(2, 10);
  RngStream rng(6);
  const auto c = corrupt(clean, 0.34, kMask, rng, MaskingMode::kExactCount);
  CHECK(c.mask_set.size() == 3);
  validate_corrupted(c, clean, kMask);
}

TEST_CASE("Bernoulli mask rate within 3 sigma") {
  const auto clean = clean_sequence(0, 100);
  for (double r : {0.1, 0.5, 0.9}) {
    RngStream rng(7);
    long masked = 0;
    const long trials = 100000;
    for (long i = 0; i < trials / clean.response_len; ++i) masked += corrupt(clean, r, kMask, rng).mask_set.size();
    const double sigma = std::sqrt(r * (1 - r) / trials);
    CHECK(std::abs(static_cast<double>(masked) / trials - r) < 3 * sigma);
  }
}

TEST_CASE("full masking and unmasking") {
  const auto clean = clean_sequence(3, 5);
  const auto full = fully_masked(clean, kMask);
  CHECK(full.mask_set == std::vector<int>{3, 4, 5, 6, 7});
  CHECK(full.source_t == 1.0);
  const std::vector<int> restore{4, 6};
  const auto partial = unmask_positions(full, clean, restore);
  CHECK(partial.mask_set == std::vector<int>{3, 5, 7});
  CHECK(partial.ids[4] == clean.ids[4]);
  validate_corrupted(partial, clean, kMask);
  const std::vector<int> outside{1};
  CHECK_THROWS_AS(unmask_positions(full, clean, outside), ContractError);
  const std::vector<int> twice{4, 4};
  CHECK_THROWS_AS(unmask_positions(full, clean, twice), ContractError);
}

TEST_CASE("per-position masking probabilities") {
  const auto clean = clean_sequence(1, 4);
  RngStream rng(8);
  const std::vector<double> probs{0.0, 1.0, 0.0, 1.0};
  const auto c = corrupt_with_probabilities(clean, probs, kMask, rng, 0.5);
  CHECK(c.mask_set == std::vector<int>{2, 4});
  const std::vector<double> wrong{0.5};
  CHECK_THROWS_AS(corrupt_with_probabilities(clean, wrong, kMask, rng, 0.5), ContractError);
}
