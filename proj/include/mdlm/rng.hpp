#pragma once

// Seeded random streams. A single root seed fans out to named, independent
// streams so that changing one source of randomness (say, the selection
// stream of an ablation) leaves every other stream untouched.
//
// Distribution transforms are written out here rather than using
// <random>'s distributions, whose output is implementation-defined; this
// keeps runs bit-reproducible across standard libraries.

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mdlm/errors.hpp"

namespace mdlm {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
  return splitmix64(root ^ splitmix64(fnv1a64(name)));
}

class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream() : RngStream(0) {}
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}
  RngStream(std::uint64_t root, std::string_view name) : engine_(derive_seed(root, name)) {}

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("RngStream::below(0)");
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void set_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (!is) throw CheckpointError("malformed RNG state");
  }

  bool operator==(const RngStream& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

// The named streams a training run draws from.
struct RngStreams {
  RngStreams() : RngStreams(0) {}
  explicit RngStreams(std::uint64_t root)
      : timestep(root, "timestep"),
        rho(root, "rho"),
        masking(root, "masking"),
        selection(root, "selection"),
        dropout(root, "dropout") {}

  RngStream timestep;
  RngStream rho;
  RngStream masking;
  RngStream selection;
  RngStream dropout;

  std::vector<std::string> states() const {
    return {timestep.state(), rho.state(), masking.state(), selection.state(), dropout.state()};
  }
  void set_states(const std::vector<std::string>& s) {
    if (s.size() != 5) throw CheckpointError("expected 5 RNG stream states");
    timestep.set_state(s[0]);
    rho.set_state(s[1]);
    masking.set_state(s[2]);
    selection.set_state(s[3]);
    dropout.set_state(s[4]);
  }
};

}  // namespace mdlm
