#pragma once

#include <cstdint>
#include <random>

namespace ptdr {

/// Mixes a seed and a stream id into a fresh 64-bit seed (splitmix64 step).
/// Used to derive independent per-step / per-sample RNG streams so that
/// runs are reproducible and resumable without serializing generator state.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Deterministic random source. One instance per training step / sample /
/// experiment arm; never shared across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_base_(seed), engine_(seed) {}

  /// Derives an independent child generator keyed off the construction seed,
  /// unaffected by how many values were already drawn.
  Rng split(std::uint64_t stream) const { return Rng(mix_seed(seed_base_, stream)); }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(engine_() % static_cast<std::uint64_t>(n));
  }

  std::uint64_t next_u64() { return engine_(); }

 private:
  std::uint64_t seed_base_ = 0;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace ptdr
