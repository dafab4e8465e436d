#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace dflow {

// Mixes a base seed with a list of keys into an independent sub-stream seed.
std::uint64_t derive_seed(std::uint64_t seed,
                          std::initializer_list<std::uint64_t> keys);

// Owned pseudo-random stream. Not shared across threads.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  int uniform_int(int n) {
    return static_cast<int>(uniform() * n);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Inverse-CDF draw from a log-probability vector using one uniform u.
// Entries equal to -inf are never selected.
int sample_log_categorical(std::span<const double> logp, double u);

// Same for a probability vector (need not be exactly normalized).
int sample_categorical(std::span<const double> probs, double u);

}  // namespace dflow
