#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ehmam {

// The two random primitives the masking pipeline consumes. Keeping them
// behind an interface lets a draw stream be recorded and replayed.
class RandomSource {
 public:
  virtual ~RandomSource() = default;
  // Uniform double in [0, 1).
  virtual double uniform() = 0;
  // k distinct indices from [0, n), in draw order. Requires 0 <= k <= n.
  virtual std::vector<std::int64_t> choose(std::int64_t n, std::int64_t k) = 0;
};

// Seeded 64-bit Mersenne twister with portable derived distributions
// (the std:: distributions are implementation-defined).
class Rng final : public RandomSource {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() override;
  std::vector<std::int64_t> choose(std::int64_t n, std::int64_t k) override;

  std::uint64_t next_u64() { return engine_(); }
  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  // Standard normal truncated to [-2, 2], scaled by stddev.
  double truncated_normal(double stddev);
  // In-place Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }
  // Independent child stream derived from this generator's seed material.
  Rng split(std::uint64_t salt);

  std::string state() const;
  void set_state(const std::string& s);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

// Forwards to an inner source and logs every draw.
class RecordingSource final : public RandomSource {
 public:
  struct Event {
    bool is_choice = false;
    double value = 0.0;
    std::int64_t n = 0;
    std::int64_t k = 0;
    std::vector<std::int64_t> picks;
  };

  explicit RecordingSource(RandomSource& inner) : inner_(inner) {}

  double uniform() override;
  std::vector<std::int64_t> choose(std::int64_t n, std::int64_t k) override;

  const std::vector<Event>& events() const { return events_; }

 private:
  RandomSource& inner_;
  std::vector<Event> events_;
};

// splitmix64 finalizer; used to derive seeds for independent substreams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace ehmam
