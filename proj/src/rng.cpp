#include "ehmam/rng.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ehmam/errors.hpp"

namespace ehmam {

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ContractError("Rng::below: empty range");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

std::vector<std::int64_t> Rng::choose(std::int64_t n, std::int64_t k) {
  if (k < 0 || n < 0 || k > n) {
    throw ContractError("Rng::choose: need 0 <= k <= n, got n=" +
                        std::to_string(n) + " k=" + std::to_string(k));
  }
  std::vector<std::int64_t> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), std::int64_t{0});
  // Partial Fisher-Yates from the front.
  for (std::int64_t i = 0; i < k; ++i) {
    auto j = i + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(n - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(k));
  return pool;
}

double Rng::normal() {
  // Box-Muller; the second variate is discarded so the state stays a pure
  // function of the engine.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::truncated_normal(double stddev) {
  double z;
  do {
    z = normal();
  } while (std::abs(z) > 2.0);
  return z * stddev;
}

Rng Rng::split(std::uint64_t salt) { return Rng(mix_seed(engine_(), salt)); }

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  if (!is) throw ConfigError("Rng::set_state: malformed generator state");
}

double RecordingSource::uniform() {
  Event e;
  e.value = inner_.uniform();
  events_.push_back(e);
  return e.value;
}

std::vector<std::int64_t> RecordingSource::choose(std::int64_t n, std::int64_t k) {
  Event e;
  e.is_choice = true;
  e.n = n;
  e.k = k;
  e.picks = inner_.choose(n, k);
  events_.push_back(e);
  return e.picks;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace ehmam
