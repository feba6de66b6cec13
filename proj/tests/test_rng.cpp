#include <doctest.h>

#include <cmath>
#include <set>

#include "ehmam/errors.hpp"
#include "ehmam/rng.hpp"

using namespace ehmam;

TEST_CASE("mt19937_64 reference value") {
  // The 10000th output for the default seed is fixed by the C++ standard.
  std::mt19937_64 e;
  e.discard(9999);
  CHECK(e() == 9981545732273789042ULL);
}

TEST_CASE("uniform range and moments") {
  Rng rng(1);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE((u >= 0.0 && u < 1.0));
    sum += u;
    sq += u * u;
  }
  CHECK(std::abs(sum / n - 0.5) < 0.005);
  CHECK(std::abs(sq / n - sum / n * sum / n - 1.0 / 12) < 0.002);
}

TEST_CASE("normal moments and truncation") {
  Rng rng(2);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.02);
  for (int i = 0; i < 10000; ++i) REQUIRE(std::abs(rng.truncated_normal(0.5)) <= 1.0);
}

TEST_CASE("choose draws distinct indices uniformly") {
  Rng rng(3);
  std::vector<int> hits(10, 0);
  for (int t = 0; t < 20000; ++t) {
    const auto picks = rng.choose(10, 3);
    REQUIRE(picks.size() == 3);
    std::set<std::int64_t> s(picks.begin(), picks.end());
    REQUIRE(s.size() == 3);
    for (auto p : picks) {
      REQUIRE((p >= 0 && p < 10));
      ++hits[std::size_t(p)];
    }
  }
  for (int h : hits) CHECK(std::abs(h - 6000) < 300);
  CHECK(rng.choose(5, 0).empty());
  CHECK(rng.choose(4, 4).size() == 4);
  CHECK_THROWS_AS(rng.choose(3, 4), ContractError);
  CHECK_THROWS_AS(rng.below(0), ContractError);
}

TEST_CASE("state round trip and recording") {
  Rng a(4);
  a.uniform();
  Rng b(0);
  b.set_state(a.state());
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  CHECK_THROWS_AS(b.set_state("not a state"), ConfigError);

  Rng inner(5), twin(5);
  RecordingSource rec(inner);
  const double u = rec.uniform();
  const auto c = rec.choose(8, 2);
  CHECK(u == twin.uniform());
  CHECK(c == twin.choose(8, 2));
  REQUIRE(rec.events().size() == 2);
  CHECK_FALSE(rec.events()[0].is_choice);
  CHECK(rec.events()[1].picks == c);
}

TEST_CASE("derived seeds differ") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a)
    for (std::uint64_t b = 0; b < 20; ++b) seen.insert(mix_seed(a, b));
  CHECK(seen.size() == 400);
  Rng x(6), y(6);
  CHECK(x.split(1).next_u64() == y.split(1).next_u64());
}
