#include <doctest.h>

#include <cmath>

#include "ehmam/ema.hpp"
#include "ehmam/errors.hpp"
#include "ehmam/rng.hpp"

using namespace ehmam;

namespace {

ModelState<float> pair_of(std::uint64_t seed, ModelState<float>& teacher) {
  auto student = ModelState<float>::init(ModelConfig::tiny(8), Role::kStudent, seed);
  teacher = student.make_teacher();
  // Move the student away from the teacher.
  Rng rng(seed + 100);
  for (std::size_t i = 0; i < student.params.count(); ++i)
    for (auto& v : student.params[i].data) v += static_cast<float>(rng.normal());
  return student;
}

}  // namespace

TEST_CASE("decay schedule") {
  const EmaSchedule base{0.999, 0.99999, 75000};
  CHECK(decay_at(base, 0) == 0.999);
  CHECK(decay_at(base, 75000) == 0.99999);
  CHECK(decay_at(base, 200000) == 0.99999);
  CHECK(std::abs(decay_at(base, 37500) - 0.999495) < 1e-9);
  double prev = 0.0;
  for (std::int64_t s = 0; s < 80000; s += 7) {
    const double d = decay_at(base, s);
    REQUIRE(d >= prev);
    prev = d;
  }
  CHECK_THROWS_AS(decay_at(base, -1), ContractError);
  CHECK_THROWS_AS((EmaSchedule{0.9, 0.8, 10}.validate()), ConfigError);
  CHECK_THROWS_AS((EmaSchedule{0.9, 0.99, 0}.validate()), ConfigError);
}

TEST_CASE("scalar update") {
  auto student = ModelState<double>::init(ModelConfig::tiny(8), Role::kStudent, 1);
  auto teacher = student.make_teacher();
  teacher.params[0].data[0] = 1.0;
  student.params[0].data[0] = 0.0;
  ema_update(teacher, student, 0.999);
  CHECK(teacher.params[0].data[0] == doctest::Approx(0.999).epsilon(1e-15));
}

TEST_CASE("update matches the elementwise formula") {
  for (double lambda : {0.0, 0.5, 0.999, 1.0}) {
    ModelState<float> teacher;
    const auto student = pair_of(3, teacher);
    const auto before = teacher;
    ema_update(teacher, student, lambda);
    for (std::size_t i = 0; i < teacher.params.count(); ++i) {
      const auto& t0 = before.params[i].data;
      const auto& s = student.params[i].data;
      const auto& t1 = teacher.params[i].data;
      for (std::size_t k = 0; k < t1.size(); ++k) {
        const long double expect = (long double)lambda * t0[k] + (1.0L - lambda) * s[k];
        const float f = static_cast<float>(expect);
        REQUIRE(std::abs(t1[k] - f) <= std::abs(std::nextafter(f, INFINITY) - f));
        if (lambda == 1.0) REQUIRE(t1[k] == t0[k]);
        if (lambda == 0.0) REQUIRE(t1[k] == s[k]);
        REQUIRE(t1[k] >= std::min(t0[k], s[k]));
        REQUIRE(t1[k] <= std::max(t0[k], s[k]));
      }
    }
  }
}

TEST_CASE("fixed point and untouched student") {
  auto student = ModelState<float>::init(ModelConfig::tiny(8), Role::kStudent, 5);
  auto teacher = student.make_teacher();
  const auto before = teacher;
  const auto student_copy = student;
  for (double lambda : {0.1, 0.5, 0.9, 0.99999}) ema_update(teacher, student, lambda);
  for (std::size_t i = 0; i < teacher.params.count(); ++i) CHECK(teacher.params[i].data == before.params[i].data);
  for (std::size_t i = 0; i < student.params.count(); ++i)
    CHECK(student.params[i].data == student_copy.params[i].data);
  CHECK(student.params.count() > teacher.params.count());
}

TEST_CASE("mismatched shapes are rejected") {
  auto student = ModelState<float>::init(ModelConfig::tiny(8), Role::kStudent, 5);
  auto cfg = ModelConfig::tiny(8);
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  auto other = ModelState<float>::init(cfg, Role::kTeacher, 5);
  CHECK_THROWS_AS(ema_update(other, student, 0.5), ContractError);
  auto teacher = student.make_teacher();
  CHECK_THROWS_AS(ema_update(teacher, student, 1.5), ContractError);
}
