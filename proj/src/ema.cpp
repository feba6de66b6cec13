#include "ehmam/ema.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ehmam/errors.hpp"

namespace ehmam {

void EmaSchedule::validate() const {
  if (!(0.0 <= tau_start && tau_start <= tau_end && tau_end <= 1.0)) {
    throw ConfigError("ema: need 0 <= tau_start <= tau_end <= 1");
  }
  if (anneal_steps < 1) throw ConfigError("ema: anneal_steps must be >= 1");
}

double decay_at(const EmaSchedule& s, std::int64_t step) {
  if (step < 0) throw ContractError("decay_at: negative step");
  if (step >= s.anneal_steps) return s.tau_end;
  const double frac = static_cast<double>(step) / static_cast<double>(s.anneal_steps);
  return s.tau_start + (s.tau_end - s.tau_start) * frac;
}

template <typename T>
void ema_update(ModelState<T>& teacher, const ModelState<T>& student, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("ema_update: lambda outside [0, 1]");
  if (teacher.params.count() > student.params.count()) {
    throw ContractError("ema_update: teacher has parameters the student lacks");
  }
  for (std::size_t i = 0; i < teacher.params.count(); ++i) {
    const auto& s = student.params[i];
    const auto& t = teacher.params[i];
    if (s.name != t.name || s.shape != t.shape) {
      throw ContractError("ema_update: parameter mismatch at " + t.name + " / " + s.name);
    }
  }
  if (lambda == 1.0) return;
  const double rate = 1.0 - lambda;
  for (std::size_t i = 0; i < teacher.params.count(); ++i) {
    auto& t = teacher.params[i].data;
    const auto& s = student.params[i].data;
    if (lambda == 0.0) {
      t = s;
      continue;
    }
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double tv = static_cast<double>(t[k]);
      t[k] = static_cast<T>(tv + rate * (static_cast<double>(s[k]) - tv));
    }
  }
}

template void ema_update<float>(ModelState<float>&, const ModelState<float>&, double);
template void ema_update<double>(ModelState<double>&, const ModelState<double>&, double);

}  // namespace ehmam
