#pragma once

#include <cstdint>

#include "ehmam/model.hpp"

namespace ehmam {

// Teacher decay annealed linearly from tau_start to tau_end over anneal_steps.
struct EmaSchedule {
  double tau_start = 0.999;
  double tau_end = 0.99999;
  std::int64_t anneal_steps = 75000;

  void validate() const;
  bool operator==(const EmaSchedule&) const = default;
};

double decay_at(const EmaSchedule& schedule, std::int64_t step);

// teacher <- lambda * teacher + (1 - lambda) * student over every teacher
// parameter (frontend, encoder, loss predictor). The student decoder has no
// teacher counterpart and is ignored.
template <typename T>
void ema_update(ModelState<T>& teacher, const ModelState<T>& student, double lambda);

}  // namespace ehmam
