#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace ehmam {

// Returns the loss at `params`; fills `grad` (same size) when non-null.
using LossWithGrad = std::function<double(std::span<const double> params, std::vector<double>* grad)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

enum class Stencil { kTwoPoint, kFourPoint };

// Central differences on a random subset of `num_coords` coordinates:
// max |analytic - numeric| / max(|numeric|, 1e-8).
// kFourPoint uses (-f(x+2e) + 8f(x+e) - 8f(x-e) + f(x-2e)) / 12e.
GradCheckResult gradient_check(const LossWithGrad& fn, std::vector<double> params, double eps,
                               std::size_t num_coords = 64, std::uint64_t seed = 0,
                               Stencil stencil = Stencil::kFourPoint);

}  // namespace ehmam
