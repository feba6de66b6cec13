#include "ehmam/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ehmam/errors.hpp"
#include "ehmam/rng.hpp"

namespace ehmam {

GradCheckResult gradient_check(const LossWithGrad& fn, std::vector<double> params, double eps,
                               std::size_t num_coords, std::uint64_t seed, Stencil stencil) {
  if (!(eps > 0)) throw ContractError("gradient_check: eps must be positive");
  std::vector<double> analytic(params.size(), 0.0);
  const double base = fn(params, &analytic);
  if (!std::isfinite(base)) throw NumericalError("gradient_check: non-finite loss");

  Rng rng(seed);
  const auto n = static_cast<std::int64_t>(params.size());
  const auto picks = rng.choose(n, std::min<std::int64_t>(n, static_cast<std::int64_t>(num_coords)));

  GradCheckResult res;
  for (auto p : picks) {
    const auto i = static_cast<std::size_t>(p);
    const double saved = params[i];
    auto at = [&](double offset) {
      params[i] = saved + offset;
      const double v = fn(params, nullptr);
      if (!std::isfinite(v)) {
        throw NumericalError("gradient_check: non-finite loss at coordinate " + std::to_string(i));
      }
      return v;
    };
    double numeric = 0.0;
    if (stencil == Stencil::kTwoPoint) {
      numeric = (at(eps) - at(-eps)) / (2.0 * eps);
    } else {
      numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
    }
    params[i] = saved;
    const double rel = std::abs(analytic[i] - numeric) / std::max(std::abs(numeric), 1e-8);
    ++res.coords_checked;
    if (res.coords_checked == 1 || rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
      res.worst_analytic = analytic[i];
      res.worst_numeric = numeric;
    }
  }
  return res;
}

}  // namespace ehmam
