// SPDX-License-Identifier: Apache-2.0
#include "mtkd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mtkd/errors.hpp"

namespace mtkd {

std::vector<double> finite_difference_grad(const ScalarFn& f, std::span<const double> theta, double h) {
  if (!(h > 0.0)) throw ValidationError("finite_difference_grad: step must be positive");
  std::vector<double> x(theta.begin(), theta.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const long double up = f(x);
    x[i] = saved - h;
    const long double down = f(x);
    x[i] = saved;
    if (!std::isfinite(static_cast<double>(up)) || !std::isfinite(static_cast<double>(down)))
      throw NumericError("finite_difference_grad: non-finite evaluation at coordinate " + std::to_string(i));
    grad[i] = static_cast<double>((up - down) / (2.0L * h));
  }
  return grad;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckSummary compare_gradients(std::span<const double> analytic, std::span<const double> numeric,
                                   double tolerance, double floor) {
  if (analytic.size() != numeric.size())
    throw DimensionError("compare_gradients: " + std::to_string(analytic.size()) + " vs " +
                         std::to_string(numeric.size()) + " entries");
  GradCheckSummary s;
  s.count = analytic.size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = relative_error(analytic[i], numeric[i], floor);
    if (!(e < tolerance)) ++s.failures;
    if (e > s.max_rel_error || std::isnan(e)) {
      s.max_rel_error = e;
      s.worst_index = i;
    }
  }
  return s;
}

}  // namespace mtkd
