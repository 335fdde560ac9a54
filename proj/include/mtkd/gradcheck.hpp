// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <vector>

namespace mtkd {

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
/// Throws NumericError if any evaluation is non-finite.
std::vector<double> finite_difference_grad(const ScalarFn& f, std::span<const double> theta, double h);

/// |a - n| / max(|a|, |n|, floor), elementwise.
double relative_error(double analytic, double numeric, double floor = 1e-8);

struct GradCheckSummary {
  std::size_t count = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;

  bool passed() const { return failures == 0; }
};

GradCheckSummary compare_gradients(std::span<const double> analytic, std::span<const double> numeric,
                                   double tolerance, double floor = 1e-8);

}  // namespace mtkd
