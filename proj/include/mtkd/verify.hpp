// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtkd/distill.hpp"
#include "mtkd/model.hpp"

namespace mtkd {

/// Self-contained gradient check of the full distillation objective on a
/// micro configuration, usable without any test framework.
struct MicroGradcheckConfig {
  ModelConfig student{11, 8, 1, 2, 32, 6, {}};
  std::vector<ModelConfig> teachers{{11, 8, 1, 2, 32, 6, {}}, {11, 12, 1, 2, 48, 6, {}}};
  int batch = 2;
  std::vector<double> taus{1.0, 2.0};
  double lambda = 0.7;
  double mu = 0.1;
  double h = 1e-4;
  double tolerance = 1e-3;
  double floor = 1e-8;
  std::uint64_t seed = 7;
};

struct GradcheckRow {
  double tau = 1.0;
  std::string component;  ///< kd, ce, feat, total
  std::size_t count = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  std::string worst;  ///< parameter[index] with the largest error
  bool passed = false;
};

struct MicroGradcheckReport {
  std::vector<GradcheckRow> rows;
  std::size_t parameters = 0;   ///< student and projection scalars checked
  bool teachers_untouched = true;  ///< no teacher tensor received a gradient
  double seconds = 0.0;

  bool passed() const;
};

MicroGradcheckReport run_micro_gradcheck(const MicroGradcheckConfig& cfg = {});

/// Fixed-width table, one line per (tau, component), then a verdict line.
std::string format_gradcheck_table(const MicroGradcheckReport& report);

}  // namespace mtkd
