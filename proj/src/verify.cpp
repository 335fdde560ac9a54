// SPDX-License-Identifier: Apache-2.0
#include "mtkd/verify.hpp"

#include <chrono>
#include <cstdio>

#include "mtkd/gradcheck.hpp"
#include "mtkd/ops.hpp"
#include "mtkd/rng.hpp"

namespace mtkd {

namespace {

// Redraws weights at a larger scale than the training init.
void scramble(Transformer<double>& m, Rng& rng) {
  for (Tensor<double>& p : m.parameters()) {
    const bool gain = p.name.ends_with(".gain");
    const bool bias = p.name.ends_with(".bias");
    for (Index i = 0; i < p.data.size(); ++i) {
      const double z = rng.normal();
      p.data.data()[i] = gain ? 1.0 + 0.1 * z : bias ? 0.1 * z : 0.4 * z;
    }
  }
}

struct Slot {
  Tensor<double>* tensor;
  Index index;
};

enum Component { kKd, kCe, kFeat, kTotal };
constexpr const char* kComponentNames[] = {"kd", "ce", "feat", "total"};

Var<double> pick(const ObjectiveVars<double>& o, int c) {
  switch (c) {
    case kKd: return o.kd;
    case kCe: return o.ce;
    case kFeat: return o.feat;
    default: return o.total;
  }
}

}  // namespace

bool MicroGradcheckReport::passed() const {
  if (!teachers_untouched || rows.empty()) return false;
  for (const auto& r : rows)
    if (!r.passed) return false;
  return true;
}

MicroGradcheckReport run_micro_gradcheck(const MicroGradcheckConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  Transformer<double> student(cfg.student, derive_seed(cfg.seed, 1));
  scramble(student, rng);
  std::vector<Transformer<double>> teacher_models;
  for (std::size_t k = 0; k < cfg.teachers.size(); ++k) {
    teacher_models.emplace_back(cfg.teachers[k], derive_seed(cfg.seed, 10 + k));
    scramble(teacher_models.back(), rng);
  }
  std::vector<Transformer<double>*> teachers;
  for (auto& t : teacher_models) teachers.push_back(&t);
  FeatureProjections<double> proj = FeatureProjections<double>::create(cfg.student, cfg.teachers, cfg.seed);
  for (Tensor<double>* p : proj.trainable())
    for (Index i = 0; i < p->data.size(); ++i) p->data.data()[i] = 0.3 * rng.normal();

  const int L = cfg.student.max_seq_len;
  const int pad = cfg.student.vocab_size - 1;
  IndexMatrix inputs(cfg.batch, L), targets(cfg.batch, L);
  for (Index i = 0; i < inputs.size(); ++i) {
    inputs.data()[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(pad)));
    targets.data()[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(pad)));
  }
  targets(cfg.batch - 1, L - 1) = pad;

  std::vector<Slot> slots;
  std::vector<Tensor<double>*> tensors;
  for (auto& p : student.parameters()) tensors.push_back(&p);
  for (Tensor<double>* p : proj.trainable()) tensors.push_back(p);
  for (Tensor<double>* t : tensors)
    for (Index i = 0; i < t->data.size(); ++i) slots.push_back({t, i});

  MicroGradcheckReport report;
  report.parameters = slots.size();

  for (double tau : cfg.taus) {
    DistillConfig dc;
    dc.lambda = cfg.lambda;
    dc.mu = cfg.mu;
    dc.tau = tau;
    dc.weighting_mode = WeightingMode::entropy_dynamic;

    auto evaluate = [&](int component) {
      Tape<double> tape;
      const DistillStep<double> s = distill_objective(tape, student, teachers, proj, inputs, targets, dc, pad);
      return pick(s.objective, component).item();
    };

    for (int c = kKd; c <= kTotal; ++c) {
      for (Tensor<double>* t : tensors) t->zero_grad();
      for (auto& t : teacher_models) t.zero_grad();
      {
        Tape<double> tape;
        const DistillStep<double> s = distill_objective(tape, student, teachers, proj, inputs, targets, dc, pad);
        tape.backward(pick(s.objective, c));
      }
      for (const auto& t : teacher_models)
        for (const auto& p : t.parameters())
          if (p.grad) report.teachers_untouched = false;

      std::vector<double> analytic(slots.size()), theta(slots.size());
      for (std::size_t i = 0; i < slots.size(); ++i) {
        const Tensor<double>& t = *slots[i].tensor;
        analytic[i] = t.grad ? t.grad->data()[slots[i].index] : 0.0;
        theta[i] = t.data.data()[slots[i].index];
      }
      const ScalarFn f = [&](std::span<const double> x) {
        for (std::size_t i = 0; i < slots.size(); ++i) slots[i].tensor->data.data()[slots[i].index] = x[i];
        return evaluate(c);
      };
      const std::vector<double> numeric = finite_difference_grad(f, theta, cfg.h);
      for (std::size_t i = 0; i < slots.size(); ++i) slots[i].tensor->data.data()[slots[i].index] = theta[i];

      const GradCheckSummary sum = compare_gradients(analytic, numeric, cfg.tolerance, cfg.floor);
      GradcheckRow row;
      row.tau = tau;
      row.component = kComponentNames[c];
      row.count = sum.count;
      row.failures = sum.failures;
      row.max_rel_error = sum.max_rel_error;
      row.worst = slots[sum.worst_index].tensor->name + "[" + std::to_string(slots[sum.worst_index].index) + "]";
      row.passed = sum.passed();
      report.rows.push_back(row);
    }
  }
  for (Tensor<double>* t : tensors) t->zero_grad();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string format_gradcheck_table(const MicroGradcheckReport& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-5s %-6s %7s %8s %12s  %-28s %s\n", "tau", "loss", "params", "failures",
                "max_rel_err", "worst", "result");
  out += line;
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof line, "%-5g %-6s %7zu %8zu %12.3e  %-28s %s\n", r.tau, r.component.c_str(), r.count,
                  r.failures, r.max_rel_error, r.worst.c_str(), r.passed ? "PASS" : "FAIL");
    out += line;
  }
  std::snprintf(line, sizeof line, "teacher gradients: %s\n", report.teachers_untouched ? "none (PASS)" : "present (FAIL)");
  out += line;
  std::snprintf(line, sizeof line, "gradcheck %s (%zu parameters, %.2f s)\n", report.passed() ? "PASS" : "FAIL",
                report.parameters, report.seconds);
  out += line;
  return out;
}

}  // namespace mtkd
