// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtkd/checkpoint.hpp"
#include "mtkd/runtime.hpp"
#include "mtkd/trainer.hpp"
#include "mtkd/verify.hpp"
#include "support/suites.hpp"

using namespace mtkd;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Verdicts {
  int failed = 0;
  void report(const std::string& id, bool ok, const std::string& detail) {
    std::cout << id << " " << (ok ? "PASS" : "FAIL") << " " << detail << std::endl;
    if (!ok) ++failed;
  }
};

bool all_passed(const std::vector<testing::SuiteResult>& suites, std::size_t& cases, std::string& first) {
  bool ok = true;
  cases = 0;
  for (const auto& s : suites) {
    cases += s.cases;
    std::cout << "  " << s.name << ": " << s.cases << " checks, " << s.failures << " failures"
              << (s.detail.empty() ? "" : " (" + s.detail + ")") << "\n";
    if (!s.passed()) {
      if (ok) first = s.name + ": " + s.detail;
      ok = false;
    }
  }
  return ok;
}

void fast_group(Verdicts& v) {
  auto start = Clock::now();
  const MicroGradcheckReport g = run_micro_gradcheck();
  double secs = seconds_since(start);
  std::cout << format_gradcheck_table(g);
  double worst = 0.0;
  for (const auto& r : g.rows) worst = std::max(worst, r.max_rel_error);
  v.report("AC-1", g.passed() && secs < 60.0,
           "micro gradcheck: " + std::to_string(g.rows.size()) + " rows, " + std::to_string(g.parameters) +
               " parameters, worst rel err " + fmt("%.2e", worst) + " (tol 1e-3), teacher grads " +
               (g.teachers_untouched ? "none" : "present") + ", " + fmt("%.1f", secs) + " s (budget 60 s)");

  start = Clock::now();
  const std::vector<testing::SuiteResult> closed = testing::closed_form_suites();
  secs = seconds_since(start);
  std::size_t cases = 0;
  std::string first;
  bool ok = all_passed(closed, cases, first);
  v.report("AC-2", ok && secs < 5.0,
           "closed forms: " + std::to_string(closed.size()) + " groups, " + std::to_string(cases) + " checks" +
               (ok ? "" : ", first failure " + first) + ", " + fmt("%.2f", secs) + " s (budget 5 s)");

  start = Clock::now();
  const std::vector<testing::SuiteResult> props = testing::property_suites(1000);
  secs = seconds_since(start);
  first.clear();
  ok = all_passed(props, cases, first);
  v.report("AC-5", ok && secs < 60.0,
           "property suites: " + std::to_string(props.size()) + " suites, 1000 cases each, " +
               std::to_string(cases) + " checks" + (ok ? "" : ", first failure " + first) + ", " +
               fmt("%.1f", secs) + " s (budget 60 s)");
}

struct TrainingSetup {
  fs::path corpus;
  fs::path out;
  std::int64_t steps = 2000;
  bool skip_sweep = false;
};

std::function<void(const StepRecord&)> progress(const std::string& tag) {
  return [tag](const StepRecord& r) {
    if (r.step % 250 == 0 || r.step == 1)
      std::cout << "  " << tag << " step " << r.step << " total " << fmt("%.4f", r.loss.total) << " kd "
                << fmt("%.4f", r.loss.kd) << " ce " << fmt("%.4f", r.loss.ce) << " "
                << fmt("%.0f", r.wall_ms / 1000.0) << " s" << std::endl;
  };
}

void training_group(Verdicts& v, const TrainingSetup& s) {
  const Corpus corpus = load_corpus(s.corpus, CorpusFormat::jsonl);
  std::cout << "corpus " << s.corpus.string() << ": " << corpus.documents.size() << " documents, "
            << corpus.total_bytes << " bytes" << std::endl;
  fs::create_directories(s.out);
  const bool full = s.steps == 2000;
  const std::string scale = full ? "" : " [reduced to " + std::to_string(s.steps) + " steps]";

  const ModelConfig teacher_cfg{259, 128, 4, 4, 512, 128, {}};
  const ModelConfig student_cfg{259, 64, 2, 4, 256, 128, {}};
  TrainConfig base;
  base.steps = s.steps;

  const auto start3 = Clock::now();
  std::vector<Transformer<float>> teachers;
  std::vector<std::string> ids;
  for (std::uint64_t seed : {1, 2}) {
    TrainConfig c = base;
    c.seed = seed;
    RunOptions o;
    o.checkpoint_path = s.out / ("teacher" + std::to_string(seed) + ".ckpt");
    o.metrics_path = s.out / ("teacher" + std::to_string(seed) + ".csv");
    o.on_log = progress("teacher" + std::to_string(seed));
    const auto t0 = Clock::now();
    const TrainResult r = train_teacher(teacher_cfg, corpus.documents, c, o);
    std::cout << "  teacher" << seed << " val ppl " << fmt("%.3f", r.initial_val_perplexity) << " -> "
              << fmt("%.3f", r.final_val_perplexity) << " in " << fmt("%.0f", seconds_since(t0)) << " s"
              << std::endl;
    teachers.push_back(model_from_checkpoint<float>(r.checkpoint));
    ids.push_back(o.checkpoint_path.filename().string());
  }
  std::vector<std::string> teacher_bytes;
  for (const std::string& id : ids) teacher_bytes.push_back(slurp(s.out / id));

  TrainConfig dc = base;
  dc.seed = 11;
  auto distill_run = [&](const std::string& tag) {
    RunOptions o;
    o.checkpoint_path = s.out / (tag + ".ckpt");
    o.metrics_path = s.out / (tag + ".csv");
    o.on_log = progress(tag);
    o.teacher_ids = ids;
    std::vector<Transformer<float>*> ptrs;
    for (auto& t : teachers) ptrs.push_back(&t);
    return distill(student_cfg, ptrs, corpus.documents, dc, o);
  };
  const auto ts = Clock::now();
  const TrainResult run1 = distill_run("student_a");
  const double student_secs = seconds_since(ts);
  const double secs3 = seconds_since(start3);
  const double kd0 = run1.history.front().loss.kd;
  const double kd1 = smoothed_kd(run1.history, 100);
  const double ratio = run1.initial_val_perplexity / run1.final_val_perplexity;
  const bool learn = kd1 < kd0 && ratio >= 2.0;
  std::cout << "  student alpha means:";
  for (double a : run1.history.back().alpha_mean) std::cout << " " << fmt("%.4f", a);
  std::cout << "\n  student " << fmt("%.0f", student_secs) << " s, teachers "
            << fmt("%.0f", secs3 - student_secs) << " s" << std::endl;
  v.report("AC-3", learn && secs3 <= 900.0,
           "distillation learns: kd " + fmt("%.4f", kd0) + " -> " + fmt("%.4f", kd1) + " (100-step mean) " +
               (kd1 < kd0 ? "decreased" : "did not decrease") + ", val ppl " +
               fmt("%.2f", run1.initial_val_perplexity) + " -> " + fmt("%.2f", run1.final_val_perplexity) +
               " ratio " + fmt("%.2f", ratio) + " (need >= 2), runtime " + fmt("%.1f", secs3 / 60.0) +
               " min (budget 15 min" + (secs3 <= 900.0 ? ", met" : ", exceeded") + ")" + scale);

  const TrainResult run2 = distill_run("student_b");
  const bool metrics_same = slurp(s.out / "student_a.csv") == slurp(s.out / "student_b.csv");
  const bool ckpt_same = slurp(s.out / "student_a.ckpt") == slurp(s.out / "student_b.ckpt");
  bool teachers_same = true;
  for (std::size_t i = 0; i < ids.size(); ++i) teachers_same = teachers_same && slurp(s.out / ids[i]) == teacher_bytes[i];
  (void)run2;
  v.report("AC-6", metrics_same && ckpt_same && teachers_same,
           std::string("repeat run: metrics log ") + (metrics_same ? "identical" : "differs") + ", checkpoint " +
               (ckpt_same ? "identical" : "differs") + ", teacher checkpoints " +
               (teachers_same ? "unchanged" : "changed") + scale);

  if (s.skip_sweep) return;
  const auto start4 = Clock::now();
  {
    TrainConfig c = base;
    c.seed = 3;
    RunOptions o;
    o.checkpoint_path = s.out / "teacher3.ckpt";
    o.metrics_path = s.out / "teacher3.csv";
    o.on_log = progress("teacher3");
    const TrainResult r = train_teacher(teacher_cfg, corpus.documents, c, o);
    std::cout << "  teacher3 val ppl " << fmt("%.3f", r.initial_val_perplexity) << " -> "
              << fmt("%.3f", r.final_val_perplexity) << std::endl;
    teachers.push_back(model_from_checkpoint<float>(r.checkpoint));
  }
  std::vector<Transformer<float>*> pool;
  for (auto& t : teachers) pool.push_back(&t);
  SweepConfig sw;
  sw.k_values = {1, 3};
  sw.student_seeds = {101, 102, 103};
  const SweepReport rep = sweep_teachers(corpus.documents, student_cfg, pool, base, sw, [](const SweepRun& r) {
    std::cout << "  K=" << r.k << " seed " << r.seed << " val ppl " << fmt("%.4f", r.val_perplexity)
              << " distill loss " << fmt("%.4f", r.distill_loss) << " bleu " << fmt("%.4f", r.bleu) << " alpha";
    for (std::size_t i = 0; i < r.alpha_mean.size(); ++i)
      std::cout << " " << fmt("%.4f", r.alpha_mean[i]) << "+-" << fmt("%.4f", r.alpha_std[i]);
    std::cout << std::endl;
  });
  emit_report(rep, s.out / "sweep.csv", ReportFormat::csv);
  emit_report(rep, s.out / "sweep.json", ReportFormat::json);
  const double secs4 = seconds_since(start4);
  const SweepRow& k1 = rep.rows.at(0);
  const SweepRow& k3 = rep.rows.at(1);
  const bool better = k3.val_perplexity <= k1.val_perplexity && k3.distill_loss <= k1.distill_loss;
  v.report("AC-4", better && secs4 <= 2700.0,
           "K=3 vs K=1 medians over 3 seeds: val ppl " + fmt("%.4f", k3.val_perplexity) + " vs " +
               fmt("%.4f", k1.val_perplexity) + ", held-out distill loss " + fmt("%.4f", k3.distill_loss) +
               " vs " + fmt("%.4f", k1.distill_loss) + ", bleu " + fmt("%.4f", k3.bleu) + " vs " +
               fmt("%.4f", k1.bleu) + ", runtime " + fmt("%.1f", secs4 / 60.0) + " min (budget 45 min" +
               (secs4 <= 2700.0 ? ", met" : ", exceeded") + ")" + scale);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"mtkd acceptance checks"};
  std::string group = "all";
  TrainingSetup setup;
  setup.corpus = fs::path(MTKD_SOURCE_DIR) / "data" / "shakespeare.jsonl";
  setup.out = fs::path("acceptance_runs");
  app.add_option("--group", group, "fast, training, or all")->check(CLI::IsMember({"fast", "training", "all"}));
  app.add_option("--corpus", setup.corpus, "jsonl corpus for the training checks");
  app.add_option("--out", setup.out, "directory for checkpoints and logs");
  app.add_option("--steps", setup.steps, "steps per training run");
  app.add_flag("--skip-sweep", setup.skip_sweep, "omit the teacher-count sweep");
  CLI11_PARSE(app, argc, argv);

  Verdicts v;
  try {
    if (group != "training") fast_group(v);
    if (group != "fast") training_group(v, setup);
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
  return v.failed == 0 ? 0 : 1;
}
