// SPDX-License-Identifier: Apache-2.0
//
// mtkd: teacher training, multi-teacher distillation, teacher-count sweeps,
// evaluation, generation, and the built-in gradient check.
//
// Exit codes: 0 success, 1 usage/validation/format errors, 2 numeric aborts
// and gradient-check failures. Progress goes to stdout as key=value lines;
// diagnostics go to stderr.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mtkd/checkpoint.hpp"
#include "mtkd/data.hpp"
#include "mtkd/distill.hpp"
#include "mtkd/eval.hpp"
#include "mtkd/model.hpp"
#include "mtkd/runtime.hpp"
#include "mtkd/trainer.hpp"
#include "mtkd/verify.hpp"

namespace fs = std::filesystem;
using namespace mtkd;

namespace {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };
LogLevel g_level = LogLevel::info;

void log(LogLevel level, const std::string& msg) {
  static const char* names[] = {"error", "warn", "info", "debug"};
  if (level <= g_level) std::cerr << "mtkd " << names[static_cast<int>(level)] << ": " << msg << '\n';
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct Settings {
  fs::path config;
  std::uint64_t seed = 0;
  fs::path out_dir = ".";
  std::string log_level = "info";

  TrainConfig train;
  ModelConfig model;
  std::string weighting_mode = "entropy_dynamic";
  std::string entropy_granularity = "position";
  std::string beta_mode = "uniform";
  std::vector<std::string> tap_map;

  fs::path corpus;
  std::string corpus_format;

  std::vector<fs::path> teachers;
  fs::path checkpoint;
  std::string output;

  std::vector<int> k_values{1, 3};
  std::vector<std::uint64_t> student_seeds;
  bool no_bleu = false;

  std::size_t bleu_docs = 16;
  std::size_t bleu_window = 128;
  double bleu_prompt_fraction = 0.75;
  std::string bleu_smoothing = "add_one_high_order";
  std::string split = "val";
  std::vector<std::string> metrics{"perplexity", "distill_loss", "bleu"};
  std::string format = "csv";
  std::string report;

  std::string prompt;
  int max_new = 200;
  std::string mode = "greedy";
  double temperature = 1.0;
};

void add_option(CLI::App& app, const std::string& name, auto& target, const std::string& help) {
  std::string names = "--" + name;
  std::string dashed = name;
  for (char& c : dashed)
    if (c == '_') c = '-';
  if (dashed != name) names += ",--" + dashed;
  app.add_option(names, target, help)->capture_default_str();
}

void add_train_options(CLI::App& app, Settings& s) {
  auto& t = s.train;
  add_option(app, "steps", t.steps, "optimizer steps");
  add_option(app, "lr", t.lr, "peak learning rate");
  add_option(app, "adam_beta1", t.adam.beta1, "Adam beta1");
  add_option(app, "adam_beta2", t.adam.beta2, "Adam beta2");
  add_option(app, "adam_eps", t.adam.eps, "Adam epsilon");
  add_option(app, "grad_clip", t.grad_clip, "global gradient norm limit");
  add_option(app, "warmup_steps", t.warmup_steps, "linear warmup steps");
  add_option(app, "eval_every", t.eval_every, "steps between metrics rows");
  add_option(app, "batch_size", t.batch_size, "sequences per batch");
  add_option(app, "seq_len", t.seq_len, "tokens per sequence");
  add_option(app, "val_fraction", t.val_fraction, "fraction of documents held out");
  add_option(app, "max_val_batches", t.max_val_batches, "validation batches (0 = all)");

  auto& d = t.distill;
  add_option(app, "lambda", d.lambda, "weight of the distillation term");
  add_option(app, "mu", d.mu, "weight of the feature term");
  add_option(app, "tau", d.tau, "softmax temperature");
  add_option(app, "entropy_floor", d.entropy_floor, "lower clamp on teacher entropy");
  add_option(app, "weighting_mode", s.weighting_mode, "uniform | entropy_dynamic");
  add_option(app, "entropy_granularity", s.entropy_granularity, "position | sequence");
  add_option(app, "beta_mode", s.beta_mode, "uniform | mirror_alpha | fixed");
  add_option(app, "beta_fixed", d.beta_fixed, "per-teacher feature weights for beta_mode=fixed");
  add_option(app, "tap_map", s.tap_map, "per-teacher student:teacher block pairs");

  auto& m = s.model;
  add_option(app, "d_model", m.d_model, "model width");
  add_option(app, "n_layers", m.n_layers, "transformer blocks");
  add_option(app, "n_heads", m.n_heads, "attention heads");
  add_option(app, "d_ff", m.d_ff, "feed-forward width");
  add_option(app, "max_seq_len", m.max_seq_len, "positional table length");
  add_option(app, "tap_layers", m.tap_layers, "exposed blocks");

  add_option(app, "corpus", s.corpus, "corpus file (.txt or .jsonl)");
  add_option(app, "corpus_format", s.corpus_format, "txt | jsonl (default: from the extension)");
}

void add_bleu_options(CLI::App& app, Settings& s) {
  add_option(app, "bleu_docs", s.bleu_docs, "held-out documents used for BLEU");
  add_option(app, "bleu_window", s.bleu_window, "tokens per document window (0 = whole document)");
  add_option(app, "bleu_prompt_fraction", s.bleu_prompt_fraction, "share of the window used as prompt");
  add_option(app, "bleu_smoothing", s.bleu_smoothing, "none | add_one_high_order");
}

void finalize(Settings& s) {
  g_level = s.log_level == "error"  ? LogLevel::error
            : s.log_level == "warn" ? LogLevel::warn
            : s.log_level == "debug" ? LogLevel::debug
                                     : LogLevel::info;
  if (s.log_level != "error" && s.log_level != "warn" && s.log_level != "info" && s.log_level != "debug")
    throw ValidationError("unknown log level '" + s.log_level + "'");
  s.train.seed = s.seed;
  auto& d = s.train.distill;
  d.weighting_mode = parse_weighting_mode(s.weighting_mode);
  d.entropy_granularity = parse_entropy_granularity(s.entropy_granularity);
  d.beta_mode = parse_beta_mode(s.beta_mode);
  d.tap_map.clear();
  for (const std::string& p : s.tap_map) {
    const auto colon = p.find(':');
    if (colon == std::string::npos) throw ValidationError("tap_map entry '" + p + "' is not student:teacher");
    try {
      d.tap_map.push_back({std::stoi(p.substr(0, colon)), std::stoi(p.substr(colon + 1))});
    } catch (const std::exception&) {
      throw ValidationError("tap_map entry '" + p + "' is not student:teacher");
    }
  }
  fs::create_directories(s.out_dir);
}

Corpus read_corpus(const Settings& s) {
  if (s.corpus.empty()) throw ValidationError("--corpus is required");
  const CorpusFormat fmt = !s.corpus_format.empty()      ? parse_corpus_format(s.corpus_format)
                           : s.corpus.extension() == ".jsonl" ? CorpusFormat::jsonl
                                                              : CorpusFormat::txt;
  Corpus c = load_corpus(s.corpus, fmt);
  log(LogLevel::info, "corpus " + s.corpus.string() + ": " + std::to_string(c.documents.size()) + " documents, " +
                          std::to_string(c.total_bytes) + " bytes");
  return c;
}

void echo_config(const CLI::App& app, const Settings& s) {
  const fs::path path = s.out_dir / "resolved_config.toml";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << app.config_to_str(true, false);
  log(LogLevel::debug, "wrote " + path.string());
}

void print_step(const StepRecord& r) {
  std::ostringstream os;
  os << "event=step step=" << r.step << " total=" << num(r.loss.total) << " kd=" << num(r.loss.kd)
     << " ce=" << num(r.loss.ce) << " feat=" << num(r.loss.feat);
  for (std::size_t k = 0; k < r.alpha_mean.size(); ++k) os << " alpha_" << k << '=' << num(r.alpha_mean[k]);
  os << " lr=" << num(r.lr) << " grad_norm=" << num(r.grad_norm);
  std::cout << os.str() << std::endl;
}

struct LoadedTeachers {
  std::vector<Transformer<float>> models;
  std::vector<std::string> ids;
  std::vector<Transformer<float>*> ptrs() {
    std::vector<Transformer<float>*> out;
    for (auto& m : models) out.push_back(&m);
    return out;
  }
};

LoadedTeachers load_teachers(const std::vector<fs::path>& paths) {
  LoadedTeachers t;
  t.models.reserve(paths.size());
  for (const fs::path& p : paths) {
    t.models.push_back(model_from_checkpoint<float>(load_checkpoint(p)));
    t.ids.push_back(p.string());
    log(LogLevel::info, "teacher " + p.string() + ": d_model=" + std::to_string(t.models.back().config().d_model) +
                            " n_layers=" + std::to_string(t.models.back().config().n_layers));
  }
  return t;
}

int run_train_teacher(const CLI::App& app, Settings& s) {
  finalize(s);
  echo_config(app, s);
  const Corpus corpus = read_corpus(s);
  RunOptions opt;
  opt.checkpoint_path = s.out_dir / (s.output.empty() ? "teacher.ckpt" : s.output);
  opt.metrics_path = s.out_dir / "metrics.csv";
  opt.timing_path = s.out_dir / "timing.csv";
  opt.on_log = print_step;
  const TrainResult r = train_teacher(s.model, corpus.documents, s.train, opt);
  std::cout << "event=done checkpoint=" << opt.checkpoint_path.string()
            << " initial_val_perplexity=" << num(r.initial_val_perplexity)
            << " final_val_perplexity=" << num(r.final_val_perplexity) << std::endl;
  return 0;
}

int run_distill(const CLI::App& app, Settings& s) {
  finalize(s);
  if (s.teachers.empty()) throw ValidationError("distill needs at least one --teacher checkpoint");
  echo_config(app, s);
  const Corpus corpus = read_corpus(s);
  LoadedTeachers teachers = load_teachers(s.teachers);
  RunOptions opt;
  opt.checkpoint_path = s.out_dir / (s.output.empty() ? "student.ckpt" : s.output);
  opt.metrics_path = s.out_dir / "metrics.csv";
  opt.timing_path = s.out_dir / "timing.csv";
  opt.on_log = print_step;
  opt.teacher_ids = teachers.ids;
  const TrainResult r = distill(s.model, teachers.ptrs(), corpus.documents, s.train, opt);
  std::cout << "event=done checkpoint=" << opt.checkpoint_path.string()
            << " initial_val_perplexity=" << num(r.initial_val_perplexity)
            << " final_val_perplexity=" << num(r.final_val_perplexity)
            << " initial_val_distill_loss=" << num(r.initial_val_distill_loss)
            << " final_val_distill_loss=" << num(r.final_val_distill_loss)
            << " final_kd_smoothed=" << num(smoothed_kd(r.history, 100)) << std::endl;
  return 0;
}

GenerationBleuConfig bleu_config(const Settings& s) {
  GenerationBleuConfig b;
  b.max_documents = s.bleu_docs;
  b.window_tokens = s.bleu_window;
  b.prompt_fraction = s.bleu_prompt_fraction;
  b.smoothing = parse_bleu_smoothing(s.bleu_smoothing);
  return b;
}

int run_sweep(const CLI::App& app, Settings& s) {
  finalize(s);
  if (s.teachers.empty()) throw ValidationError("sweep-teachers needs a teacher pool (--teacher)");
  echo_config(app, s);
  const Corpus corpus = read_corpus(s);
  LoadedTeachers pool = load_teachers(s.teachers);
  SweepConfig sc;
  sc.k_values = s.k_values;
  sc.student_seeds = s.student_seeds;
  sc.bleu = bleu_config(s);
  sc.compute_bleu = !s.no_bleu;
  const SweepReport rep =
      sweep_teachers(corpus.documents, s.model, pool.ptrs(), s.train, sc, [](const SweepRun& run) {
        std::ostringstream os;
        os << "event=run k=" << run.k << " seed=" << run.seed << " val_perplexity=" << num(run.val_perplexity)
           << " distill_loss=" << num(run.distill_loss) << " bleu=" << num(run.bleu)
           << " final_kd=" << num(run.final_kd);
        for (std::size_t k = 0; k < run.alpha_mean.size(); ++k)
          os << " alpha_mean_" << k << '=' << num(run.alpha_mean[k]) << " alpha_std_" << k << '='
             << num(run.alpha_std[k]);
        std::cout << os.str() << std::endl;
      });
  const ReportFormat fmt = parse_report_format(s.format);
  const fs::path path = s.out_dir / (s.report.empty() ? (fmt == ReportFormat::csv ? "sweep.csv" : "sweep.json") : s.report);
  emit_report(rep, path, fmt);
  for (const auto& row : rep.rows)
    std::cout << "event=row k=" << row.k << " val_perplexity=" << num(row.val_perplexity)
              << " distill_loss=" << num(row.distill_loss) << " bleu=" << num(row.bleu)
              << " final_kd=" << num(row.final_kd) << " runs=" << row.runs << std::endl;
  std::cout << "event=done report=" << path.string() << std::endl;
  return 0;
}

int run_eval(const CLI::App& app, Settings& s) {
  finalize(s);
  if (s.checkpoint.empty()) throw ValidationError("eval needs --checkpoint");
  echo_config(app, s);
  const Corpus corpus = read_corpus(s);
  const Checkpoint ck = load_checkpoint(s.checkpoint);
  Transformer<float> model = model_from_checkpoint<float>(ck);
  TrainConfig tc = s.train;
  tc.seq_len = std::min(tc.seq_len, model.config().max_seq_len);
  if (s.split != "val" && s.split != "train") throw ValidationError("split must be val or train");
  const Split split = s.split == "val" ? Split::val : Split::train;
  const BatchStream stream(corpus.documents, tc.seq_len, tc.batch_size, tc.seed, split, tc.val_fraction);
  const std::vector<Batch> batches = stream.sequential_batches(tc.max_val_batches);

  auto wants = [&](const std::string& m) { return std::find(s.metrics.begin(), s.metrics.end(), m) != s.metrics.end(); };
  for (const auto& m : s.metrics)
    if (m != "perplexity" && m != "distill_loss" && m != "bleu") throw ValidationError("unknown metric '" + m + "'");

  EvalReport rep;
  const NllSum nll = token_nll(model, std::span<const Batch>(batches));
  if (nll.tokens == 0) throw ValidationError("eval: split has no target tokens");
  rep.perplexity = std::exp(nll.nll / static_cast<double>(nll.tokens));
  rep.token_count = nll.tokens;
  rep.config = {{"checkpoint", s.checkpoint.string()}, {"split", s.split}, {"seq_len", tc.seq_len},
                {"batch_size", tc.batch_size}, {"val_fraction", tc.val_fraction}};

  if (wants("distill_loss")) {
    std::vector<fs::path> tpaths = s.teachers;
    if (tpaths.empty() && ck.meta.contains("teachers"))
      for (const auto& t : ck.meta.at("teachers")) tpaths.emplace_back(t.get<std::string>());
    if (tpaths.empty()) {
      log(LogLevel::warn, "no teachers given or recorded; skipping distill_loss");
    } else {
      const DistillConfig dc = ck.meta.contains("distill") ? distill_config_from_json(ck.meta.at("distill"))
                                                           : s.train.distill;
      LoadedTeachers teachers = load_teachers(tpaths);
      rep.distill_loss = eval_distill_loss(model, teachers.ptrs(), std::span<const Batch>(batches), dc);
      rep.config["distill"] = to_json(dc);
    }
  }
  if (wants("bleu")) {
    const DocumentSplit parts = split_documents(corpus.documents, tc.val_fraction);
    std::vector<std::string> docs;
    for (std::size_t i : split == Split::val ? parts.val : parts.train) docs.push_back(corpus.documents[i]);
    const GenerationBleuConfig bc = bleu_config(s);
    rep.bleu = generation_bleu(model, docs, bc).score;
    rep.config["bleu"] = to_json(bc);
  }
  const ReportFormat fmt = parse_report_format(s.format);
  const fs::path path = s.out_dir / (s.report.empty() ? (fmt == ReportFormat::csv ? "eval.csv" : "eval.json") : s.report);
  emit_report(rep, path, fmt);
  std::ostringstream os;
  os << "event=eval perplexity=" << num(rep.perplexity) << " tokens=" << rep.token_count;
  if (rep.distill_loss) os << " distill_loss=" << num(*rep.distill_loss);
  if (rep.bleu) os << " bleu=" << num(*rep.bleu);
  os << " report=" << path.string();
  std::cout << os.str() << std::endl;
  return 0;
}

int run_generate(const CLI::App& app, Settings& s) {
  finalize(s);
  if (s.checkpoint.empty()) throw ValidationError("generate needs --checkpoint");
  echo_config(app, s);
  Transformer<float> model = model_from_checkpoint<float>(load_checkpoint(s.checkpoint));
  GenerateOptions g;
  if (s.mode == "greedy")
    g.mode = SamplingMode::greedy;
  else if (s.mode == "temperature")
    g.mode = SamplingMode::temperature;
  else
    throw ValidationError("unknown generation mode '" + s.mode + "'");
  g.temperature = s.temperature;
  g.seed = s.seed;
  std::vector<int> prompt = ByteTokenizer::tokenize(s.prompt);
  prompt.pop_back();
  const std::vector<int> out = generate(model, prompt, s.max_new, g);
  std::cout << ByteTokenizer::detokenize(out) << std::endl;
  return 0;
}

int run_gradcheck(const CLI::App& app, Settings& s) {
  finalize(s);
  echo_config(app, s);
  MicroGradcheckConfig cfg;
  cfg.seed = s.seed == 0 ? cfg.seed : s.seed;
  const MicroGradcheckReport rep = run_micro_gradcheck(cfg);
  std::cout << format_gradcheck_table(rep);
  return rep.passed() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  mtkd::tune_allocator();
  CLI::App app{"Multi-teacher knowledge distillation for small byte-level language models"};
  app.set_config("--config", "", "TOML-style key = value file; explicit flags win");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  Settings s;
  add_option(app, "seed", s.seed, "seed for initialization, batching, and sampling");
  add_option(app, "out_dir", s.out_dir, "directory for all artifacts");
  app.add_option("--log-level,--log_level", s.log_level, "error | warn | info | debug")->capture_default_str();
  add_train_options(app, s);

  CLI::App* train = app.add_subcommand("train-teacher", "train a teacher by next-token cross-entropy");
  CLI::App* dist = app.add_subcommand("distill", "distill a student from frozen teachers");
  CLI::App* sweep = app.add_subcommand("sweep-teachers", "distill students for each teacher count K");
  CLI::App* eval = app.add_subcommand("eval", "perplexity, distillation loss, and BLEU of a checkpoint");
  CLI::App* gen = app.add_subcommand("generate", "continue a prompt");
  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference check of the full objective");
  for (CLI::App* sub : {train, dist, sweep, eval, gen, grad}) sub->fallthrough();

  add_option(*train, "output", s.output, "checkpoint file name inside out_dir");
  add_option(*dist, "teacher", s.teachers, "teacher checkpoint (repeat for K teachers)");
  add_option(*dist, "output", s.output, "checkpoint file name inside out_dir");
  add_option(*sweep, "teacher", s.teachers, "teacher pool in order (repeat)");
  add_option(*sweep, "k", s.k_values, "teacher counts to sweep");
  add_option(*sweep, "student_seeds", s.student_seeds, "student seeds per K (default: --seed)");
  sweep->add_flag("--no-bleu,--no_bleu", s.no_bleu, "skip the generation BLEU metric");
  add_option(*sweep, "format", s.format, "csv | json");
  add_option(*sweep, "report", s.report, "report file name inside out_dir");
  add_bleu_options(*sweep, s);
  add_option(*eval, "checkpoint", s.checkpoint, "model checkpoint");
  add_option(*eval, "teacher", s.teachers, "teachers for distill_loss (default: those recorded in the checkpoint)");
  add_option(*eval, "split", s.split, "val | train");
  add_option(*eval, "metrics", s.metrics, "subset of perplexity, distill_loss, bleu");
  add_option(*eval, "format", s.format, "csv | json");
  add_option(*eval, "report", s.report, "report file name inside out_dir");
  add_bleu_options(*eval, s);
  add_option(*gen, "checkpoint", s.checkpoint, "model checkpoint");
  add_option(*gen, "prompt", s.prompt, "prompt text");
  add_option(*gen, "max_new", s.max_new, "tokens to generate");
  add_option(*gen, "mode", s.mode, "greedy | temperature");
  add_option(*gen, "temperature", s.temperature, "sampling temperature");

  if (argc <= 1) {
    std::cerr << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train) return run_train_teacher(app, s);
    if (*dist) return run_distill(app, s);
    if (*sweep) return run_sweep(app, s);
    if (*eval) return run_eval(app, s);
    if (*gen) return run_generate(app, s);
    if (*grad) return run_gradcheck(app, s);
  } catch (const NumericError& e) {
    log(LogLevel::error, e.what());
    return 2;
  } catch (const std::exception& e) {
    log(LogLevel::error, e.what());
    return 1;
  }
  return 1;
}
