// SPDX-License-Identifier: Apache-2.0
#include "mtkd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>

#include "mtkd/ops.hpp"

namespace mtkd {

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state, double lr, const AdamConfig& cfg) {
  if (state.m.empty() && state.t == 0) {
    for (const Tensor<T>* p : params) {
      state.m.push_back(Matrix<T>::Zero(p->data.rows(), p->data.cols()));
      state.v.push_back(Matrix<T>::Zero(p->data.rows(), p->data.cols()));
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam: state holds a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& p = *params[i];
    if (state.m[i].rows() != p.data.rows() || state.m[i].cols() != p.data.cols())
      throw DimensionError("adam: state shape for '" + p.name + "' does not match the parameter");
    if (p.grad && !all_finite(*p.grad)) throw NumericError("adam: non-finite gradient for '" + p.name + "'");
  }
  state.t += 1;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - cfg.beta1);
  const T c2 = static_cast<T>(1.0 - cfg.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.t)));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.t)));
  const T step = static_cast<T>(lr);
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    if (p.grad) {
      const auto g = p.grad->array();
      m = b1 * m + c1 * g;
      v = b2 * v + c2 * g * g;
    } else {
      m = b1 * m;
      v = b2 * v;
    }
    p.data.array() -= step * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
}

double lr_at(std::int64_t step, double lr, std::int64_t warmup_steps) {
  if (warmup_steps <= 0) return lr;
  return lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
}

template <typename T>
double grad_norm(std::span<Tensor<T>* const> params) {
  double sq = 0.0;
  for (const Tensor<T>* p : params) {
    if (!p->grad) continue;
    const Matrix<T>& g = *p->grad;
    for (Index i = 0; i < g.size(); ++i) {
      const double x = static_cast<double>(g.data()[i]);
      sq += x * x;
    }
  }
  return std::sqrt(sq);
}

template <typename T>
double clip_grad_norm(std::span<Tensor<T>* const> params, double max_norm) {
  const double norm = grad_norm(params);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (Tensor<T>* p : params)
      if (p->grad) *p->grad *= factor;
  }
  return norm;
}

void TrainConfig::validate() const {
  if (steps <= 0) throw ValidationError("steps must be positive");
  if (!(lr > 0.0)) throw ValidationError("lr must be positive");
  if (!(grad_clip > 0.0)) throw ValidationError("grad_clip must be positive");
  if (warmup_steps < 0) throw ValidationError("warmup_steps must be nonnegative");
  if (eval_every <= 0) throw ValidationError("eval_every must be positive");
  if (batch_size <= 0) throw ValidationError("batch_size must be positive");
  if (seq_len <= 0) throw ValidationError("seq_len must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ValidationError("val_fraction must lie in (0, 1)");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ValidationError("adam betas must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw ValidationError("adam eps must be positive");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"steps", cfg.steps},
          {"lr", cfg.lr},
          {"adam_beta1", cfg.adam.beta1},
          {"adam_beta2", cfg.adam.beta2},
          {"adam_eps", cfg.adam.eps},
          {"grad_clip", cfg.grad_clip},
          {"warmup_steps", cfg.warmup_steps},
          {"seed", cfg.seed},
          {"eval_every", cfg.eval_every},
          {"batch_size", cfg.batch_size},
          {"seq_len", cfg.seq_len},
          {"val_fraction", cfg.val_fraction},
          {"max_val_batches", cfg.max_val_batches},
          {"distill", to_json(cfg.distill)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.lr = j.value("lr", c.lr);
    c.adam.beta1 = j.value("adam_beta1", c.adam.beta1);
    c.adam.beta2 = j.value("adam_beta2", c.adam.beta2);
    c.adam.eps = j.value("adam_eps", c.adam.eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.max_val_batches = j.value("max_val_batches", c.max_val_batches);
    if (j.contains("distill")) c.distill = distill_config_from_json(j.at("distill"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  return c;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using Clock = std::chrono::steady_clock;

class MetricsWriter {
 public:
  MetricsWriter(const RunOptions& opt, std::size_t n_teachers) {
    if (!opt.metrics_path.empty()) {
      metrics_.emplace(opt.metrics_path, std::ios::trunc);
      if (!*metrics_) throw FormatError("cannot write metrics " + opt.metrics_path.string());
      *metrics_ << metrics_header(n_teachers) << '\n';
    }
    if (!opt.timing_path.empty()) {
      timing_.emplace(opt.timing_path, std::ios::trunc);
      if (!*timing_) throw FormatError("cannot write timing log " + opt.timing_path.string());
      *timing_ << "step,wall_ms\n";
    }
  }

  void write(const StepRecord& r) {
    if (metrics_) *metrics_ << metrics_row(r) << '\n' << std::flush;
    if (timing_) *timing_ << r.step << ',' << num(r.wall_ms) << '\n' << std::flush;
  }

 private:
  std::optional<std::ofstream> metrics_;
  std::optional<std::ofstream> timing_;
};

bool should_log(std::int64_t step, const TrainConfig& cfg) {
  return step % cfg.eval_every == 0 || step == cfg.steps;
}

void check_inputs(const ModelConfig& model_cfg, const std::vector<std::string>& documents, const TrainConfig& cfg) {
  cfg.validate();
  model_cfg.validate();
  if (documents.empty()) throw ValidationError("empty corpus");
  if (cfg.seq_len > model_cfg.max_seq_len)
    throw ValidationError("seq_len " + std::to_string(cfg.seq_len) + " exceeds max_seq_len " +
                          std::to_string(model_cfg.max_seq_len));
  if (model_cfg.vocab_size != ByteTokenizer::kVocabSize)
    throw ValidationError("model vocabulary " + std::to_string(model_cfg.vocab_size) +
                          " differs from the byte tokenizer vocabulary " + std::to_string(ByteTokenizer::kVocabSize));
}

std::vector<int> flatten(const IndexMatrix& m) { return std::vector<int>(m.data(), m.data() + m.size()); }

nlohmann::json run_meta(const char* role, const TrainConfig& cfg, const RunOptions& opt) {
  nlohmann::json meta = {{"role", role}, {"train", to_json(cfg)}};
  if (std::string(role) == "student") {
    meta["distill"] = to_json(cfg.distill);
    meta["teachers"] = opt.teacher_ids;
  }
  return meta;
}

}  // namespace

std::string metrics_header(std::size_t n_teachers) {
  std::string h = "step,total,kd,ce,feat";
  for (std::size_t k = 0; k < n_teachers; ++k) h += ",alpha_" + std::to_string(k);
  return h + ",lr";
}

std::string metrics_row(const StepRecord& r) {
  std::string s = std::to_string(r.step) + ',' + num(r.loss.total) + ',' + num(r.loss.kd) + ',' + num(r.loss.ce) +
                  ',' + num(r.loss.feat);
  for (double a : r.alpha_mean) s += ',' + num(a);
  return s + ',' + num(r.lr);
}

std::vector<Batch> validation_batches(const std::vector<std::string>& documents, const TrainConfig& cfg) {
  BatchStream val(documents, cfg.seq_len, cfg.batch_size, cfg.seed, Split::val, cfg.val_fraction);
  return val.sequential_batches(cfg.max_val_batches);
}

std::vector<std::string> validation_documents(const std::vector<std::string>& documents, double val_fraction) {
  std::vector<std::string> out;
  for (std::size_t i : split_documents(documents, val_fraction).val) out.push_back(documents[i]);
  return out;
}

TrainResult train_teacher(const ModelConfig& model_cfg, const std::vector<std::string>& documents,
                          const TrainConfig& cfg, const RunOptions& options) {
  check_inputs(model_cfg, documents, cfg);
  Transformer<float> model(model_cfg, cfg.seed);
  BatchStream stream(documents, cfg.seq_len, cfg.batch_size, cfg.seed, Split::train, cfg.val_fraction);
  std::vector<Batch> val;
  if (options.evaluate) val = validation_batches(documents, cfg);

  TrainResult result;
  if (options.evaluate) {
    const NllSum s = token_nll(model, std::span<const Batch>(val));
    result.val_tokens = s.tokens;
    result.initial_val_perplexity = std::exp(s.nll / static_cast<double>(s.tokens));
  }

  std::vector<Tensor<float>*> params;
  for (auto& p : model.parameters()) params.push_back(&p);
  AdamState<float> adam;
  MetricsWriter writer(options, 0);
  const auto t0 = Clock::now();

  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    const Batch b = stream.next();
    StepRecord rec;
    rec.step = step;
    try {
      model.zero_grad();
      const std::vector<int> targets = flatten(b.targets);
      const std::vector<float> w = mean_weights<float>(targets, ByteTokenizer::kPad);
      Tape<float> tape;
      const ForwardResult<float> fr = model.forward(tape, b.inputs, true);
      const Var<float> ce = ce_loss(std::span<const int>(targets), log_softmax_rows(fr.logits), std::span<const float>(w));
      rec.loss.ce = static_cast<double>(ce.item());
      rec.loss.total = rec.loss.ce;
      tape.backward(ce);
      rec.grad_norm = clip_grad_norm(std::span<Tensor<float>* const>(params), cfg.grad_clip);
      rec.lr = lr_at(step, cfg.lr, cfg.warmup_steps);
      adam_step(std::span<Tensor<float>* const>(params), adam, rec.lr, cfg.adam);
    } catch (const NumericError& e) {
      if (!options.checkpoint_path.empty())
        save_checkpoint(make_checkpoint<float>(model, cfg.seed, step - 1, nullptr, run_meta("teacher", cfg, options)),
                        options.checkpoint_path);
      throw TrainingAborted("step " + std::to_string(step) + ": " + e.what(), step);
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    result.history.push_back(rec);
    if (should_log(step, cfg)) {
      result.log.push_back(rec);
      writer.write(rec);
      if (options.on_log) options.on_log(rec);
    }
  }

  if (options.evaluate) result.final_val_perplexity = perplexity(model, std::span<const Batch>(val));
  result.checkpoint = make_checkpoint<float>(model, cfg.seed, cfg.steps, nullptr, run_meta("teacher", cfg, options));
  if (!options.checkpoint_path.empty()) save_checkpoint(result.checkpoint, options.checkpoint_path);
  return result;
}

TrainResult distill(const ModelConfig& student_cfg, std::vector<Transformer<float>*> teachers,
                    const std::vector<std::string>& documents, const TrainConfig& cfg, const RunOptions& options) {
  check_inputs(student_cfg, documents, cfg);
  const std::size_t K = teachers.size();
  if (K == 0) throw ValidationError("distill: at least one teacher is required");
  cfg.distill.validate(K);
  std::vector<ModelConfig> tcfg;
  for (std::size_t k = 0; k < K; ++k) {
    const ModelConfig& c = teachers[k]->config();
    if (c.vocab_size != student_cfg.vocab_size)
      throw ValidationError("distill: teacher " + std::to_string(k) + " vocabulary " + std::to_string(c.vocab_size) +
                            " differs from student vocabulary " + std::to_string(student_cfg.vocab_size));
    if (cfg.seq_len > c.max_seq_len)
      throw ValidationError("distill: seq_len exceeds teacher " + std::to_string(k) + " max_seq_len");
    tcfg.push_back(c);
  }
  resolve_tap_map(cfg.distill, student_cfg, tcfg);

  Transformer<float> student(student_cfg, cfg.seed);
  FeatureProjections<float> projections = FeatureProjections<float>::create(student_cfg, tcfg, cfg.seed);
  BatchStream stream(documents, cfg.seq_len, cfg.batch_size, cfg.seed, Split::train, cfg.val_fraction);
  std::vector<Batch> val;
  if (options.evaluate) val = validation_batches(documents, cfg);

  TrainResult result;
  if (options.evaluate) {
    const NllSum s = token_nll(student, std::span<const Batch>(val));
    result.val_tokens = s.tokens;
    result.initial_val_perplexity = std::exp(s.nll / static_cast<double>(s.tokens));
    result.initial_val_distill_loss = eval_distill_loss(student, teachers, std::span<const Batch>(val), cfg.distill);
  }

  std::vector<Tensor<float>*> params;
  for (auto& p : student.parameters()) params.push_back(&p);
  for (Tensor<float>* p : projections.trainable()) params.push_back(p);
  AdamState<float> adam;
  MetricsWriter writer(options, K);
  const auto t0 = Clock::now();

  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    const Batch b = stream.next();
    StepRecord rec;
    rec.step = step;
    try {
      for (Tensor<float>* p : params) p->zero_grad();
      Tape<float> tape;
      const DistillStep<float> ds = distill_objective(tape, student, teachers, projections, b.inputs, b.targets,
                                                     cfg.distill, ByteTokenizer::kPad);
      rec.loss = ds.objective.values;
      rec.alpha_mean = ds.targets.alpha_mean;
      tape.backward(ds.objective.total);
      rec.grad_norm = clip_grad_norm(std::span<Tensor<float>* const>(params), cfg.grad_clip);
      rec.lr = lr_at(step, cfg.lr, cfg.warmup_steps);
      adam_step(std::span<Tensor<float>* const>(params), adam, rec.lr, cfg.adam);
    } catch (const NumericError& e) {
      if (!options.checkpoint_path.empty())
        save_checkpoint(make_checkpoint(student, cfg.seed, step - 1, &projections, run_meta("student", cfg, options)),
                        options.checkpoint_path);
      throw TrainingAborted("step " + std::to_string(step) + ": " + e.what(), step);
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    result.history.push_back(rec);
    if (should_log(step, cfg)) {
      result.log.push_back(rec);
      writer.write(rec);
      if (options.on_log) options.on_log(rec);
    }
  }

  if (options.evaluate) {
    result.final_val_perplexity = perplexity(student, std::span<const Batch>(val));
    result.final_val_distill_loss = eval_distill_loss(student, teachers, std::span<const Batch>(val), cfg.distill);
  }
  result.checkpoint = make_checkpoint(student, cfg.seed, cfg.steps, &projections, run_meta("student", cfg, options));
  if (!options.checkpoint_path.empty()) save_checkpoint(result.checkpoint, options.checkpoint_path);
  return result;
}

double smoothed_kd(std::span<const StepRecord> history, std::size_t window) {
  if (history.empty() || window == 0) throw ValidationError("smoothed_kd: empty history or window");
  const std::size_t n = std::min(window, history.size());
  double sum = 0.0;
  for (std::size_t i = history.size() - n; i < history.size(); ++i) sum += history[i].loss.kd;
  return sum / static_cast<double>(n);
}

SweepReport sweep_teachers(const std::vector<std::string>& documents, const ModelConfig& student_cfg,
                           std::vector<Transformer<float>*> teacher_pool, const TrainConfig& cfg,
                           const SweepConfig& sweep, const std::function<void(const SweepRun&)>& on_run) {
  if (sweep.k_values.empty()) throw ValidationError("sweep: no K values");
  const int max_k = *std::max_element(sweep.k_values.begin(), sweep.k_values.end());
  if (*std::min_element(sweep.k_values.begin(), sweep.k_values.end()) < 1)
    throw ValidationError("sweep: K values must be positive");
  if (static_cast<std::size_t>(max_k) > teacher_pool.size())
    throw ValidationError("sweep: teacher pool has " + std::to_string(teacher_pool.size()) + " models but K=" +
                          std::to_string(max_k) + " was requested");
  std::vector<std::uint64_t> seeds = sweep.student_seeds;
  if (seeds.empty()) seeds.push_back(cfg.seed);
  const std::vector<std::string> val_docs = validation_documents(documents, cfg.val_fraction);

  SweepReport report;
  report.config = {{"train", to_json(cfg)},
                   {"student", to_json(student_cfg)},
                   {"k_values", sweep.k_values},
                   {"student_seeds", seeds},
                   {"kd_window", sweep.kd_window},
                   {"bleu", sweep.compute_bleu ? to_json(sweep.bleu) : nlohmann::json(nullptr)}};
  for (int k : sweep.k_values) {
    std::vector<Transformer<float>*> teachers(teacher_pool.begin(), teacher_pool.begin() + k);
    std::vector<double> ppl, kd, dl, bl;
    for (std::uint64_t seed : seeds) {
      TrainConfig c = cfg;
      c.seed = seed;
      const TrainResult r = distill(student_cfg, teachers, documents, c);
      SweepRun run;
      run.k = k;
      run.seed = seed;
      run.val_perplexity = r.final_val_perplexity;
      run.distill_loss = r.final_val_distill_loss;
      run.final_kd = smoothed_kd(r.history, sweep.kd_window);
      for (std::size_t t = 0; t < static_cast<std::size_t>(k); ++t) {
        double s = 0.0, s2 = 0.0;
        for (const auto& h : r.history) {
          s += h.alpha_mean[t];
          s2 += h.alpha_mean[t] * h.alpha_mean[t];
        }
        const double n = static_cast<double>(r.history.size());
        const double mean = s / n;
        run.alpha_mean.push_back(mean);
        run.alpha_std.push_back(std::sqrt(std::max(0.0, s2 / n - mean * mean)));
      }
      if (sweep.compute_bleu) {
        Transformer<float> student = model_from_checkpoint<float>(r.checkpoint);
        run.bleu = generation_bleu(student, val_docs, sweep.bleu).score;
      }
      ppl.push_back(run.val_perplexity);
      kd.push_back(run.final_kd);
      dl.push_back(run.distill_loss);
      bl.push_back(run.bleu);
      report.runs.push_back(run);
      if (on_run) on_run(run);
    }
    report.rows.push_back({k, median(ppl), median(kd), median(dl), median(bl), seeds.size()});
  }
  return report;
}

template void adam_step(std::span<Tensor<float>* const>, AdamState<float>&, double, const AdamConfig&);
template void adam_step(std::span<Tensor<double>* const>, AdamState<double>&, double, const AdamConfig&);
template double grad_norm(std::span<Tensor<float>* const>);
template double grad_norm(std::span<Tensor<double>* const>);
template double clip_grad_norm(std::span<Tensor<float>* const>, double);
template double clip_grad_norm(std::span<Tensor<double>* const>, double);

}  // namespace mtkd
