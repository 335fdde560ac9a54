// SPDX-License-Identifier: Apache-2.0
#include "mtkd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include "mtkd/ops.hpp"

namespace mtkd {

template <typename T>
NllSum token_nll(Transformer<T>& model, std::span<const Batch> batches, int pad_id) {
  NllSum acc;
  for (const Batch& b : batches) {
    Tape<T> tape;
    const ForwardResult<T> fr = model.forward(tape, b.inputs, false);
    const Matrix<T> logp = log_softmax_rows<T>(fr.logits.value());
    for (Index r = 0; r < b.targets.size(); ++r) {
      const int y = b.targets.data()[r];
      if (y == pad_id) continue;
      acc.nll -= static_cast<double>(logp(r, y));
      ++acc.tokens;
    }
  }
  return acc;
}

template <typename T>
double perplexity(Transformer<T>& model, std::span<const Batch> batches, int pad_id) {
  const NllSum s = token_nll(model, batches, pad_id);
  if (s.tokens == 0) throw ValidationError("perplexity: split has no target tokens");
  return std::exp(s.nll / static_cast<double>(s.tokens));
}

double perplexity_from_logprobs(std::span<const double> target_logprobs) {
  if (target_logprobs.empty()) throw ValidationError("perplexity: no target tokens");
  double sum = 0.0;
  for (double lp : target_logprobs) sum -= lp;
  return std::exp(sum / static_cast<double>(target_logprobs.size()));
}

template <typename T>
double eval_distill_loss(Transformer<T>& student, std::vector<Transformer<T>*> teachers,
                         std::span<const Batch> batches, const DistillConfig& cfg, int pad_id) {
  const std::size_t K = teachers.size();
  if (K == 0) throw ValidationError("distill loss: at least one teacher is required");
  cfg.validate(K);
  std::vector<ModelConfig> tcfg;
  for (std::size_t k = 0; k < K; ++k) {
    if (teachers[k]->config().vocab_size != student.config().vocab_size)
      throw ValidationError("distill loss: teacher " + std::to_string(k) + " vocabulary " +
                            std::to_string(teachers[k]->config().vocab_size) + " differs from student vocabulary " +
                            std::to_string(student.config().vocab_size));
    tcfg.push_back(teachers[k]->config());
  }
  const std::vector<TapPair> pairs = resolve_tap_map(cfg, student.config(), tcfg);
  double sum = 0.0;
  std::int64_t count = 0;
  for (const Batch& b : batches) {
    std::vector<int> tflat(b.targets.data(), b.targets.data() + b.targets.size());
    const std::vector<T> w = mean_weights<T>(tflat, pad_id);
    const auto n = static_cast<std::int64_t>(std::count_if(tflat.begin(), tflat.end(), [&](int y) { return y != pad_id; }));
    if (n == 0) continue;
    std::vector<TeacherOutput<T>> outs;
    for (std::size_t k = 0; k < K; ++k) {
      const int tap = pairs[k].teacher;
      outs.push_back(teacher_output(*teachers[k], b.inputs, cfg.tau, std::span<const int>(&tap, 1)));
    }
    const FusionTargets<T> ft = distill_step_targets(outs, cfg, std::span<const T>(w), b.inputs.cols());
    Tape<T> tape;
    const ForwardResult<T> fr = student.forward(tape, b.inputs, false);
    const Var<T> kd = kd_loss(ft.fused, fr.logits, cfg.tau, std::span<const T>(w));
    sum += static_cast<double>(kd.item()) * static_cast<double>(n);
    count += n;
  }
  if (count == 0) throw ValidationError("distill loss: split has no target tokens");
  return sum / static_cast<double>(count);
}

std::string to_string(BleuSmoothing s) { return s == BleuSmoothing::none ? "none" : "add_one_high_order"; }

BleuSmoothing parse_bleu_smoothing(const std::string& s) {
  if (s == "none") return BleuSmoothing::none;
  if (s == "add_one_high_order") return BleuSmoothing::add_one_high_order;
  throw ValidationError("unknown BLEU smoothing '" + s + "' (expected none or add_one_high_order)");
}

namespace {

using NgramCounts = std::map<std::string, std::int64_t>;

NgramCounts ngrams(const std::vector<std::string>& words, int n) {
  NgramCounts out;
  if (static_cast<int>(words.size()) < n) return out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) {
      if (j) key.push_back('\x1f');
      key += words[i + static_cast<std::size_t>(j)];
    }
    ++out[key];
  }
  return out;
}

BleuResult corpus_bleu(const std::vector<std::vector<std::string>>& hyps,
                       const std::vector<std::vector<std::string>>& refs, int max_n, BleuSmoothing smoothing) {
  std::vector<std::int64_t> matched(static_cast<std::size_t>(max_n), 0), total(static_cast<std::size_t>(max_n), 0);
  BleuResult res;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    res.hyp_len += static_cast<std::int64_t>(hyps[i].size());
    res.ref_len += static_cast<std::int64_t>(refs[i].size());
    for (int n = 1; n <= max_n; ++n) {
      const NgramCounts h = ngrams(hyps[i], n);
      const NgramCounts r = ngrams(refs[i], n);
      for (const auto& [g, c] : h) {
        total[static_cast<std::size_t>(n - 1)] += c;
        const auto it = r.find(g);
        if (it != r.end()) matched[static_cast<std::size_t>(n - 1)] += std::min(c, it->second);
      }
    }
  }
  res.precisions.assign(static_cast<std::size_t>(max_n), std::numeric_limits<double>::quiet_NaN());
  if (res.hyp_len == 0) return res;
  res.brevity_penalty =
      res.hyp_len >= res.ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(res.ref_len) / static_cast<double>(res.hyp_len));
  double log_sum = 0.0;
  int used = 0;
  bool zero = false;
  for (int n = 1; n <= max_n; ++n) {
    double m = static_cast<double>(matched[static_cast<std::size_t>(n - 1)]);
    double t = static_cast<double>(total[static_cast<std::size_t>(n - 1)]);
    if (n >= 2 && smoothing == BleuSmoothing::add_one_high_order) {
      m += 1.0;
      t += 1.0;
    } else if (t == 0.0) {
      continue;
    }
    const double p = m / t;
    res.precisions[static_cast<std::size_t>(n - 1)] = p;
    if (p == 0.0) {
      zero = true;
      continue;
    }
    log_sum += std::log(p);
    ++used;
  }
  if (zero || used == 0) return res;
  res.score = std::min(1.0, res.brevity_penalty * std::exp(log_sum / used));
  return res;
}

}  // namespace

BleuResult bleu(const std::vector<std::vector<std::string>>& hypotheses,
                const std::vector<std::vector<std::string>>& references, int max_n, BleuSmoothing smoothing) {
  if (hypotheses.size() != references.size())
    throw ValidationError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                          std::to_string(references.size()) + " references");
  if (hypotheses.empty()) throw ValidationError("bleu: empty corpus");
  if (max_n < 1) throw ValidationError("bleu: max_n must be at least 1");
  for (std::size_t i = 0; i < hypotheses.size(); ++i)
    if (hypotheses[i].empty() || references[i].empty())
      throw ValidationError("bleu: empty sequence at pair " + std::to_string(i));
  return corpus_bleu(hypotheses, references, max_n, smoothing);
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
  while (i < text.size()) {
    while (i < text.size() && space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

nlohmann::json to_json(const GenerationBleuConfig& cfg) {
  return {{"max_documents", cfg.max_documents},
          {"window_tokens", cfg.window_tokens},
          {"prompt_fraction", cfg.prompt_fraction},
          {"smoothing", to_string(cfg.smoothing)},
          {"max_n", cfg.max_n},
          {"unit", "whitespace-split words"},
          {"scale", "[0,1]; multiply by 100 for the 0-100 convention"}};
}

template <typename T>
BleuResult generation_bleu(Transformer<T>& model, const std::vector<std::string>& documents,
                           const GenerationBleuConfig& cfg) {
  if (!(cfg.prompt_fraction > 0.0 && cfg.prompt_fraction < 1.0))
    throw ValidationError("bleu prompt_fraction must lie in (0, 1)");
  std::vector<std::vector<std::string>> hyps, refs;
  for (const std::string& doc : documents) {
    if (hyps.size() == cfg.max_documents) break;
    std::vector<int> toks = ByteTokenizer::tokenize(doc);
    if (cfg.window_tokens != 0 && toks.size() > cfg.window_tokens) toks.resize(cfg.window_tokens);
    const std::size_t n_prompt =
        std::max<std::size_t>(1, static_cast<std::size_t>(cfg.prompt_fraction * static_cast<double>(toks.size())));
    if (n_prompt >= toks.size()) continue;
    const std::span<const int> all(toks);
    std::vector<std::string> ref = split_words(ByteTokenizer::detokenize(all.subspan(n_prompt)));
    if (ref.empty()) continue;
    const std::vector<int> out =
        generate(model, all.first(n_prompt), static_cast<int>(toks.size() - n_prompt), GenerateOptions{});
    hyps.push_back(split_words(ByteTokenizer::detokenize(std::span<const int>(out).subspan(n_prompt))));
    refs.push_back(std::move(ref));
  }
  if (hyps.empty()) throw ValidationError("bleu: no document yields a nonempty reference continuation");
  return corpus_bleu(hyps, refs, cfg.max_n, cfg.smoothing);
}

ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw ValidationError("unknown report format '" + s + "' (expected csv or json)");
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write report " + path.string());
  return out;
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = nlohmann::json::object();
  j["perplexity"] = r.perplexity;
  j["distill_loss"] = opt_json(r.distill_loss);
  j["bleu"] = opt_json(r.bleu);
  j["token_count"] = r.token_count;
  j["config"] = r.config;
  return j;
}

nlohmann::json to_json(const SweepReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"k", row.k},
                    {"val_perplexity", row.val_perplexity},
                    {"distill_loss", row.distill_loss},
                    {"bleu", row.bleu},
                    {"final_kd", row.final_kd},
                    {"runs", row.runs}});
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs)
    runs.push_back({{"k", run.k},
                    {"seed", run.seed},
                    {"val_perplexity", run.val_perplexity},
                    {"distill_loss", run.distill_loss},
                    {"bleu", run.bleu},
                    {"final_kd", run.final_kd},
                    {"alpha_mean", run.alpha_mean},
                    {"alpha_std", run.alpha_std}});
  return {{"rows", rows}, {"runs", runs}, {"aggregate", "median over seeds"}, {"config", r.config}};
}

void emit_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format) {
  std::ofstream out = open_out(path);
  if (format == ReportFormat::json) {
    out << to_json(report).dump(2) << '\n';
  } else {
    out << "perplexity,distill_loss,bleu,token_count\n";
    out << num(report.perplexity) << ',' << opt_num(report.distill_loss) << ',' << opt_num(report.bleu) << ','
        << report.token_count << '\n';
  }
  if (!out) throw FormatError("failed writing report " + path.string());
}

void emit_report(const SweepReport& report, const std::filesystem::path& path, ReportFormat format) {
  std::ofstream out = open_out(path);
  if (format == ReportFormat::json) {
    out << to_json(report).dump(2) << '\n';
  } else {
    out << "k,val_perplexity,distill_loss,bleu,final_kd,runs\n";
    for (const auto& row : report.rows)
      out << row.k << ',' << num(row.val_perplexity) << ',' << num(row.distill_loss) << ',' << num(row.bleu) << ','
          << num(row.final_kd) << ',' << row.runs << '\n';
  }
  if (!out) throw FormatError("failed writing report " + path.string());
}

double median(std::vector<double> values) {
  if (values.empty()) throw ValidationError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

#define MTKD_INSTANTIATE_EVAL(T)                                                                              \
  template NllSum token_nll(Transformer<T>&, std::span<const Batch>, int);                                   \
  template double perplexity(Transformer<T>&, std::span<const Batch>, int);                                  \
  template double eval_distill_loss(Transformer<T>&, std::vector<Transformer<T>*>, std::span<const Batch>,   \
                                    const DistillConfig&, int);                                              \
  template BleuResult generation_bleu(Transformer<T>&, const std::vector<std::string>&,                      \
                                      const GenerationBleuConfig&);

MTKD_INSTANTIATE_EVAL(float)
MTKD_INSTANTIATE_EVAL(double)

}  // namespace mtkd
