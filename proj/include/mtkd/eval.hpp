// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtkd/data.hpp"
#include "mtkd/distill.hpp"
#include "mtkd/model.hpp"

namespace mtkd {

struct NllSum {
  double nll = 0.0;  ///< summed -ln p(target), nats
  std::int64_t tokens = 0;
};

/// Summed next-token NLL over every non-PAD target in `batches`.
template <typename T>
NllSum token_nll(Transformer<T>& model, std::span<const Batch> batches, int pad_id = ByteTokenizer::kPad);

/// exp(mean NLL). Throws ValidationError when there are no target tokens.
template <typename T>
double perplexity(Transformer<T>& model, std::span<const Batch> batches, int pad_id = ByteTokenizer::kPad);

/// exp(-mean of the given natural-log target probabilities).
double perplexity_from_logprobs(std::span<const double> target_logprobs);

/// Token-weighted mean of the distillation KL term over the batches, built
/// with the same fusion pipeline as training and no gradient tracking.
template <typename T>
double eval_distill_loss(Transformer<T>& student, std::vector<Transformer<T>*> teachers,
                         std::span<const Batch> batches, const DistillConfig& cfg,
                         int pad_id = ByteTokenizer::kPad);

// ---------------------------------------------------------------------------
// BLEU

enum class BleuSmoothing { none, add_one_high_order };

std::string to_string(BleuSmoothing s);
BleuSmoothing parse_bleu_smoothing(const std::string& s);

struct BleuResult {
  double score = 0.0;
  std::vector<double> precisions;  ///< p_1 .. p_max_n; NaN for an order left out
  double brevity_penalty = 0.0;
  std::int64_t hyp_len = 0;
  std::int64_t ref_len = 0;
};

/// Corpus BLEU with clipped n-gram counts and brevity penalty
/// min(1, exp(1 - ref_len / hyp_len)). add_one_high_order adds one to the
/// matched and total counts of every order n >= 2. Without smoothing, an
/// order with no hypothesis n-grams anywhere in the corpus is left out of the
/// geometric mean. Zero unigram precision gives 0.
BleuResult bleu(const std::vector<std::vector<std::string>>& hypotheses,
                const std::vector<std::vector<std::string>>& references, int max_n = 4,
                BleuSmoothing smoothing = BleuSmoothing::add_one_high_order);

std::vector<std::string> split_words(std::string_view text);

struct GenerationBleuConfig {
  std::size_t max_documents = 16;
  /// Tokens taken from the start of each document (BOS included); 0 uses the
  /// whole document.
  std::size_t window_tokens = 128;
  double prompt_fraction = 0.75;
  BleuSmoothing smoothing = BleuSmoothing::add_one_high_order;
  int max_n = 4;
};

nlohmann::json to_json(const GenerationBleuConfig& cfg);

/// Prompts with the leading prompt_fraction of each document window, greedily
/// generates as many tokens as were held back, and scores the generated words
/// against the true continuation. Documents are used in the given order.
template <typename T>
BleuResult generation_bleu(Transformer<T>& model, const std::vector<std::string>& documents,
                           const GenerationBleuConfig& cfg = {});

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  double perplexity = 0.0;
  std::optional<double> distill_loss;
  std::optional<double> bleu;
  std::int64_t token_count = 0;
  nlohmann::json config = nlohmann::json::object();
};

/// One cell of a teacher-count sweep.
struct SweepRun {
  int k = 0;
  std::uint64_t seed = 0;
  double val_perplexity = 0.0;
  double final_kd = 0.0;  ///< smoothed training L_KD at the end of the run
  double distill_loss = 0.0;  ///< held-out
  double bleu = 0.0;
  std::vector<double> alpha_mean;  ///< per teacher, over the run
  std::vector<double> alpha_std;
};

/// Per-K aggregate over seeds (medians).
struct SweepRow {
  int k = 0;
  double val_perplexity = 0.0;
  double final_kd = 0.0;
  double distill_loss = 0.0;
  double bleu = 0.0;
  std::size_t runs = 0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::vector<SweepRun> runs;
  nlohmann::json config = nlohmann::json::object();
};

enum class ReportFormat { csv, json };

ReportFormat parse_report_format(const std::string& s);

nlohmann::json to_json(const EvalReport& r);
nlohmann::json to_json(const SweepReport& r);

/// csv: one header row then the data row(s). json: a single object.
void emit_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format);
/// csv holds one row per K value (k, val_perplexity, distill_loss, bleu,
/// final_kd, runs); json also carries the individual runs.
void emit_report(const SweepReport& report, const std::filesystem::path& path, ReportFormat format);

double median(std::vector<double> values);

}  // namespace mtkd
