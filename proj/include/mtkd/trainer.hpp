// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtkd/checkpoint.hpp"
#include "mtkd/data.hpp"
#include "mtkd/distill.hpp"
#include "mtkd/eval.hpp"
#include "mtkd/model.hpp"

namespace mtkd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::int64_t t = 0;  ///< completed steps
};

/// One bias-corrected Adam update over `params` using their accumulated
/// gradients (a missing gradient counts as zero). State is created on the
/// first call. Any non-finite gradient throws NumericError before anything
/// is modified.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state, double lr, const AdamConfig& cfg = {});

/// Linear warmup to `lr` over `warmup_steps`, then constant. `step` counts
/// from 1.
double lr_at(std::int64_t step, double lr, std::int64_t warmup_steps);

/// Global L2 norm over all present gradients, accumulated in double.
template <typename T>
double grad_norm(std::span<Tensor<T>* const> params);

/// Rescales every gradient so that the global norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>* const> params, double max_norm);

struct TrainConfig {
  std::int64_t steps = 2000;
  double lr = 3e-4;
  AdamConfig adam;
  double grad_clip = 1.0;
  std::int64_t warmup_steps = 100;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 50;
  int batch_size = 16;
  int seq_len = 128;
  double val_fraction = 0.1;
  /// Validation batches used for perplexity and distillation loss; 0 = all.
  std::size_t max_val_batches = 0;
  DistillConfig distill;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Losses and schedule of one optimizer step.
struct StepRecord {
  std::int64_t step = 0;
  LossBreakdown loss;
  std::vector<double> alpha_mean;  ///< per teacher; empty for teacher training
  double lr = 0.0;
  double grad_norm = 0.0;  ///< before clipping
  double wall_ms = 0.0;    ///< since the start of the run
};

/// Header of the metrics CSV for K teachers.
std::string metrics_header(std::size_t n_teachers);
/// One metrics CSV row; floats use %.17g so rows are bit-faithful.
std::string metrics_row(const StepRecord& r);

struct RunOptions {
  std::filesystem::path checkpoint_path;  ///< written at the end (or on abort) when set
  std::filesystem::path metrics_path;     ///< step,total,kd,ce,feat,alpha_k...,lr
  std::filesystem::path timing_path;      ///< step,wall_ms
  /// Called for every logged row.
  std::function<void(const StepRecord&)> on_log;
  /// Identifiers of the teachers, stored in the student checkpoint metadata.
  std::vector<std::string> teacher_ids;
  bool evaluate = true;  ///< initial/final validation metrics
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> history;  ///< every step
  std::vector<StepRecord> log;      ///< rows written to the metrics CSV
  double initial_val_perplexity = 0.0;
  double final_val_perplexity = 0.0;
  /// Held-out distillation loss before and after (distillation runs only).
  double initial_val_distill_loss = 0.0;
  double final_val_distill_loss = 0.0;
  std::int64_t val_tokens = 0;
};

/// Thrown when a step produces a non-finite loss or gradient. The parameters
/// are those after the last completed step, and the checkpoint of them has
/// been written if a path was given.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, std::int64_t step) : NumericError(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

/// Masked next-token cross-entropy training from a fresh initialization.
TrainResult train_teacher(const ModelConfig& model_cfg, const std::vector<std::string>& documents,
                          const TrainConfig& cfg, const RunOptions& options = {});

/// Trains a fresh student against frozen teachers. Teachers must share the
/// student's vocabulary; none of their parameters change.
TrainResult distill(const ModelConfig& student_cfg, std::vector<Transformer<float>*> teachers,
                    const std::vector<std::string>& documents, const TrainConfig& cfg,
                    const RunOptions& options = {});

/// Mean of `kd` over the last `window` history steps.
double smoothed_kd(std::span<const StepRecord> history, std::size_t window);

struct SweepConfig {
  std::vector<int> k_values;
  std::vector<std::uint64_t> student_seeds;  ///< each overrides TrainConfig::seed
  GenerationBleuConfig bleu;
  std::size_t kd_window = 100;
  bool compute_bleu = true;
};

/// For each K, distills fresh students (one per seed) under the first K
/// teachers of the pool and reports held-out metrics; rows hold the median
/// over seeds.
SweepReport sweep_teachers(const std::vector<std::string>& documents, const ModelConfig& student_cfg,
                           std::vector<Transformer<float>*> teacher_pool, const TrainConfig& cfg,
                           const SweepConfig& sweep,
                           const std::function<void(const SweepRun&)>& on_run = {});

/// Validation split batches for cfg (first max_val_batches of them).
std::vector<Batch> validation_batches(const std::vector<std::string>& documents, const TrainConfig& cfg);
/// Validation documents in corpus order.
std::vector<std::string> validation_documents(const std::vector<std::string>& documents, double val_fraction);

}  // namespace mtkd
