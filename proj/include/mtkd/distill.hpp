// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtkd/autodiff.hpp"
#include "mtkd/model.hpp"
#include "mtkd/tensor.hpp"

namespace mtkd {

// Multi-teacher distillation objective.
//
// Every teacher k supplies probability rows P_k(y|x) (one row per position)
// and tapped hidden states h_k. The student is trained against
//
//   alpha_k(x) = (1 / H(P_k)) / sum_j (1 / H(P_j))       inverse-entropy weights
//   P_T        = sum_k alpha_k P_k                        fused target
//   L_KD       = tau^2 * mean_pos KL(P_T || P_S)
//   L_CE       = mean_pos -log P_S(target)
//   L_feat     = sum_k beta_k mean_pos ||proj_k(h_S) - h_k||^2
//   L          = lambda L_KD + (1 - lambda) L_CE + mu L_feat
//
// Entropies are in nats and floored at entropy_floor so one-hot rows keep a
// finite (and largest) weight. PAD targets carry zero weight in every mean.

enum class WeightingMode { uniform, entropy_dynamic };
/// Whether alpha is computed per position or from the per-sequence mean
/// entropy of each teacher.
enum class EntropyGranularity { position, sequence };
enum class BetaMode { uniform, mirror_alpha, fixed };

struct TapPair {
  int student = -1;
  int teacher = -1;
  bool operator==(const TapPair&) const = default;
};

struct DistillConfig {
  double lambda = 0.7;
  double mu = 0.1;
  double tau = 1.0;
  double entropy_floor = 1e-6;
  WeightingMode weighting_mode = WeightingMode::entropy_dynamic;
  EntropyGranularity entropy_granularity = EntropyGranularity::position;
  BetaMode beta_mode = BetaMode::uniform;
  std::vector<double> beta_fixed;
  /// One (student tap, teacher tap) pair per teacher; empty pairs each
  /// teacher's last block with the student's last block.
  std::vector<TapPair> tap_map;

  void validate(std::size_t n_teachers) const;
};

std::string to_string(WeightingMode m);
std::string to_string(EntropyGranularity g);
std::string to_string(BetaMode m);
WeightingMode parse_weighting_mode(const std::string& s);
EntropyGranularity parse_entropy_granularity(const std::string& s);
BetaMode parse_beta_mode(const std::string& s);

nlohmann::json to_json(const DistillConfig& cfg);
DistillConfig distill_config_from_json(const nlohmann::json& j);

struct LossBreakdown {
  double kd = 0.0;
  double ce = 0.0;
  double feat = 0.0;
  double total = 0.0;
};

// ---------------------------------------------------------------------------
// Scalar formulas.

/// max(-sum p ln p, floor) with 0 ln 0 = 0. Rows must sum to 1 within 1e-5.
double entropy(std::span<const double> p, double floor = 1e-6);

/// Inverse-entropy weights normalized to sum to 1. Every entropy must already
/// be floored (>= floor).
std::vector<double> entropy_weights(std::span<const double> entropies, double floor = 1e-6);

/// sum_k alpha_k rows_k.
std::vector<double> fuse_teachers(std::span<const double> alpha, const std::vector<std::vector<double>>& rows);

/// lambda kd + (1 - lambda) ce + mu feat.
LossBreakdown total_loss(double kd, double ce, double feat, double lambda, double mu);

/// uniform: 1/K each; mirror_alpha: alpha_mean; fixed: the given list.
std::vector<double> beta_weights(BetaMode mode, std::span<const double> alpha_mean,
                                 std::span<const double> fixed = {});

// ---------------------------------------------------------------------------
// Batched, differentiable forms.

/// Output of one frozen teacher on a batch. Carries no gradient.
template <typename T>
struct TeacherOutput {
  Matrix<T> probs;               ///< rows x vocab, temperature-tau softmax
  std::map<int, Matrix<T>> hidden;  ///< tap -> rows x d_model_k
};

template <typename T>
struct FusionTargets {
  Matrix<T> alpha;                 ///< rows x K
  Matrix<T> fused;                 ///< rows x vocab
  std::vector<double> alpha_mean;  ///< per teacher, over weighted rows
  std::vector<double> beta;        ///< per teacher
};

/// Row weights for masked means: 1/count on rows whose target is not PAD.
template <typename T>
std::vector<T> mean_weights(std::span<const int> targets, int pad_id);

/// Computes per-row entropies of every teacher, alpha, the fused rows, and
/// beta. `row_weights` selects the rows that enter alpha_mean and (in
/// sequence granularity) the per-sequence mean entropies; `seq_len` groups
/// rows into sequences.
template <typename T>
FusionTargets<T> distill_step_targets(const std::vector<TeacherOutput<T>>& teachers, const DistillConfig& cfg,
                                      std::span<const T> row_weights, Index seq_len);

/// sum_r w_r sum_y p(y) (ln p(y) - log_q(y)) against constant target rows.
template <typename T>
Var<T> kl_divergence_rows(const Matrix<T>& target, Var<T> student_log_probs, std::span<const T> row_weights);

/// tau^2 * KL(P_T || softmax(logits / tau)), weighted over rows.
template <typename T>
Var<T> kd_loss(const Matrix<T>& fused, Var<T> student_logits, double tau, std::span<const T> row_weights);

/// -sum_r w_r log_probs(r, targets[r]).
template <typename T>
Var<T> ce_loss(std::span<const int> targets, Var<T> student_log_probs, std::span<const T> row_weights);

/// One alignment term of the feature loss.
template <typename T>
struct FeatureTerm {
  Var<T> student_hidden;
  const Matrix<T>* teacher_hidden = nullptr;
  std::optional<Var<T>> projection;  ///< d_student x d_teacher, required on width mismatch
  double beta = 0.0;
};

/// sum_k beta_k sum_r w_r ||proj_k(h_S)_r - h_k,r||^2.
template <typename T>
Var<T> feature_loss(std::span<const FeatureTerm<T>> terms, std::span<const T> row_weights);

template <typename T>
struct ObjectiveVars {
  Var<T> total, kd, ce, feat;
  LossBreakdown values;
};

template <typename T>
ObjectiveVars<T> total_loss(Var<T> kd, Var<T> ce, Var<T> feat, double lambda, double mu);

// ---------------------------------------------------------------------------
// Composition over models.

/// Learnable student-to-teacher width maps, one slot per teacher. Slots are
/// empty where the tapped widths already agree.
template <typename T>
struct FeatureProjections {
  std::vector<std::optional<Tensor<T>>> maps;

  static FeatureProjections create(const ModelConfig& student, const std::vector<ModelConfig>& teachers,
                                   std::uint64_t seed);
  std::vector<Tensor<T>*> trainable();
};

/// Name prefix for projection tensors inside checkpoints.
inline constexpr const char* kProjectionPrefix = "proj.";

/// Resolves cfg.tap_map against the actual models (defaults to last blocks).
std::vector<TapPair> resolve_tap_map(const DistillConfig& cfg, const ModelConfig& student,
                                     const std::vector<ModelConfig>& teachers);

/// Frozen forward pass of a teacher, softened by tau.
template <typename T>
TeacherOutput<T> teacher_output(Transformer<T>& teacher, const IndexMatrix& inputs, double tau,
                                std::span<const int> taps);

template <typename T>
struct DistillStep {
  ObjectiveVars<T> objective;
  FusionTargets<T> targets;
};

/// Builds the full objective for one batch on `tape`: teacher forwards in
/// ascending index order, fusion, the student forward, and all loss terms.
template <typename T>
DistillStep<T> distill_objective(Tape<T>& tape, Transformer<T>& student, std::vector<Transformer<T>*> teachers,
                                 FeatureProjections<T>& projections, const IndexMatrix& inputs,
                                 const IndexMatrix& targets, const DistillConfig& cfg, int pad_id);

}  // namespace mtkd
