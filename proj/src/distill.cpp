// SPDX-License-Identifier: Apache-2.0
#include "mtkd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtkd/ops.hpp"
#include "mtkd/rng.hpp"

namespace mtkd {

namespace {

constexpr double kRowSumTolerance = 1e-5;

template <typename Row>
double row_entropy(const Row& p, double floor, const char* who) {
  double sum = 0.0, h = 0.0;
  for (Index i = 0; i < static_cast<Index>(p.size()); ++i) {
    const double v = static_cast<double>(p[i]);
    if (!(v >= 0.0)) throw ValidationError(std::string(who) + ": negative or NaN probability");
    sum += v;
    if (v > 0.0) h -= v * std::log(v);
  }
  if (std::abs(sum - 1.0) > kRowSumTolerance)
    throw ValidationError(std::string(who) + ": probability row sums to " + std::to_string(sum));
  return std::max(h, floor);
}

}  // namespace

void DistillConfig::validate(std::size_t n_teachers) const {
  auto fail = [](const std::string& m) { throw ValidationError("distill config: " + m); };
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0, 1]");
  if (!(mu >= 0.0)) fail("mu must be nonnegative");
  if (!(tau > 0.0)) fail("tau must be positive");
  if (!(entropy_floor > 0.0)) fail("entropy_floor must be positive");
  if (beta_mode == BetaMode::fixed) {
    if (beta_fixed.size() != n_teachers)
      fail("beta_fixed has " + std::to_string(beta_fixed.size()) + " entries for " + std::to_string(n_teachers) +
           " teachers");
    double s = 0.0;
    for (double b : beta_fixed) {
      if (!(b >= 0.0)) fail("beta_fixed entries must be nonnegative");
      s += b;
    }
    if (std::abs(s - 1.0) > 1e-6) fail("beta_fixed must sum to 1");
  }
  if (!tap_map.empty() && tap_map.size() != n_teachers)
    fail("tap_map needs one pair per teacher (" + std::to_string(n_teachers) + ")");
}

std::string to_string(WeightingMode m) { return m == WeightingMode::uniform ? "uniform" : "entropy_dynamic"; }
std::string to_string(EntropyGranularity g) { return g == EntropyGranularity::position ? "position" : "sequence"; }
std::string to_string(BetaMode m) {
  switch (m) {
    case BetaMode::uniform: return "uniform";
    case BetaMode::mirror_alpha: return "mirror_alpha";
    case BetaMode::fixed: return "fixed";
  }
  return "uniform";
}

WeightingMode parse_weighting_mode(const std::string& s) {
  if (s == "uniform") return WeightingMode::uniform;
  if (s == "entropy_dynamic") return WeightingMode::entropy_dynamic;
  throw ValidationError("unknown weighting mode '" + s + "'");
}

EntropyGranularity parse_entropy_granularity(const std::string& s) {
  if (s == "position") return EntropyGranularity::position;
  if (s == "sequence") return EntropyGranularity::sequence;
  throw ValidationError("unknown entropy granularity '" + s + "'");
}

BetaMode parse_beta_mode(const std::string& s) {
  if (s == "uniform") return BetaMode::uniform;
  if (s == "mirror_alpha") return BetaMode::mirror_alpha;
  if (s == "fixed") return BetaMode::fixed;
  throw ValidationError("unknown beta mode '" + s + "'");
}

nlohmann::json to_json(const DistillConfig& cfg) {
  nlohmann::json taps = nlohmann::json::array();
  for (const auto& t : cfg.tap_map) taps.push_back({t.student, t.teacher});
  return {{"lambda", cfg.lambda},
          {"mu", cfg.mu},
          {"tau", cfg.tau},
          {"entropy_floor", cfg.entropy_floor},
          {"weighting_mode", to_string(cfg.weighting_mode)},
          {"entropy_granularity", to_string(cfg.entropy_granularity)},
          {"beta_mode", to_string(cfg.beta_mode)},
          {"beta_fixed", cfg.beta_fixed},
          {"tap_map", taps}};
}

DistillConfig distill_config_from_json(const nlohmann::json& j) {
  DistillConfig cfg;
  try {
    cfg.lambda = j.at("lambda").get<double>();
    cfg.mu = j.at("mu").get<double>();
    cfg.tau = j.at("tau").get<double>();
    cfg.entropy_floor = j.at("entropy_floor").get<double>();
    cfg.weighting_mode = parse_weighting_mode(j.at("weighting_mode").get<std::string>());
    cfg.entropy_granularity = parse_entropy_granularity(j.value("entropy_granularity", std::string("position")));
    cfg.beta_mode = parse_beta_mode(j.at("beta_mode").get<std::string>());
    cfg.beta_fixed = j.value("beta_fixed", std::vector<double>{});
    for (const auto& t : j.value("tap_map", nlohmann::json::array()))
      cfg.tap_map.push_back({t.at(0).get<int>(), t.at(1).get<int>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("distill config: ") + e.what());
  }
  return cfg;
}

double entropy(std::span<const double> p, double floor) {
  if (p.empty()) throw ValidationError("entropy: empty distribution");
  return row_entropy(p, floor, "entropy");
}

std::vector<double> entropy_weights(std::span<const double> entropies, double floor) {
  if (entropies.empty()) throw ValidationError("entropy_weights: empty teacher set");
  std::vector<double> w(entropies.size());
  double total = 0.0;
  for (std::size_t k = 0; k < entropies.size(); ++k) {
    if (!(entropies[k] >= floor))
      throw ValidationError("entropy_weights: entropy " + std::to_string(entropies[k]) + " below floor " +
                            std::to_string(floor));
    w[k] = 1.0 / entropies[k];
    total += w[k];
  }
  for (double& x : w) x /= total;
  return w;
}

std::vector<double> fuse_teachers(std::span<const double> alpha, const std::vector<std::vector<double>>& rows) {
  if (alpha.size() != rows.size())
    throw ValidationError("fuse_teachers: " + std::to_string(alpha.size()) + " weights for " +
                          std::to_string(rows.size()) + " teacher rows");
  if (rows.empty()) throw ValidationError("fuse_teachers: empty teacher set");
  std::vector<double> out(rows[0].size(), 0.0);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].size() != out.size()) throw DimensionError("fuse_teachers: teacher rows differ in width");
    for (std::size_t y = 0; y < out.size(); ++y) out[y] += alpha[k] * rows[k][y];
  }
  return out;
}

LossBreakdown total_loss(double kd, double ce, double feat, double lambda, double mu) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("total_loss: lambda must lie in [0, 1]");
  if (!(mu >= 0.0)) throw ValidationError("total_loss: mu must be nonnegative");
  return {kd, ce, feat, lambda * kd + (1.0 - lambda) * ce + mu * feat};
}

std::vector<double> beta_weights(BetaMode mode, std::span<const double> alpha_mean, std::span<const double> fixed) {
  const std::size_t k = alpha_mean.size();
  if (k == 0) throw ValidationError("beta_weights: empty teacher set");
  switch (mode) {
    case BetaMode::uniform:
      return std::vector<double>(k, 1.0 / static_cast<double>(k));
    case BetaMode::mirror_alpha:
      return {alpha_mean.begin(), alpha_mean.end()};
    case BetaMode::fixed: {
      if (fixed.size() != k)
        throw ValidationError("beta_weights: fixed list has " + std::to_string(fixed.size()) + " entries for " +
                              std::to_string(k) + " teachers");
      double s = 0.0;
      for (double b : fixed) {
        if (!(b >= 0.0)) throw ValidationError("beta_weights: negative entry in fixed list");
        s += b;
      }
      if (std::abs(s - 1.0) > 1e-6) throw ValidationError("beta_weights: fixed list must sum to 1");
      return {fixed.begin(), fixed.end()};
    }
  }
  throw ValidationError("beta_weights: unknown mode");
}

template <typename T>
std::vector<T> mean_weights(std::span<const int> targets, int pad_id) {
  const auto count = std::count_if(targets.begin(), targets.end(), [pad_id](int t) { return t != pad_id; });
  std::vector<T> w(targets.size(), T(0));
  if (count == 0) return w;
  const T inv = T(1) / static_cast<T>(count);
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (targets[i] != pad_id) w[i] = inv;
  return w;
}

template <typename T>
FusionTargets<T> distill_step_targets(const std::vector<TeacherOutput<T>>& teachers, const DistillConfig& cfg,
                                      std::span<const T> row_weights, Index seq_len) {
  const std::size_t K = teachers.size();
  if (K == 0) throw ValidationError("distill_step_targets: no teachers");
  const Index rows = teachers[0].probs.rows();
  const Index vocab = teachers[0].probs.cols();
  for (std::size_t k = 1; k < K; ++k) {
    if (teachers[k].probs.cols() != vocab)
      throw ValidationError("distill_step_targets: teacher " + std::to_string(k) + " has vocabulary " +
                            std::to_string(teachers[k].probs.cols()) + ", teacher 0 has " + std::to_string(vocab));
    if (teachers[k].probs.rows() != rows)
      throw DimensionError("distill_step_targets: teachers disagree on sequence length");
  }
  if (!row_weights.empty() && static_cast<Index>(row_weights.size()) != rows)
    throw DimensionError("distill_step_targets: row weights do not match rows");
  if (seq_len <= 0 || rows % seq_len != 0) throw DimensionError("distill_step_targets: bad seq_len");
  auto weight = [&](Index r) { return row_weights.empty() ? 1.0 : static_cast<double>(row_weights[r]); };

  FusionTargets<T> out;
  Eigen::MatrixXd alpha(rows, static_cast<Index>(K));
  if (cfg.weighting_mode == WeightingMode::uniform) {
    alpha.setConstant(1.0 / static_cast<double>(K));
  } else {
    Eigen::MatrixXd h(rows, static_cast<Index>(K));
    for (std::size_t k = 0; k < K; ++k)
      for (Index r = 0; r < rows; ++r)
        h(r, static_cast<Index>(k)) = row_entropy(teachers[k].probs.row(r), cfg.entropy_floor, "teacher row");
    if (cfg.entropy_granularity == EntropyGranularity::sequence) {
      for (Index s0 = 0; s0 < rows; s0 += seq_len) {
        double wsum = 0.0;
        for (Index r = s0; r < s0 + seq_len; ++r) wsum += weight(r) > 0.0 ? 1.0 : 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          for (Index r = s0; r < s0 + seq_len; ++r)
            if (wsum == 0.0 || weight(r) > 0.0) acc += h(r, static_cast<Index>(k));
          const double mean = std::max(acc / (wsum == 0.0 ? static_cast<double>(seq_len) : wsum), cfg.entropy_floor);
          h.block(s0, static_cast<Index>(k), seq_len, 1).setConstant(mean);
        }
      }
    }
    std::vector<double> hr(K);
    for (Index r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < K; ++k) hr[k] = h(r, static_cast<Index>(k));
      const std::vector<double> a = entropy_weights(hr, cfg.entropy_floor);
      for (std::size_t k = 0; k < K; ++k) alpha(r, static_cast<Index>(k)) = a[k];
    }
  }
  out.alpha = alpha.cast<T>();

  // Ascending teacher order keeps the reduction deterministic.
  out.fused = Matrix<T>::Zero(rows, vocab);
  for (std::size_t k = 0; k < K; ++k)
    out.fused.array() += teachers[k].probs.array().colwise() * out.alpha.col(static_cast<Index>(k)).array();

  out.alpha_mean.assign(K, 0.0);
  double wtotal = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const double w = weight(r);
    if (w <= 0.0) continue;
    wtotal += w;
    for (std::size_t k = 0; k < K; ++k) out.alpha_mean[k] += w * alpha(r, static_cast<Index>(k));
  }
  for (double& a : out.alpha_mean) a = wtotal > 0.0 ? a / wtotal : 1.0 / static_cast<double>(K);
  out.beta = beta_weights(cfg.beta_mode, out.alpha_mean, cfg.beta_fixed);
  return out;
}

template <typename T>
Var<T> kl_divergence_rows(const Matrix<T>& target, Var<T> student_log_probs, std::span<const T> row_weights) {
  const Matrix<T>& lq = student_log_probs.value();
  if (target.rows() != lq.rows() || target.cols() != lq.cols())
    throw DimensionError("kd_loss: target " + shape_str(target) + " vs student " + shape_str(lq));
  if (static_cast<Index>(row_weights.size()) != lq.rows())
    throw DimensionError("kd_loss: " + std::to_string(row_weights.size()) + " row weights for " +
                         std::to_string(lq.rows()) + " rows");
  double acc = 0.0;
  for (Index r = 0; r < lq.rows(); ++r) {
    const T w = row_weights[r];
    if (w == T(0)) continue;
    double row = 0.0;
    for (Index y = 0; y < lq.cols(); ++y) {
      const double p = static_cast<double>(target(r, y));
      if (p > 0.0) row += p * (std::log(p) - static_cast<double>(lq(r, y)));
    }
    acc += static_cast<double>(w) * row;
  }
  Matrix<T> out(1, 1);
  out(0, 0) = static_cast<T>(acc);
  auto p = std::make_shared<Matrix<T>>(target);
  std::vector<T> w(row_weights.begin(), row_weights.end());
  return student_log_probs.tape().record(
      "kd_loss", std::move(out), {student_log_probs},
      [student_log_probs, p, w = std::move(w)](Tape<T>& t, const Matrix<T>& g) {
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> wv(w.data(), static_cast<Index>(w.size()));
        t.accumulate(student_log_probs, (p->array().colwise() * (wv.array() * (-g(0, 0)))).matrix());
      });
}

template <typename T>
Var<T> kd_loss(const Matrix<T>& fused, Var<T> student_logits, double tau, std::span<const T> row_weights) {
  if (!(tau > 0.0)) throw ValidationError("kd_loss: tau must be positive");
  Var<T> z = tau == 1.0 ? student_logits : scale(student_logits, static_cast<T>(1.0 / tau));
  Var<T> kl = kl_divergence_rows(fused, log_softmax_rows(z), row_weights);
  return tau == 1.0 ? kl : scale(kl, static_cast<T>(tau * tau));
}

template <typename T>
Var<T> ce_loss(std::span<const int> targets, Var<T> student_log_probs, std::span<const T> row_weights) {
  const Index vocab = student_log_probs.cols();
  for (std::size_t r = 0; r < targets.size(); ++r)
    if (r < row_weights.size() && row_weights[r] != T(0) && (targets[r] < 0 || targets[r] >= vocab))
      throw ValidationError("ce_loss: target id " + std::to_string(targets[r]) + " outside vocabulary of " +
                            std::to_string(vocab));
  return scale(pick_weighted_sum(student_log_probs, targets, row_weights), T(-1));
}

template <typename T>
Var<T> feature_loss(std::span<const FeatureTerm<T>> terms, std::span<const T> row_weights) {
  if (terms.empty()) throw ValidationError("feature_loss: no teachers");
  Var<T> acc;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const FeatureTerm<T>& term = terms[k];
    if (term.teacher_hidden == nullptr) throw ValidationError("feature_loss: missing teacher hidden state");
    Var<T> hs = term.student_hidden;
    if (term.projection) {
      hs = matmul(hs, *term.projection);
    } else if (hs.cols() != term.teacher_hidden->cols()) {
      throw ValidationError("feature_loss: teacher " + std::to_string(k) + " width " +
                            std::to_string(term.teacher_hidden->cols()) + " differs from student width " +
                            std::to_string(hs.cols()) + " and no projection was given");
    }
    Var<T> d = scale(row_sq_dist(hs, *term.teacher_hidden, row_weights), static_cast<T>(term.beta));
    acc = k == 0 ? d : add(acc, d);
  }
  return acc;
}

template <typename T>
ObjectiveVars<T> total_loss(Var<T> kd, Var<T> ce, Var<T> feat, double lambda, double mu) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("total_loss: lambda must lie in [0, 1]");
  if (!(mu >= 0.0)) throw ValidationError("total_loss: mu must be nonnegative");
  ObjectiveVars<T> o;
  o.kd = kd;
  o.ce = ce;
  o.feat = feat;
  o.total = add(add(scale(kd, static_cast<T>(lambda)), scale(ce, static_cast<T>(1.0 - lambda))),
                scale(feat, static_cast<T>(mu)));
  o.values = {static_cast<double>(kd.item()), static_cast<double>(ce.item()), static_cast<double>(feat.item()),
              static_cast<double>(o.total.item())};
  return o;
}

template <typename T>
FeatureProjections<T> FeatureProjections<T>::create(const ModelConfig& student,
                                                    const std::vector<ModelConfig>& teachers, std::uint64_t seed) {
  FeatureProjections out;
  Rng rng(derive_seed(seed, 0x50524f4aULL));
  for (std::size_t k = 0; k < teachers.size(); ++k) {
    if (teachers[k].d_model == student.d_model) {
      out.maps.emplace_back(std::nullopt);
      continue;
    }
    Matrix<T> w(student.d_model, teachers[k].d_model);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(0.02 * rng.normal());
    out.maps.emplace_back(Tensor<T>(kProjectionPrefix + std::to_string(k) + ".weight", std::move(w), true));
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>*> FeatureProjections<T>::trainable() {
  std::vector<Tensor<T>*> out;
  for (auto& m : maps)
    if (m) out.push_back(&*m);
  return out;
}

std::vector<TapPair> resolve_tap_map(const DistillConfig& cfg, const ModelConfig& student,
                                     const std::vector<ModelConfig>& teachers) {
  std::vector<TapPair> pairs;
  if (cfg.tap_map.empty()) {
    for (const auto& t : teachers) pairs.push_back({student.n_layers - 1, t.n_layers - 1});
    return pairs;
  }
  if (cfg.tap_map.size() != teachers.size())
    throw ValidationError("tap_map needs one pair per teacher (" + std::to_string(teachers.size()) + ")");
  for (std::size_t k = 0; k < teachers.size(); ++k) {
    const TapPair p = cfg.tap_map[k];
    if (p.student < 0 || p.student >= student.n_layers)
      throw ValidationError("tap_map: student layer " + std::to_string(p.student) + " out of range");
    if (p.teacher < 0 || p.teacher >= teachers[k].n_layers)
      throw ValidationError("tap_map: teacher " + std::to_string(k) + " layer " + std::to_string(p.teacher) +
                            " out of range");
    pairs.push_back(p);
  }
  return pairs;
}

template <typename T>
TeacherOutput<T> teacher_output(Transformer<T>& teacher, const IndexMatrix& inputs, double tau,
                                std::span<const int> taps) {
  Tape<T> tape;
  const ForwardResult<T> fr = teacher.forward(tape, inputs, false, taps);
  TeacherOutput<T> out;
  if (tau == 1.0) {
    out.probs = softmax_rows<T>(fr.logits.value());
  } else {
    out.probs = softmax_rows<T>(Matrix<T>(fr.logits.value() * static_cast<T>(1.0 / tau)));
  }
  for (int t : taps) out.hidden.emplace(t, fr.hidden.at(t).value());
  return out;
}

template <typename T>
DistillStep<T> distill_objective(Tape<T>& tape, Transformer<T>& student, std::vector<Transformer<T>*> teachers,
                                 FeatureProjections<T>& projections, const IndexMatrix& inputs,
                                 const IndexMatrix& targets, const DistillConfig& cfg, int pad_id) {
  const std::size_t K = teachers.size();
  if (K == 0) throw ValidationError("distill: at least one teacher is required");
  cfg.validate(K);
  if (projections.maps.size() != K) throw ValidationError("distill: projection count does not match teachers");
  std::vector<ModelConfig> tcfg;
  for (std::size_t k = 0; k < K; ++k) {
    if (teachers[k]->config().vocab_size != student.config().vocab_size)
      throw ValidationError("distill: teacher " + std::to_string(k) + " vocabulary " +
                            std::to_string(teachers[k]->config().vocab_size) + " differs from student vocabulary " +
                            std::to_string(student.config().vocab_size));
    tcfg.push_back(teachers[k]->config());
  }
  if (targets.rows() != inputs.rows() || targets.cols() != inputs.cols())
    throw DimensionError("distill: targets " + shape_str(targets) + " vs inputs " + shape_str(inputs));
  const std::vector<TapPair> pairs = resolve_tap_map(cfg, student.config(), tcfg);

  std::vector<int> tflat(static_cast<std::size_t>(targets.size()));
  std::copy(targets.data(), targets.data() + targets.size(), tflat.begin());
  const std::vector<T> w = mean_weights<T>(tflat, pad_id);

  std::vector<TeacherOutput<T>> outs;
  outs.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    const int tap = pairs[k].teacher;
    outs.push_back(teacher_output(*teachers[k], inputs, cfg.tau, std::span<const int>(&tap, 1)));
  }

  DistillStep<T> step;
  step.targets = distill_step_targets(outs, cfg, std::span<const T>(w), inputs.cols());

  std::vector<int> stud_taps;
  for (const auto& p : pairs) stud_taps.push_back(p.student);
  std::sort(stud_taps.begin(), stud_taps.end());
  stud_taps.erase(std::unique(stud_taps.begin(), stud_taps.end()), stud_taps.end());
  const ForwardResult<T> fr = student.forward(tape, inputs, true, stud_taps);

  Var<T> logp = log_softmax_rows(fr.logits);
  Var<T> ce = ce_loss(std::span<const int>(tflat), logp, std::span<const T>(w));
  Var<T> kd = kd_loss(step.targets.fused, fr.logits, cfg.tau, std::span<const T>(w));

  std::vector<FeatureTerm<T>> terms;
  for (std::size_t k = 0; k < K; ++k) {
    FeatureTerm<T> term;
    term.student_hidden = fr.hidden.at(pairs[k].student);
    term.teacher_hidden = &outs[k].hidden.at(pairs[k].teacher);
    if (projections.maps[k]) term.projection = tape.leaf(*projections.maps[k]);
    term.beta = step.targets.beta[k];
    terms.push_back(term);
  }
  Var<T> feat = feature_loss(std::span<const FeatureTerm<T>>(terms), std::span<const T>(w));
  step.objective = total_loss(kd, ce, feat, cfg.lambda, cfg.mu);
  return step;
}

#define MTKD_INSTANTIATE_DISTILL(T)                                                                            \
  template std::vector<T> mean_weights<T>(std::span<const int>, int);                                         \
  template FusionTargets<T> distill_step_targets(const std::vector<TeacherOutput<T>>&, const DistillConfig&,   \
                                                 std::span<const T>, Index);                                  \
  template Var<T> kl_divergence_rows(const Matrix<T>&, Var<T>, std::span<const T>);                           \
  template Var<T> kd_loss(const Matrix<T>&, Var<T>, double, std::span<const T>);                              \
  template Var<T> ce_loss(std::span<const int>, Var<T>, std::span<const T>);                                  \
  template Var<T> feature_loss(std::span<const FeatureTerm<T>>, std::span<const T>);                          \
  template ObjectiveVars<T> total_loss(Var<T>, Var<T>, Var<T>, double, double);                               \
  template struct FeatureProjections<T>;                                                                      \
  template TeacherOutput<T> teacher_output(Transformer<T>&, const IndexMatrix&, double, std::span<const int>); \
  template DistillStep<T> distill_objective(Tape<T>&, Transformer<T>&, std::vector<Transformer<T>*>,          \
                                            FeatureProjections<T>&, const IndexMatrix&, const IndexMatrix&,   \
                                            const DistillConfig&, int);

MTKD_INSTANTIATE_DISTILL(float)
MTKD_INSTANTIATE_DISTILL(double)

}  // namespace mtkd
