// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "mtkd/distill.hpp"
#include "mtkd/errors.hpp"
#include "mtkd/ops.hpp"
#include "support/suites.hpp"

using namespace mtkd;

namespace {

void require_suite(const testing::SuiteResult& s) {
  INFO(s.name << ": " << s.failures << "/" << s.cases << " failed; first: " << s.detail);
  CHECK(s.passed());
}

TeacherOutput<double> teacher_rows(std::initializer_list<std::initializer_list<double>> rows) {
  TeacherOutput<double> t;
  t.probs = Matrix<double>(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) t.probs(r, c++) = v;
    ++r;
  }
  return t;
}

}  // namespace

TEST_CASE("closed-form values") {
  for (const auto& s : testing::closed_form_suites()) require_suite(s);
}

TEST_CASE("weight simplex property") { require_suite(testing::weight_simplex_suite(1000, 1)); }
TEST_CASE("entropy monotonicity property") { require_suite(testing::entropy_monotonicity_suite(1000, 2)); }
TEST_CASE("fusion validity and envelope property") { require_suite(testing::fusion_envelope_suite(1000, 3)); }
TEST_CASE("Gibbs nonnegativity property") { require_suite(testing::gibbs_suite(1000, 4)); }
TEST_CASE("lambda endpoint property") { require_suite(testing::lambda_endpoint_suite(1000, 5)); }

TEST_CASE("entropy validation") {
  CHECK_THROWS_AS(entropy(std::vector<double>{0.5, 0.2}), ValidationError);
  CHECK_THROWS_AS(entropy_weights(std::vector<double>{0.5, 0.0}), ValidationError);
  CHECK_THROWS_AS(entropy_weights(std::vector<double>{}), ValidationError);
}

TEST_CASE("beta weights") {
  const std::vector<double> am{0.7, 0.3};
  CHECK(beta_weights(BetaMode::uniform, std::vector<double>(4, 0.25)) == std::vector<double>(4, 0.25));
  CHECK(beta_weights(BetaMode::mirror_alpha, am) == am);
  CHECK(beta_weights(BetaMode::fixed, am, std::vector<double>{0.4, 0.6}) == std::vector<double>{0.4, 0.6});
  CHECK_THROWS_AS(beta_weights(BetaMode::fixed, am, std::vector<double>{0.4, 0.4}), ValidationError);
  CHECK_THROWS_AS(beta_weights(BetaMode::fixed, am, std::vector<double>{-0.5, 1.5}), ValidationError);
}

TEST_CASE("fusion targets examples") {
  DistillConfig cfg;
  SUBCASE("single teacher") {
    const std::vector<TeacherOutput<double>> one{teacher_rows({{0.2, 0.8}, {0.6, 0.4}})};
    const FusionTargets<double> f = distill_step_targets(one, cfg, std::span<const double>{}, 2);
    CHECK(f.alpha.isOnes(0));
    CHECK(f.fused == one[0].probs);
  }
  SUBCASE("identical teachers") {
    const TeacherOutput<double> a = teacher_rows({{0.1, 0.2, 0.7}});
    const std::vector<TeacherOutput<double>> two{a, a};
    const FusionTargets<double> f = distill_step_targets(two, cfg, std::span<const double>{}, 1);
    CHECK((f.fused - a.probs).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SUBCASE("certain teacher dominates") {
    const std::vector<TeacherOutput<double>> two{teacher_rows({{1.0, 0.0}}), teacher_rows({{0.5, 0.5}})};
    const FusionTargets<double> f = distill_step_targets(two, cfg, std::span<const double>{}, 1);
    const double w0 = (1 / 1e-6) / (1 / 1e-6 + 1 / std::log(2.0));
    CHECK(f.alpha(0, 0) == doctest::Approx(w0).epsilon(1e-12));
    CHECK(f.alpha(0, 0) > 0.999);
  }
  SUBCASE("uniform mode") {
    cfg.weighting_mode = WeightingMode::uniform;
    const std::vector<TeacherOutput<double>> two{teacher_rows({{1.0, 0.0}}), teacher_rows({{0.5, 0.5}})};
    const FusionTargets<double> f = distill_step_targets(two, cfg, std::span<const double>{}, 1);
    CHECK(f.alpha(0, 0) == 0.5);
    CHECK(f.fused(0, 0) == doctest::Approx(0.75));
  }
  SUBCASE("sequence granularity shares alpha within a sequence") {
    cfg.entropy_granularity = EntropyGranularity::sequence;
    const std::vector<TeacherOutput<double>> two{teacher_rows({{0.9, 0.1}, {0.5, 0.5}}),
                                                 teacher_rows({{0.6, 0.4}, {0.7, 0.3}})};
    const FusionTargets<double> f = distill_step_targets(two, cfg, std::span<const double>{}, 2);
    CHECK(f.alpha.row(0) == f.alpha.row(1));
    auto h = [](double p) { return -(p * std::log(p) + (1 - p) * std::log(1 - p)); };
    const double h0 = (h(0.9) + h(0.5)) / 2, h1 = (h(0.6) + h(0.7)) / 2;
    CHECK(f.alpha(0, 0) == doctest::Approx((1 / h0) / (1 / h0 + 1 / h1)).epsilon(1e-12));
  }
  SUBCASE("mirror beta follows weighted alpha mean") {
    cfg.beta_mode = BetaMode::mirror_alpha;
    const std::vector<TeacherOutput<double>> two{teacher_rows({{0.9, 0.1}, {0.5, 0.5}}),
                                                 teacher_rows({{0.6, 0.4}, {0.7, 0.3}})};
    const std::vector<double> w{1.0, 0.0};
    const FusionTargets<double> f = distill_step_targets(two, cfg, std::span<const double>(w), 2);
    CHECK(f.beta[0] == doctest::Approx(f.alpha(0, 0)));
    CHECK(f.alpha_mean[1] == doctest::Approx(f.alpha(0, 1)));
  }
  SUBCASE("vocabulary mismatch") {
    const std::vector<TeacherOutput<double>> two{teacher_rows({{0.5, 0.5}}), teacher_rows({{0.2, 0.3, 0.5}})};
    CHECK_THROWS_AS(distill_step_targets(two, cfg, std::span<const double>{}, 1), ValidationError);
  }
}

TEST_CASE("kd loss under temperature stays nonnegative") {
  std::mt19937_64 g(9);
  for (int c = 0; c < 200; ++c) {
    Matrix<double> fused(2, 5), z(2, 5);
    for (Index r = 0; r < 2; ++r) {
      const std::vector<double> p = testing::random_prob_row(g(), 5);
      for (Index y = 0; y < 5; ++y) fused(r, y) = p[static_cast<std::size_t>(y)];
    }
    for (Index i = 0; i < z.size(); ++i) z.data()[i] = std::normal_distribution<double>(0, 2)(g);
    const std::vector<double> w{0.5, 0.5};
    Tape<double> t;
    const double a = kd_loss(fused, t.constant(z), 1.0, std::span<const double>(w)).item();
    const double b = kd_loss(fused, t.constant(z), 2.0, std::span<const double>(w)).item();
    CHECK(a >= 0.0);
    CHECK(b >= 0.0);
  }
}

TEST_CASE("masked rows do not contribute") {
  Tape<double> t;
  Matrix<double> lp(2, 3);
  lp << std::log(0.2), std::log(0.3), std::log(0.5), -1e3, -1e3, 0.0;
  const std::vector<int> tg{2, 0};
  const std::vector<double> w{1.0, 0.0};
  CHECK(ce_loss(std::span<const int>(tg), t.constant(lp), std::span<const double>(w)).item() ==
        doctest::Approx(-std::log(0.5)));
  const std::vector<int> bad{2, 7};
  CHECK_NOTHROW(ce_loss(std::span<const int>(bad), t.constant(lp), std::span<const double>(w)));
  const std::vector<double> both{0.5, 0.5};
  CHECK_THROWS_AS(ce_loss(std::span<const int>(bad), t.constant(lp), std::span<const double>(both)), ValidationError);
  const std::vector<int> ids{1, 2, 258, 258};
  const std::vector<float> mw = mean_weights<float>(ids, 258);
  CHECK(mw == std::vector<float>{0.5f, 0.5f, 0.0f, 0.0f});
}

TEST_CASE("config validation and serialization") {
  DistillConfig cfg;
  CHECK_NOTHROW(cfg.validate(2));
  cfg.lambda = 1.5;
  CHECK_THROWS_AS(cfg.validate(2), ValidationError);
  cfg.lambda = 0.3;
  cfg.tau = 2.0;
  cfg.beta_mode = BetaMode::fixed;
  cfg.beta_fixed = {0.25, 0.75};
  cfg.entropy_granularity = EntropyGranularity::sequence;
  cfg.tap_map = {{1, 0}, {1, 3}};
  const DistillConfig back = distill_config_from_json(to_json(cfg));
  CHECK(back.lambda == cfg.lambda);
  CHECK(back.tau == cfg.tau);
  CHECK(back.beta_fixed == cfg.beta_fixed);
  CHECK(back.tap_map == cfg.tap_map);
  CHECK(back.entropy_granularity == EntropyGranularity::sequence);
  CHECK(parse_weighting_mode(to_string(WeightingMode::uniform)) == WeightingMode::uniform);
  CHECK_THROWS_AS(parse_beta_mode("nope"), ValidationError);
}

TEST_CASE("objective sends gradients to the student and projections only") {
  const ModelConfig sc{13, 8, 2, 2, 16, 5, {}};
  const std::vector<ModelConfig> tcs{{13, 8, 1, 2, 16, 5, {}}, {13, 12, 2, 3, 24, 5, {}}};
  Transformer<double> student(sc, 1);
  std::vector<Transformer<double>> tm{Transformer<double>(tcs[0], 2), Transformer<double>(tcs[1], 3)};
  std::vector<Transformer<double>*> teachers{&tm[0], &tm[1]};
  FeatureProjections<double> proj = FeatureProjections<double>::create(sc, tcs, 4);
  CHECK_FALSE(proj.maps[0].has_value());
  REQUIRE(proj.maps[1].has_value());
  CHECK(proj.maps[1]->data.rows() == 8);
  CHECK(proj.maps[1]->data.cols() == 12);

  IndexMatrix in(2, 5), tg(2, 5);
  for (Index i = 0; i < in.size(); ++i) {
    in.data()[i] = static_cast<int>(i % 12);
    tg.data()[i] = static_cast<int>((i * 5) % 12);
  }
  tg(1, 4) = 12;
  DistillConfig cfg;
  Tape<double> tape;
  const DistillStep<double> step = distill_objective(tape, student, teachers, proj, in, tg, cfg, 12);
  tape.backward(step.objective.total);
  for (const auto& p : student.parameters()) {
    INFO(p.name);
    CHECK(p.grad.has_value());
  }
  CHECK(proj.maps[1]->grad.has_value());
  for (const auto& t : tm)
    for (const auto& p : t.parameters()) CHECK_FALSE(p.grad.has_value());
  const LossBreakdown& v = step.objective.values;
  CHECK(v.kd >= 0.0);
  CHECK(v.ce >= 0.0);
  CHECK(v.feat >= 0.0);
  CHECK(std::fabs(v.total - (0.7 * v.kd + 0.3 * v.ce + 0.1 * v.feat)) <= 1e-6);
}
