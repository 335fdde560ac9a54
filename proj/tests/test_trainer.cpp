// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "mtkd/checkpoint.hpp"
#include "mtkd/errors.hpp"
#include "mtkd/trainer.hpp"
#include "support/suites.hpp"

using namespace mtkd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mtkd_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const ModelConfig kTiny{259, 16, 1, 2, 32, 16, {}};
const ModelConfig kTinyWide{259, 24, 1, 2, 32, 16, {}};

TrainConfig tiny_train(std::int64_t steps, std::uint64_t seed) {
  TrainConfig c;
  c.steps = steps;
  c.lr = 3e-3;
  c.warmup_steps = 5;
  c.seed = seed;
  c.eval_every = 5;
  c.batch_size = 4;
  c.seq_len = 16;
  c.val_fraction = 0.2;
  c.max_val_batches = 4;
  return c;
}

const std::vector<std::string>& corpus() {
  static const std::vector<std::string> docs = testing::synthetic_corpus(30, 60, 5);
  return docs;
}

}  // namespace

TEST_CASE("adam") {
  Tensor<double> p("p", Matrix<double>::Constant(1, 1, 2.0), true);
  std::vector<Tensor<double>*> ps{&p};
  AdamState<double> st;
  SUBCASE("zero gradient leaves parameters unchanged") {
    for (int i = 0; i < 5; ++i) {
      p.grad = Matrix<double>::Zero(1, 1);
      adam_step(std::span<Tensor<double>* const>(ps), st, 0.1);
    }
    CHECK(p.data(0, 0) == 2.0);
    CHECK(st.t == 5);
  }
  SUBCASE("first step moves by lr") {
    p.grad = Matrix<double>::Ones(1, 1);
    adam_step(std::span<Tensor<double>* const>(ps), st, 1e-3);
    // m_hat = 1, v_hat = 1: update = lr * 1 / (1 + eps).
    CHECK(p.data(0, 0) == doctest::Approx(2.0 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-14));
  }
  SUBCASE("hand-evaluated second step") {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01;
    double m = 0, v = 0, x = 2.0;
    const double g[] = {0.5, -1.5};
    for (int t = 1; t <= 2; ++t) {
      p.grad = Matrix<double>::Constant(1, 1, g[t - 1]);
      adam_step(std::span<Tensor<double>* const>(ps), st, lr);
      m = b1 * m + (1 - b1) * g[t - 1];
      v = b2 * v + (1 - b2) * g[t - 1] * g[t - 1];
      x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    }
    CHECK(p.data(0, 0) == doctest::Approx(x).epsilon(1e-12));
  }
  SUBCASE("non-finite gradient aborts before any change") {
    Tensor<double> q("q", Matrix<double>::Constant(1, 2, 1.0), true);
    std::vector<Tensor<double>*> both{&p, &q};
    p.grad = Matrix<double>::Ones(1, 1);
    q.grad = Matrix<double>::Constant(1, 2, std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_AS(adam_step(std::span<Tensor<double>* const>(both), st, 0.1), NumericError);
    CHECK(p.data(0, 0) == 2.0);
    CHECK(st.t == 0);
  }
}

TEST_CASE("warmup schedule") {
  CHECK(lr_at(1, 1e-3, 100) == doctest::Approx(1e-5));
  CHECK(lr_at(50, 1e-3, 100) == doctest::Approx(5e-4));
  CHECK(lr_at(100, 1e-3, 100) == 1e-3);
  CHECK(lr_at(5000, 1e-3, 100) == 1e-3);
  CHECK(lr_at(1, 1e-3, 0) == 1e-3);
}

TEST_CASE("gradient clipping") {
  std::mt19937_64 g(3);
  for (int c = 0; c < 500; ++c) {
    std::vector<Tensor<float>> ts;
    for (int k = 0; k < 3; ++k) {
      Matrix<float> m(1 + g() % 5, 1 + g() % 5);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::normal_distribution<float>(0, 3)(g);
      ts.emplace_back("t", Matrix<float>::Zero(m.rows(), m.cols()), true);
      ts.back().grad = m;
    }
    std::vector<Tensor<float>*> ps;
    for (auto& t : ts) ps.push_back(&t);
    const double before = grad_norm(std::span<Tensor<float>* const>(ps));
    double oracle = 0;
    for (auto& t : ts) oracle += t.grad->cast<double>().squaredNorm();
    CHECK(before == doctest::Approx(std::sqrt(oracle)).epsilon(1e-12));
    const double clip = std::uniform_real_distribution<double>(0.1, 10)(g);
    CHECK(clip_grad_norm(std::span<Tensor<float>* const>(ps), clip) == before);
    const double after = grad_norm(std::span<Tensor<float>* const>(ps));
    CHECK(after <= clip + 1e-6);
    if (before <= clip) CHECK(after == before);
  }
}

TEST_CASE("train config") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_train(7, 3);
  c.distill.lambda = 0.25;
  const TrainConfig back = train_config_from_json(to_json(c));
  CHECK(back.steps == 7);
  CHECK(back.seed == 3);
  CHECK(back.lr == c.lr);
  CHECK(back.distill.lambda == 0.25);
  CHECK(metrics_header(2) == "step,total,kd,ce,feat,alpha_0,alpha_1,lr");
  CHECK_THROWS_AS(train_teacher(ModelConfig{11, 8, 1, 2, 16, 16, {}}, corpus(), tiny_train(5, 1)), ValidationError);
}

TEST_CASE("teacher training improves and is deterministic") {
  const fs::path dir = temp_dir("teacher");
  RunOptions a;
  a.checkpoint_path = dir / "a.ckpt";
  a.metrics_path = dir / "a.csv";
  RunOptions b = a;
  b.checkpoint_path = dir / "b.ckpt";
  b.metrics_path = dir / "b.csv";
  const TrainResult ra = train_teacher(kTiny, corpus(), tiny_train(60, 4), a);
  const TrainResult rb = train_teacher(kTiny, corpus(), tiny_train(60, 4), b);
  CHECK(ra.final_val_perplexity < ra.initial_val_perplexity);
  CHECK(ra.initial_val_perplexity == doctest::Approx(259).epsilon(0.1));
  CHECK(ra.history.size() == 60);
  CHECK(ra.log.size() == 12);
  CHECK(slurp(a.checkpoint_path) == slurp(b.checkpoint_path));
  CHECK(slurp(a.metrics_path) == slurp(b.metrics_path));
  std::istringstream csv(slurp(a.metrics_path));
  std::string line;
  std::getline(csv, line);
  CHECK(line == metrics_header(0));
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 12);
  CHECK(ra.history.back().loss.ce < ra.history.front().loss.ce);
  for (const StepRecord& r : ra.history) CHECK(r.grad_norm >= 0.0);
}

TEST_CASE("distillation freezes teachers and reproduces runs") {
  const fs::path dir = temp_dir("distill");
  RunOptions topt;
  topt.checkpoint_path = dir / "t0.ckpt";
  train_teacher(kTiny, corpus(), tiny_train(20, 1), topt);
  topt.checkpoint_path = dir / "t1.ckpt";
  train_teacher(kTinyWide, corpus(), tiny_train(20, 2), topt);
  const std::string t0_bytes = slurp(dir / "t0.ckpt"), t1_bytes = slurp(dir / "t1.ckpt");

  Transformer<float> t0 = model_from_checkpoint<float>(load_checkpoint(dir / "t0.ckpt"));
  Transformer<float> t1 = model_from_checkpoint<float>(load_checkpoint(dir / "t1.ckpt"));
  const auto before = t1.parameters();

  RunOptions s1, s2;
  s1.checkpoint_path = dir / "s1.ckpt";
  s1.metrics_path = dir / "s1.csv";
  s2.checkpoint_path = dir / "s2.ckpt";
  s2.metrics_path = dir / "s2.csv";
  const TrainResult r1 = distill(kTiny, {&t0, &t1}, corpus(), tiny_train(30, 9), s1);
  const TrainResult r2 = distill(kTiny, {&t0, &t1}, corpus(), tiny_train(30, 9), s2);

  CHECK(slurp(dir / "t0.ckpt") == t0_bytes);
  CHECK(slurp(dir / "t1.ckpt") == t1_bytes);
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(t1.parameters()[i].data == before[i].data);
    CHECK_FALSE(t1.parameters()[i].grad.has_value());
  }
  CHECK(slurp(s1.checkpoint_path) == slurp(s2.checkpoint_path));
  CHECK(slurp(s1.metrics_path) == slurp(s2.metrics_path));
  CHECK(r1.final_val_distill_loss < r1.initial_val_distill_loss);
  for (const StepRecord& r : r1.history) {
    REQUIRE(r.alpha_mean.size() == 2);
    CHECK(r.alpha_mean[0] + r.alpha_mean[1] == doctest::Approx(1.0).epsilon(1e-9));
  }
  const Checkpoint ck = load_checkpoint(s1.checkpoint_path);
  CHECK(ck.find("proj.1.weight") != nullptr);
  CHECK(ck.meta.at("role") == "student");

  Transformer<float> other(ModelConfig{11, 16, 1, 2, 32, 16, {}}, 1);
  try {
    distill(kTiny, {&t0, &other}, corpus(), tiny_train(3, 1));
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("vocabulary") != std::string::npos);
  }
}

TEST_CASE("lambda 0 and mu 0 reduce distillation to cross-entropy training") {
  Transformer<float> t0(kTinyWide, 5);
  TrainConfig c = tiny_train(25, 6);
  const TrainResult ce = train_teacher(kTiny, corpus(), c, {});
  c.distill.lambda = 0.0;
  c.distill.mu = 0.0;
  const TrainResult kd = distill(kTiny, {&t0}, corpus(), c, {});
  for (const TensorRecord& t : ce.checkpoint.tensors) {
    const TensorRecord* s = kd.checkpoint.find(t.name);
    REQUIRE(s != nullptr);
    INFO(t.name);
    CHECK(s->data == t.data);
  }
  for (std::size_t i = 0; i < ce.history.size(); ++i) CHECK(kd.history[i].loss.total == ce.history[i].loss.ce);
}

TEST_CASE("non-finite training aborts with the last good checkpoint") {
  const fs::path dir = temp_dir("abort");
  TrainConfig c = tiny_train(50, 1);
  c.lr = 1e38;
  c.warmup_steps = 0;
  RunOptions o;
  o.checkpoint_path = dir / "last.ckpt";
  try {
    train_teacher(kTiny, corpus(), c, o);
    FAIL("expected TrainingAborted");
  } catch (const TrainingAborted& e) {
    CHECK(e.step() >= 1);
    REQUIRE(fs::exists(o.checkpoint_path));
    const Checkpoint ck = load_checkpoint(o.checkpoint_path);
    CHECK(ck.step == e.step() - 1);
    for (const TensorRecord& t : ck.tensors)
      for (float x : t.data) CHECK(std::isfinite(x));
  }
}

TEST_CASE("checkpoint round-trip property") {
  const testing::SuiteResult s = testing::checkpoint_roundtrip_suite(1000, 12);
  INFO(s.detail);
  CHECK(s.passed());
}

TEST_CASE("checkpoint format errors") {
  Transformer<float> m(ModelConfig{11, 8, 1, 2, 16, 6, {}}, 2);
  std::ostringstream os;
  write_checkpoint(make_checkpoint<float>(m, 1, 2, nullptr), os);
  const std::string good = os.str();
  auto parse = [](const std::string& bytes) {
    std::istringstream is(bytes);
    return read_checkpoint(is);
  };
  CHECK_NOTHROW(parse(good));
  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(parse(bad), FormatError);
  bad = good;
  bad[4] = 9;
  CHECK_THROWS_AS(parse(bad), FormatError);
  CHECK_THROWS_AS(parse(good + "x"), FormatError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{12}, std::size_t{40}, good.size() - 1})
    CHECK_THROWS_AS(parse(good.substr(0, cut)), FormatError);
  const Checkpoint ck = parse(good);
  CHECK_THROWS_AS(model_from_checkpoint<float>(ck, ModelConfig{11, 8, 1, 2, 32, 6, {}}), std::exception);
  const fs::path dir = temp_dir("ckpt");
  save_checkpoint(ck, dir / "m.ckpt");
  const nlohmann::json h = read_checkpoint_header(dir / "m.ckpt");
  CHECK(h.at("tensors").size() == m.parameters().size());
  CHECK(h.at("tensors")[0].at("dtype") == "float32");
  Transformer<float> back = model_from_checkpoint<float>(load_checkpoint(dir / "m.ckpt"));
  const std::vector<int> tok{1, 2, 3};
  CHECK(back.logits(tok) == m.logits(tok));
}
