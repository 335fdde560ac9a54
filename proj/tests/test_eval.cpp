// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "mtkd/errors.hpp"
#include "mtkd/eval.hpp"
#include "mtkd/ops.hpp"
#include "support/suites.hpp"

using namespace mtkd;
namespace fs = std::filesystem;

namespace {

using Sentences = std::vector<std::vector<std::string>>;

Sentences random_corpus(std::mt19937_64& g, std::size_t n, int vocab) {
  Sentences c(n);
  for (auto& s : c) {
    const std::size_t len = 1 + g() % 12;
    for (std::size_t i = 0; i < len; ++i) s.push_back("w" + std::to_string(g() % vocab));
  }
  return c;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("perplexity matches exp of the masked cross-entropy") {
  Transformer<double> m(ModelConfig{259, 8, 1, 2, 16, 32, {}}, 4);
  const std::vector<std::string> docs = testing::synthetic_corpus(6, 30, 1);
  BatchStream bs(docs, 32, 3, 0, Split::train, 0.2);
  const std::vector<Batch> batches = bs.sequential_batches();
  double nll = 0;
  std::int64_t count = 0;
  for (const Batch& b : batches) {
    Tape<double> t;
    const Matrix<double> lp = log_softmax_rows(m.forward(t, b.inputs, false).logits).value();
    for (Index i = 0; i < b.targets.size(); ++i) {
      const int y = b.targets.data()[i];
      if (y == ByteTokenizer::kPad) continue;
      nll -= lp(i, y);
      ++count;
    }
  }
  const NllSum s = token_nll(m, std::span<const Batch>(batches));
  CHECK(s.tokens == count);
  CHECK(s.nll == doctest::Approx(nll).epsilon(1e-12));
  CHECK(std::fabs(perplexity(m, std::span<const Batch>(batches)) - std::exp(nll / static_cast<double>(count))) <=
        1e-6 * std::exp(nll / static_cast<double>(count)));
  CHECK_THROWS_AS(perplexity_from_logprobs(std::vector<double>{}), ValidationError);
}

TEST_CASE("distillation loss of a teacher against itself is zero") {
  Transformer<float> t(ModelConfig{259, 16, 1, 2, 32, 32, {}}, 3);
  const std::vector<std::string> docs = testing::synthetic_corpus(4, 30, 2);
  BatchStream bs(docs, 32, 2, 0, Split::train, 0.25);
  const std::vector<Batch> batches = bs.sequential_batches();
  Transformer<float> same = t;
  DistillConfig cfg;
  CHECK(std::fabs(eval_distill_loss(same, {&t}, std::span<const Batch>(batches), cfg)) <= 1e-6);
  Transformer<float> other(ModelConfig{259, 16, 1, 2, 32, 32, {}}, 4);
  CHECK(eval_distill_loss(other, {&t}, std::span<const Batch>(batches), cfg) > 0.0);
}

TEST_CASE("bleu properties") {
  std::mt19937_64 g(6);
  for (int c = 0; c < 300; ++c) {
    const Sentences hyp = random_corpus(g, 1 + g() % 6, 6), ref = random_corpus(g, hyp.size(), 6);
    const double s = bleu(hyp, ref).score;
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    CHECK(bleu(hyp, ref, 4, BleuSmoothing::none).score <= 1.0);

    std::vector<std::size_t> perm(hyp.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), g);
    Sentences ph, pr;
    for (std::size_t i : perm) {
      ph.push_back(hyp[i]);
      pr.push_back(ref[i]);
    }
    CHECK(bleu(ph, pr).score == doctest::Approx(s).epsilon(1e-12));

    Sentences grown = ref;
    const double perfect = bleu(grown, grown).score;
    grown.push_back(random_corpus(g, 1, 6)[0]);
    CHECK(bleu(grown, grown).score >= perfect);
  }
  CHECK_THROWS_AS(bleu(Sentences{{"a"}}, Sentences{}), ValidationError);
  CHECK_THROWS_AS(bleu(Sentences{}, Sentences{}), ValidationError);
  CHECK(split_words("  a\tb \n c ") == std::vector<std::string>{"a", "b", "c"});
  const BleuResult r = bleu(Sentences{{"a", "b"}}, Sentences{{"a", "b"}}, 4, BleuSmoothing::none);
  CHECK(r.score == 1.0);
  CHECK(std::isnan(r.precisions[2]));
  CHECK(parse_bleu_smoothing("none") == BleuSmoothing::none);
}

TEST_CASE("generation bleu") {
  Transformer<float> m(ModelConfig{259, 16, 1, 2, 32, 64, {}}, 2);
  const std::vector<std::string> docs = testing::synthetic_corpus(3, 20, 4);
  GenerationBleuConfig cfg;
  cfg.window_tokens = 48;
  const BleuResult a = generation_bleu(m, docs, cfg);
  CHECK(a.score >= 0.0);
  CHECK(a.score <= 1.0);
  CHECK(a.ref_len > 0);
  CHECK(generation_bleu(m, docs, cfg).score == a.score);
  CHECK(to_json(cfg).at("window_tokens") == 48);
}

TEST_CASE("reports") {
  const fs::path dir = fs::temp_directory_path() / "mtkd_reports";
  fs::create_directories(dir);
  SweepReport sr;
  for (int k : {1, 3, 5}) sr.rows.push_back({k, 10.0 / k, 1.0, 0.5, 0.1, 3});
  sr.runs.push_back({1, 7, 10.0, 1.0, 0.5, 0.1, {1.0}, {0.0}});
  emit_report(sr, dir / "s.csv", ReportFormat::csv);
  const std::vector<std::string> rows = lines(dir / "s.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "k,val_perplexity,distill_loss,bleu,final_kd,runs");
  CHECK(rows[2].rfind("3,", 0) == 0);
  emit_report(sr, dir / "s.json", ReportFormat::json);
  std::ifstream js(dir / "s.json");
  const nlohmann::json j = nlohmann::json::parse(js);
  CHECK(j.at("rows").size() == 3);
  CHECK(j.at("runs").size() == 1);

  EvalReport er;
  er.perplexity = 12.5;
  er.token_count = 100;
  emit_report(er, dir / "e.csv", ReportFormat::csv);
  const std::vector<std::string> e = lines(dir / "e.csv");
  REQUIRE(e.size() == 2);
  CHECK(e[0] == "perplexity,distill_loss,bleu,token_count");
  CHECK(e[1].rfind("12.5,", 0) == 0);
  CHECK_THROWS_AS(parse_report_format("xml"), ValidationError);
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
}
