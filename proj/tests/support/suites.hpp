// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtkd/tensor.hpp"

namespace mtkd::testing {

/// Outcome of one group of checks; `detail` holds the first failure.
struct SuiteResult {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  std::string detail;

  bool passed() const { return cases > 0 && failures == 0; }
  void check(bool ok, const std::string& what);
};

/// Hand-evaluated loss, metric, and kernel values.
std::vector<SuiteResult> closed_form_suites();

/// Randomized suites; `cases` is the number of random instances per suite
/// (the tokenizer suite runs ten times as many).
SuiteResult weight_simplex_suite(std::size_t cases, std::uint64_t seed);
SuiteResult entropy_monotonicity_suite(std::size_t cases, std::uint64_t seed);
SuiteResult fusion_envelope_suite(std::size_t cases, std::uint64_t seed);
SuiteResult gibbs_suite(std::size_t cases, std::uint64_t seed);
SuiteResult lambda_endpoint_suite(std::size_t cases, std::uint64_t seed);
SuiteResult tokenizer_roundtrip_suite(std::size_t cases, std::uint64_t seed);
SuiteResult checkpoint_roundtrip_suite(std::size_t cases, std::uint64_t seed);

std::vector<SuiteResult> property_suites(std::size_t cases = 1000, std::uint64_t seed = 2024);

/// Random valid UTF-8 of `bytes` length or slightly less, mixing 1 to 4 byte
/// code points.
std::string random_utf8(std::uint64_t seed, std::size_t bytes);

/// Softmax of scaled normal draws; occasionally one-hot.
std::vector<double> random_prob_row(std::uint64_t seed, std::size_t width);

/// -sum p ln p in long double, unfloored.
double oracle_entropy(const std::vector<double>& p);

/// A small synthetic corpus of English-like lines, deterministic per seed.
std::vector<std::string> synthetic_corpus(std::size_t documents, std::size_t words_per_doc, std::uint64_t seed);

}  // namespace mtkd::testing
