// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtkd/tensor.hpp"

namespace mtkd {

/// Fixed byte-level vocabulary: ids 0-255 are raw bytes.
struct ByteTokenizer {
  static constexpr int kBos = 256;
  static constexpr int kEos = 257;
  static constexpr int kPad = 258;
  static constexpr int kVocabSize = 259;

  /// BOS, the UTF-8 bytes of `text`, EOS. Invalid UTF-8 throws FormatError
  /// carrying the byte offset of the first bad sequence.
  static std::vector<int> tokenize(std::string_view text);

  /// Bytes of every id below 256; special ids are dropped.
  static std::string detokenize(std::span<const int> ids);
};

/// Offset of the first malformed UTF-8 sequence (overlong forms, surrogates,
/// and code points above U+10FFFF included), or npos when the text is valid.
std::size_t find_invalid_utf8(std::string_view text);

enum class CorpusFormat { txt, jsonl };

CorpusFormat parse_corpus_format(const std::string& s);

struct Corpus {
  std::vector<std::string> documents;
  std::size_t total_bytes = 0;
};

/// txt: the whole file is one document. jsonl: one document per nonblank line,
/// taken from its string-valued "text" key. Empty documents are dropped.
Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

struct DocumentSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Documents are ranked by (fnv1a64(text), index); the first
/// round(val_fraction * n) of them, clamped to [1, n - 1] when n >= 2, form
/// the validation split. Both lists come back in corpus order.
DocumentSplit split_documents(const std::vector<std::string>& documents, double val_fraction);

enum class Split { train, val };

/// One model input row: seq_len inputs and their next-token targets, all from
/// one document; the tail past the document end is PAD.
struct Window {
  std::vector<int> inputs;
  std::vector<int> targets;
};

/// Chunks a document's token sequence into windows of seq_len positions.
std::vector<Window> make_windows(std::span<const int> tokens, int seq_len);

struct Batch {
  IndexMatrix inputs;   ///< batch x seq_len
  IndexMatrix targets;  ///< batch x seq_len
};

Batch stack_windows(std::span<const Window> windows);

/// Deterministic stream of shuffled batches over one split. Windows are
/// reshuffled at every epoch boundary with a generator keyed on (seed, epoch).
class BatchStream {
 public:
  BatchStream(const std::vector<std::string>& documents, int seq_len, int batch_size, std::uint64_t seed,
              Split split, double val_fraction);

  Batch next();

  const std::vector<Window>& windows() const { return windows_; }
  std::size_t document_count() const { return doc_count_; }

  /// Every window once, in corpus order, grouped into batches (the last may
  /// be short).
  std::vector<Batch> sequential_batches(std::size_t max_batches = 0) const;

 private:
  void reshuffle();

  std::vector<Window> windows_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::uint64_t epoch_ = 0;
  std::uint64_t seed_;
  int batch_size_;
  std::size_t doc_count_ = 0;
};

}  // namespace mtkd
