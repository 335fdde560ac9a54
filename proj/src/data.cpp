// SPDX-License-Identifier: Apache-2.0
#include "mtkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mtkd/rng.hpp"

namespace mtkd {

std::size_t find_invalid_utf8(std::string_view text) {
  const auto* s = reinterpret_cast<const unsigned char*>(text.data());
  const std::size_t n = text.size();
  std::size_t i = 0;
  while (i < n) {
    const unsigned char c = s[i];
    if (c < 0x80) {
      ++i;
      continue;
    }
    std::size_t len;
    std::uint32_t cp;
    if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return i;
    }
    if (i + len > n) return i;
    for (std::size_t k = 1; k < len; ++k) {
      if ((s[i + k] & 0xC0) != 0x80) return i;
      cp = (cp << 6) | (s[i + k] & 0x3F);
    }
    static constexpr std::uint32_t kMin[5] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return i;
    i += len;
  }
  return std::string_view::npos;
}

std::vector<int> ByteTokenizer::tokenize(std::string_view text) {
  if (const std::size_t bad = find_invalid_utf8(text); bad != std::string_view::npos)
    throw FormatError("invalid UTF-8 at byte offset " + std::to_string(bad));
  std::vector<int> ids;
  ids.reserve(text.size() + 2);
  ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(c);
  ids.push_back(kEos);
  return ids;
}

std::string ByteTokenizer::detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids)
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  return out;
}

CorpusFormat parse_corpus_format(const std::string& s) {
  if (s == "txt") return CorpusFormat::txt;
  if (s == "jsonl") return CorpusFormat::jsonl;
  throw ValidationError("unknown corpus format '" + s + "' (expected txt or jsonl)");
}

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open corpus file " + path.string());
  Corpus corpus;
  auto add = [&](std::string doc, const std::string& where) {
    if (const std::size_t bad = find_invalid_utf8(doc); bad != std::string::npos)
      throw FormatError(where + ": invalid UTF-8 at byte offset " + std::to_string(bad));
    if (doc.empty()) return;
    corpus.total_bytes += doc.size();
    corpus.documents.push_back(std::move(doc));
  };
  if (format == CorpusFormat::txt) {
    std::ostringstream ss;
    ss << in.rdbuf();
    add(ss.str(), path.string());
    return corpus;
  }
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = path.string() + " line " + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
      throw FormatError(where + ": missing string-valued \"text\" key");
    add(j["text"].get<std::string>(), where);
  }
  return corpus;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

DocumentSplit split_documents(const std::vector<std::string>& documents, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ValidationError("val_fraction must lie in (0, 1)");
  const std::size_t n = documents.size();
  std::vector<std::pair<std::uint64_t, std::size_t>> ranked(n);
  for (std::size_t i = 0; i < n; ++i) ranked[i] = {fnv1a64(documents[i]), i};
  std::sort(ranked.begin(), ranked.end());
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  else n_val = 0;
  std::vector<bool> is_val(n, false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[ranked[i].second] = true;
  DocumentSplit split;
  for (std::size_t i = 0; i < n; ++i) (is_val[i] ? split.val : split.train).push_back(i);
  return split;
}

std::vector<Window> make_windows(std::span<const int> tokens, int seq_len) {
  if (seq_len < 1) throw ValidationError("seq_len must be positive");
  std::vector<Window> out;
  if (tokens.size() < 2) return out;
  const std::size_t L = static_cast<std::size_t>(seq_len);
  for (std::size_t start = 0; start + 1 < tokens.size(); start += L) {
    Window w;
    w.inputs.assign(L, ByteTokenizer::kPad);
    w.targets.assign(L, ByteTokenizer::kPad);
    for (std::size_t t = 0; t < L && start + t < tokens.size(); ++t) {
      w.inputs[t] = tokens[start + t];
      if (start + t + 1 < tokens.size()) w.targets[t] = tokens[start + t + 1];
    }
    out.push_back(std::move(w));
  }
  return out;
}

Batch stack_windows(std::span<const Window> windows) {
  if (windows.empty()) throw ValidationError("stack_windows: no windows");
  const Index L = static_cast<Index>(windows[0].inputs.size());
  Batch b{IndexMatrix(static_cast<Index>(windows.size()), L), IndexMatrix(static_cast<Index>(windows.size()), L)};
  for (std::size_t r = 0; r < windows.size(); ++r)
    for (Index c = 0; c < L; ++c) {
      b.inputs(static_cast<Index>(r), c) = windows[r].inputs[static_cast<std::size_t>(c)];
      b.targets(static_cast<Index>(r), c) = windows[r].targets[static_cast<std::size_t>(c)];
    }
  return b;
}

BatchStream::BatchStream(const std::vector<std::string>& documents, int seq_len, int batch_size,
                         std::uint64_t seed, Split split, double val_fraction)
    : seed_(seed), batch_size_(batch_size) {
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  const DocumentSplit parts = split_documents(documents, val_fraction);
  const auto& chosen = split == Split::train ? parts.train : parts.val;
  if (chosen.empty())
    throw ValidationError(std::string("empty corpus after split (") + (split == Split::train ? "train" : "val") + ")");
  doc_count_ = chosen.size();
  for (std::size_t idx : chosen) {
    const std::vector<int> toks = ByteTokenizer::tokenize(documents[idx]);
    for (auto& w : make_windows(toks, seq_len)) windows_.push_back(std::move(w));
  }
  order_.resize(windows_.size());
  reshuffle();
}

void BatchStream::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(derive_seed(seed_, 0x42415443ULL + epoch_));
  rng.shuffle(std::span<std::size_t>(order_));
  cursor_ = 0;
}

Batch BatchStream::next() {
  std::vector<Window> picked;
  picked.reserve(static_cast<std::size_t>(batch_size_));
  while (picked.size() < static_cast<std::size_t>(batch_size_)) {
    if (cursor_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    picked.push_back(windows_[order_[cursor_++]]);
  }
  return stack_windows(picked);
}

std::vector<Batch> BatchStream::sequential_batches(std::size_t max_batches) const {
  std::vector<Batch> out;
  const std::size_t bs = static_cast<std::size_t>(batch_size_);
  for (std::size_t i = 0; i < windows_.size(); i += bs) {
    if (max_batches != 0 && out.size() == max_batches) break;
    const std::size_t n = std::min(bs, windows_.size() - i);
    out.push_back(stack_windows(std::span<const Window>(windows_).subspan(i, n)));
  }
  return out;
}

}  // namespace mtkd
