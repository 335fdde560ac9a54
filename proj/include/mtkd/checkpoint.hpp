// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtkd/distill.hpp"
#include "mtkd/model.hpp"

namespace mtkd {

// Container layout (all integers little-endian):
//
//   "MTKD" | u32 version | u64 header_len | header (UTF-8 JSON) | payload
//
// The header lists every tensor once with name, shape, dtype ("float32"),
// role ("model" or "projection"), and its byte offset into the payload.
// Payload tensors are float32 little-endian, row-major, in inventory order,
// packed back to back.

inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'K', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  std::vector<float> data;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<TensorRecord> tensors;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  /// Free-form run metadata (e.g. the distillation config).
  nlohmann::json meta = nlohmann::json::object();

  const TensorRecord* find(const std::string& name) const;
};

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Validates magic, version, header, offsets, and payload length before
/// returning anything. Throws FormatError on any violation.
Checkpoint read_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// The parsed JSON header alone.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

template <typename T>
Checkpoint make_checkpoint(const Transformer<T>& model, std::uint64_t seed, std::int64_t step,
                           const FeatureProjections<T>* projections = nullptr,
                           nlohmann::json meta = nlohmann::json::object());

/// Rebuilds the model from the checkpoint's config and model tensors;
/// projection tensors are ignored. When `expected` is given the stored config
/// must match it. Inventory mismatches throw FormatError.
template <typename T>
Transformer<T> model_from_checkpoint(const Checkpoint& ckpt, const std::optional<ModelConfig>& expected = {});

/// Projection tensors stored with a distilled student, one slot per teacher.
template <typename T>
FeatureProjections<T> projections_from_checkpoint(const Checkpoint& ckpt, std::size_t n_teachers);

}  // namespace mtkd
