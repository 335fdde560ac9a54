// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mtkd/autodiff.hpp"
#include "mtkd/tensor.hpp"

namespace mtkd {

struct ModelConfig {
  int vocab_size = 259;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 128;
  /// Blocks whose output (residual stream) is exposed; empty means the last.
  std::vector<int> tap_layers;

  void validate() const;
  std::vector<int> taps() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Parameters of one pre-norm block: two norms (gain + bias), fused qkv
/// projection, attention output projection, and the two feed-forward layers.
std::int64_t block_param_count(const ModelConfig& cfg);

/// Token and position embeddings, n_layers blocks, and the final norm. The
/// output head is tied to the token embedding and adds nothing.
std::int64_t param_count(const ModelConfig& cfg);

template <typename T>
struct ForwardResult {
  Var<T> logits;                ///< rows x vocab_size
  std::map<int, Var<T>> hidden;  ///< tap layer -> rows x d_model
};

/// Decoder-only transformer: learned absolute positions, pre-norm blocks with
/// GELU feed-forward, final norm, head tied to the token embedding.
template <typename T>
class Transformer {
 public:
  /// Weights ~ N(0, 0.02), biases 0, norm gains 1. Initialization draws come
  /// from a dedicated generator so identical seeds give identical weights.
  Transformer(const ModelConfig& cfg, std::uint64_t seed);

  /// All-zero weights with the standard inventory; used by loaders.
  static Transformer uninitialized(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  std::vector<Tensor<T>>& parameters() { return params_; }
  const std::vector<Tensor<T>>& parameters() const { return params_; }
  Tensor<T>& parameter(std::string_view name);
  const Tensor<T>& parameter(std::string_view name) const;

  void set_trainable(bool trainable);
  void zero_grad();

  /// Runs `tokens` (n_seq x seq_len, one sequence per row) as n_seq * seq_len
  /// stacked positions. With track_grad = false the graph holds no backward
  /// rules and no gradient reaches the parameters.
  ForwardResult<T> forward(Tape<T>& tape, const IndexMatrix& tokens, bool track_grad = true);
  /// Same, exposing exactly the listed blocks instead of the configured taps.
  ForwardResult<T> forward(Tape<T>& tape, const IndexMatrix& tokens, bool track_grad, std::span<const int> taps);
  ForwardResult<T> forward(Tape<T>& tape, std::span<const int> tokens, bool track_grad = true);

  /// Logits for a single sequence without gradient tracking.
  Matrix<T> logits(std::span<const int> tokens);

  template <typename U>
  Transformer<U> cast() const {
    Transformer<U> out = Transformer<U>::uninitialized(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.parameters()[i].data = params_[i].data.template cast<U>();
      out.parameters()[i].requires_grad = params_[i].requires_grad;
    }
    return out;
  }

 private:
  explicit Transformer(const ModelConfig& cfg);
  void build_inventory();

  ModelConfig cfg_;
  std::vector<Tensor<T>> params_;
};

enum class SamplingMode { greedy, temperature };

struct GenerateOptions {
  SamplingMode mode = SamplingMode::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Autoregressive continuation. The context is the trailing max_seq_len
/// tokens once the sequence outgrows the model window.
template <typename T>
std::vector<int> generate(Transformer<T>& model, std::span<const int> prompt, int max_new,
                          const GenerateOptions& options = {});

}  // namespace mtkd
