// SPDX-License-Identifier: Apache-2.0
#include "mtkd/model.hpp"

#include <algorithm>
#include <cmath>

#include "mtkd/ops.hpp"
#include "mtkd/rng.hpp"

namespace mtkd {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("model config: " + msg); };
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (d_model <= 0) fail("d_model must be positive");
  if (n_layers <= 0) fail("n_layers must be positive");
  if (n_heads <= 0) fail("n_heads must be positive");
  if (d_model % n_heads != 0)
    fail("n_heads (" + std::to_string(n_heads) + ") must divide d_model (" + std::to_string(d_model) + ")");
  if (d_ff <= 0) fail("d_ff must be positive");
  if (max_seq_len < 2) fail("max_seq_len must be at least 2");
  for (int t : tap_layers)
    if (t < 0 || t >= n_layers) fail("tap layer " + std::to_string(t) + " outside [0, n_layers)");
}

std::vector<int> ModelConfig::taps() const {
  if (tap_layers.empty()) return {n_layers - 1};
  std::vector<int> t = tap_layers;
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"vocab_size", cfg.vocab_size}, {"d_model", cfg.d_model},         {"n_layers", cfg.n_layers},
          {"n_heads", cfg.n_heads},       {"d_ff", cfg.d_ff},               {"max_seq_len", cfg.max_seq_len},
          {"tap_layers", cfg.tap_layers}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.max_seq_len = j.at("max_seq_len").get<int>();
    cfg.tap_layers = j.value("tap_layers", std::vector<int>{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return cfg;
}

std::int64_t block_param_count(const ModelConfig& cfg) {
  const std::int64_t d = cfg.d_model, f = cfg.d_ff;
  return 2 * d                  // ln1
         + d * 3 * d + 3 * d    // qkv
         + d * d + d            // attention output
         + 2 * d                // ln2
         + d * f + f            // ff in
         + f * d + d;           // ff out
}

std::int64_t param_count(const ModelConfig& cfg) {
  const std::int64_t d = cfg.d_model;
  return static_cast<std::int64_t>(cfg.vocab_size) * d + static_cast<std::int64_t>(cfg.max_seq_len) * d +
         static_cast<std::int64_t>(cfg.n_layers) * block_param_count(cfg) + 2 * d;
}

namespace {

// Offsets into the parameter inventory.
constexpr std::size_t kTokEmb = 0;
constexpr std::size_t kPosEmb = 1;
constexpr std::size_t kBlockStart = 2;
constexpr std::size_t kPerBlock = 12;
enum BlockSlot : std::size_t {
  kLn1Gain,
  kLn1Bias,
  kQkvW,
  kQkvB,
  kOutW,
  kOutB,
  kLn2Gain,
  kLn2Bias,
  kFfInW,
  kFfInB,
  kFfOutW,
  kFfOutB
};

}  // namespace

template <typename T>
Transformer<T>::Transformer(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  build_inventory();
}

template <typename T>
Transformer<T> Transformer<T>::uninitialized(const ModelConfig& cfg) {
  return Transformer(cfg);
}

template <typename T>
void Transformer<T>::build_inventory() {
  const Index d = cfg_.d_model, f = cfg_.d_ff;
  auto zeros = [](Index r, Index c) { return Matrix<T>(Matrix<T>::Zero(r, c)); };
  params_.clear();
  params_.emplace_back("tok_emb", zeros(cfg_.vocab_size, d));
  params_.emplace_back("pos_emb", zeros(cfg_.max_seq_len, d));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    params_.emplace_back(p + "ln1.gain", zeros(1, d));
    params_.emplace_back(p + "ln1.bias", zeros(1, d));
    params_.emplace_back(p + "attn.qkv.weight", zeros(d, 3 * d));
    params_.emplace_back(p + "attn.qkv.bias", zeros(1, 3 * d));
    params_.emplace_back(p + "attn.out.weight", zeros(d, d));
    params_.emplace_back(p + "attn.out.bias", zeros(1, d));
    params_.emplace_back(p + "ln2.gain", zeros(1, d));
    params_.emplace_back(p + "ln2.bias", zeros(1, d));
    params_.emplace_back(p + "ff.in.weight", zeros(d, f));
    params_.emplace_back(p + "ff.in.bias", zeros(1, f));
    params_.emplace_back(p + "ff.out.weight", zeros(f, d));
    params_.emplace_back(p + "ff.out.bias", zeros(1, d));
  }
  params_.emplace_back("ln_f.gain", zeros(1, d));
  params_.emplace_back("ln_f.bias", zeros(1, d));
  for (auto& t : params_) t.requires_grad = true;
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& cfg, std::uint64_t seed) : Transformer(cfg) {
  Rng rng(derive_seed(seed, 0x4d4f44454cULL));
  for (Tensor<T>& p : params_) {
    const std::string& n = p.name;
    const bool is_gain = n.ends_with(".gain");
    const bool is_bias = n.ends_with(".bias");
    for (Index i = 0; i < p.data.size(); ++i) {
      if (is_gain)
        p.data.data()[i] = T(1);
      else if (is_bias)
        p.data.data()[i] = T(0);
      else
        p.data.data()[i] = static_cast<T>(0.02 * rng.normal());
    }
  }
}

template <typename T>
Tensor<T>& Transformer<T>::parameter(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ValidationError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
const Tensor<T>& Transformer<T>::parameter(std::string_view name) const {
  return const_cast<Transformer*>(this)->parameter(name);
}

template <typename T>
void Transformer<T>::set_trainable(bool trainable) {
  for (auto& p : params_) {
    p.requires_grad = trainable;
    if (!trainable) p.grad.reset();
  }
}

template <typename T>
void Transformer<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
ForwardResult<T> Transformer<T>::forward(Tape<T>& tape, const IndexMatrix& tokens, bool track_grad) {
  const std::vector<int> taps = cfg_.taps();
  return forward(tape, tokens, track_grad, taps);
}

template <typename T>
ForwardResult<T> Transformer<T>::forward(Tape<T>& tape, const IndexMatrix& tokens, bool track_grad,
                                         std::span<const int> taps) {
  for (int t : taps)
    if (t < 0 || t >= cfg_.n_layers) throw ValidationError("forward: tap layer " + std::to_string(t) + " out of range");
  const Index n_seq = tokens.rows();
  const Index len = tokens.cols();
  if (n_seq < 1 || len < 1) throw ValidationError("forward: empty input");
  if (len > cfg_.max_seq_len)
    throw ValidationError("forward: sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));
  std::vector<int> ids(static_cast<std::size_t>(tokens.size()));
  std::vector<int> pos(ids.size());
  for (Index r = 0; r < n_seq; ++r)
    for (Index c = 0; c < len; ++c) {
      const int id = tokens(r, c);
      if (id < 0 || id >= cfg_.vocab_size)
        throw ValidationError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(cfg_.vocab_size));
      ids[static_cast<std::size_t>(r * len + c)] = id;
      pos[static_cast<std::size_t>(r * len + c)] = static_cast<int>(c);
    }

  std::vector<Var<T>> w;
  w.reserve(params_.size());
  for (auto& p : params_) w.push_back(tape.leaf(p, track_grad));

  ForwardResult<T> out;
  Var<T> x = add(embedding_lookup(w[kTokEmb], std::span<const int>(ids)),
                 embedding_lookup(w[kPosEmb], std::span<const int>(pos)));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const Var<T>* b = &w[kBlockStart + static_cast<std::size_t>(l) * kPerBlock];
    Var<T> h = layer_norm(x, b[kLn1Gain], b[kLn1Bias]);
    Var<T> qkv = linear(h, b[kQkvW], b[kQkvB]);
    Var<T> att = causal_self_attention(qkv, cfg_.n_heads, len);
    x = add(x, linear(att, b[kOutW], b[kOutB]));
    Var<T> h2 = layer_norm(x, b[kLn2Gain], b[kLn2Bias]);
    Var<T> ff = gelu(linear(h2, b[kFfInW], b[kFfInB]));
    x = add(x, linear(ff, b[kFfOutW], b[kFfOutB]));
    if (std::find(taps.begin(), taps.end(), l) != taps.end()) out.hidden.emplace(l, x);
  }
  const std::size_t nf = kBlockStart + static_cast<std::size_t>(cfg_.n_layers) * kPerBlock;
  Var<T> hf = layer_norm(x, w[nf], w[nf + 1]);
  out.logits = matmul_nt(hf, w[kTokEmb]);
  return out;
}

template <typename T>
ForwardResult<T> Transformer<T>::forward(Tape<T>& tape, std::span<const int> tokens, bool track_grad) {
  IndexMatrix m(1, static_cast<Index>(tokens.size()));
  for (std::size_t i = 0; i < tokens.size(); ++i) m(0, static_cast<Index>(i)) = tokens[i];
  return forward(tape, m, track_grad);
}

template <typename T>
Matrix<T> Transformer<T>::logits(std::span<const int> tokens) {
  Tape<T> tape;
  return forward(tape, tokens, false).logits.value();
}

template <typename T>
std::vector<int> generate(Transformer<T>& model, std::span<const int> prompt, int max_new,
                          const GenerateOptions& options) {
  if (prompt.empty()) throw ValidationError("generate: prompt must be nonempty");
  if (max_new < 0) throw ValidationError("generate: max_new must be nonnegative");
  if (options.mode == SamplingMode::temperature && !(options.temperature > 0.0))
    throw ValidationError("generate: temperature must be positive");
  std::vector<int> seq(prompt.begin(), prompt.end());
  Rng rng(options.seed);
  const std::size_t window = static_cast<std::size_t>(model.config().max_seq_len);
  for (int step = 0; step < max_new; ++step) {
    const std::size_t start = seq.size() > window ? seq.size() - window : 0;
    const Matrix<T> logits = model.logits(std::span<const int>(seq).subspan(start));
    const auto last = logits.row(logits.rows() - 1);
    int next = 0;
    if (options.mode == SamplingMode::greedy) {
      Index arg = 0;
      last.maxCoeff(&arg);
      next = static_cast<int>(arg);
    } else {
      std::vector<double> p(static_cast<std::size_t>(last.size()));
      double mx = -std::numeric_limits<double>::infinity();
      for (Index i = 0; i < last.size(); ++i) mx = std::max(mx, static_cast<double>(last(i)) / options.temperature);
      double sum = 0.0;
      for (Index i = 0; i < last.size(); ++i) {
        p[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(last(i)) / options.temperature - mx);
        sum += p[static_cast<std::size_t>(i)];
      }
      const double u = rng.uniform() * sum;
      double acc = 0.0;
      next = static_cast<int>(p.size()) - 1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) {
          next = static_cast<int>(i);
          break;
        }
      }
    }
    seq.push_back(next);
  }
  return seq;
}

template class Transformer<float>;
template class Transformer<double>;
template std::vector<int> generate(Transformer<float>&, std::span<const int>, int, const GenerateOptions&);
template std::vector<int> generate(Transformer<double>&, std::span<const int>, int, const GenerateOptions&);

}  // namespace mtkd
