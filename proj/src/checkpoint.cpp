// SPDX-License-Identifier: Apache-2.0
#include "mtkd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace mtkd {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_le(const unsigned char* p, int n) {
  std::uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(static_cast<unsigned char>(bits >> (8 * i))));
}

float get_f32(const unsigned char* p) {
  const auto bits = static_cast<std::uint32_t>(get_le(p, 4));
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

bool is_projection(const std::string& name) { return name.rfind(kProjectionPrefix, 0) == 0; }

Checkpoint parse(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 16) throw FormatError("checkpoint truncated: " + std::to_string(n) + " bytes is shorter than the prelude");
  if (std::memcmp(p, kCheckpointMagic, 4) != 0) throw FormatError("checkpoint has bad magic (expected MTKD)");
  const auto version = static_cast<std::uint32_t>(get_le(p + 4, 4));
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported");
  const std::uint64_t header_len = get_le(p + 8, 8);
  if (header_len > n - 16) throw FormatError("checkpoint truncated inside the header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  const std::size_t payload_start = 16 + header_len;
  const std::size_t payload_len = n - payload_start;
  try {
    ck.config = model_config_from_json(header.at("model_config"));
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.step = header.at("step").get<std::int64_t>();
    ck.meta = header.value("meta", nlohmann::json::object());
    const std::uint64_t declared = header.at("payload_bytes").get<std::uint64_t>();
    if (declared > payload_len) throw FormatError("checkpoint truncated: payload shorter than declared");
    if (declared < payload_len) throw FormatError("checkpoint has trailing bytes after the payload");
    std::uint64_t expect_offset = 0;
    for (const auto& t : header.at("tensors")) {
      TensorRecord rec;
      rec.name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
      if (shape.size() != 2 || shape[0] <= 0 || shape[1] <= 0)
        throw FormatError("checkpoint tensor '" + rec.name + "' has an invalid shape");
      if (t.at("dtype").get<std::string>() != "float32")
        throw FormatError("checkpoint tensor '" + rec.name + "' has unsupported dtype");
      const std::uint64_t offset = t.at("offset").get<std::uint64_t>();
      if (offset != expect_offset)
        throw FormatError("checkpoint tensor '" + rec.name + "' offset is inconsistent with the inventory");
      rec.rows = shape[0];
      rec.cols = shape[1];
      const std::uint64_t count = static_cast<std::uint64_t>(rec.rows * rec.cols);
      if (offset + 4 * count > payload_len) throw FormatError("checkpoint truncated inside tensor '" + rec.name + "'");
      rec.data.resize(count);
      const unsigned char* src = p + payload_start + offset;
      for (std::uint64_t i = 0; i < count; ++i) rec.data[i] = get_f32(src + 4 * i);
      expect_offset = offset + 4 * count;
      for (const auto& prev : ck.tensors)
        if (prev.name == rec.name) throw FormatError("checkpoint lists tensor '" + rec.name + "' twice");
      ck.tensors.push_back(std::move(rec));
    }
    if (expect_offset != declared) throw FormatError("checkpoint payload length disagrees with the inventory");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  return ck;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out) {
  nlohmann::json inventory = nlohmann::json::array();
  std::string payload;
  for (const auto& t : ckpt.tensors) {
    if (static_cast<Index>(t.data.size()) != t.rows * t.cols)
      throw DimensionError("checkpoint tensor '" + t.name + "' data does not match its shape");
    inventory.push_back({{"name", t.name},
                         {"shape", {t.rows, t.cols}},
                         {"dtype", "float32"},
                         {"role", is_projection(t.name) ? "projection" : "model"},
                         {"offset", payload.size()}});
    for (float f : t.data) put_f32(payload, f);
  }
  const nlohmann::json header = {{"format", "mtkd-checkpoint"},
                                 {"model_config", to_json(ckpt.config)},
                                 {"tensors", inventory},
                                 {"seed", ckpt.seed},
                                 {"step", ckpt.step},
                                 {"payload_bytes", payload.size()},
                                 {"meta", ckpt.meta}};
  const std::string h = header.dump();
  out.write(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ostringstream buf(std::ios::binary);
  write_checkpoint(ckpt, buf);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  const std::string bytes = buf.str();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(std::istream& in) { return parse(std::string(std::istreambuf_iterator<char>(in), {})); }

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse(slurp(path)); }

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  const std::string bytes = slurp(path);
  parse(bytes);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t header_len = get_le(p + 8, 8);
  return nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
}

template <typename T>
Checkpoint make_checkpoint(const Transformer<T>& model, std::uint64_t seed, std::int64_t step,
                           const FeatureProjections<T>* projections, nlohmann::json meta) {
  Checkpoint ck;
  ck.config = model.config();
  ck.seed = seed;
  ck.step = step;
  ck.meta = std::move(meta);
  auto push = [&ck](const Tensor<T>& t) {
    TensorRecord rec{t.name, t.data.rows(), t.data.cols(), {}};
    rec.data.resize(static_cast<std::size_t>(t.data.size()));
    for (Index i = 0; i < t.data.size(); ++i) rec.data[static_cast<std::size_t>(i)] = static_cast<float>(t.data.data()[i]);
    ck.tensors.push_back(std::move(rec));
  };
  for (const auto& p : model.parameters()) push(p);
  if (projections != nullptr)
    for (const auto& m : projections->maps)
      if (m) push(*m);
  return ck;
}

template <typename T>
Transformer<T> model_from_checkpoint(const Checkpoint& ckpt, const std::optional<ModelConfig>& expected) {
  if (expected && !(*expected == ckpt.config))
    throw FormatError("checkpoint model config does not match the requested config");
  Transformer<T> model = Transformer<T>::uninitialized(ckpt.config);
  std::size_t used = 0;
  for (const auto& rec : ckpt.tensors) {
    if (is_projection(rec.name)) continue;
    if (used >= model.parameters().size())
      throw FormatError("checkpoint has unexpected tensor '" + rec.name + "'");
    Tensor<T>& p = model.parameters()[used];
    if (p.name != rec.name)
      throw FormatError("checkpoint tensor '" + rec.name + "' where '" + p.name + "' was expected");
    if (p.data.rows() != rec.rows || p.data.cols() != rec.cols)
      throw FormatError("checkpoint tensor '" + rec.name + "' has shape " + shape_str(rec.rows, rec.cols) +
                        ", config implies " + shape_str(p.data));
    for (Index i = 0; i < p.data.size(); ++i) p.data.data()[i] = static_cast<T>(rec.data[static_cast<std::size_t>(i)]);
    ++used;
  }
  if (used != model.parameters().size())
    throw FormatError("checkpoint is missing tensor '" + model.parameters()[used].name + "'");
  return model;
}

template <typename T>
FeatureProjections<T> projections_from_checkpoint(const Checkpoint& ckpt, std::size_t n_teachers) {
  FeatureProjections<T> out;
  out.maps.resize(n_teachers);
  for (const auto& rec : ckpt.tensors) {
    if (!is_projection(rec.name)) continue;
    const std::string rest = rec.name.substr(std::strlen(kProjectionPrefix));
    const std::size_t k = std::stoul(rest.substr(0, rest.find('.')));
    if (k >= n_teachers) throw FormatError("checkpoint projection '" + rec.name + "' has no matching teacher");
    Matrix<T> m(rec.rows, rec.cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rec.data[static_cast<std::size_t>(i)]);
    out.maps[k] = Tensor<T>(rec.name, std::move(m), false);
  }
  return out;
}

template Checkpoint make_checkpoint(const Transformer<float>&, std::uint64_t, std::int64_t,
                                    const FeatureProjections<float>*, nlohmann::json);
template Checkpoint make_checkpoint(const Transformer<double>&, std::uint64_t, std::int64_t,
                                    const FeatureProjections<double>*, nlohmann::json);
template Transformer<float> model_from_checkpoint(const Checkpoint&, const std::optional<ModelConfig>&);
template Transformer<double> model_from_checkpoint(const Checkpoint&, const std::optional<ModelConfig>&);
template FeatureProjections<float> projections_from_checkpoint(const Checkpoint&, std::size_t);
template FeatureProjections<double> projections_from_checkpoint(const Checkpoint&, std::size_t);

}  // namespace mtkd
