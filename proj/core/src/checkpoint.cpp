#include "attune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "attune/errors.hpp"

ATTUNE_NAMESPACE_BEGIN

using nlohmann::json;

namespace {

json arch_json(const ArchitectureDescriptor& arch) {
  json layers = json::array();
  for (const LayerSpec& l : arch.layers) {
    json j = {{"kind", to_string(l.kind)}};
    if (l.kind == LayerKind::conv) {
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
    } else if (l.kind == LayerKind::dense) {
      j["in_features"] = l.in_features;
      j["out_features"] = l.out_features;
    }
    layers.push_back(std::move(j));
  }
  return {{"input", arch.input}, {"layers", std::move(layers)}, {"explain_layer", arch.explain_layer}};
}

ArchitectureDescriptor arch_from(const json& j) {
  ArchitectureDescriptor a;
  a.input = j.at("input").get<Shape>();
  a.explain_layer = j.at("explain_layer").get<std::size_t>();
  for (const json& l : j.at("layers")) {
    LayerSpec s;
    s.kind = layer_kind_from_string(l.at("kind").get<std::string>());
    if (s.kind == LayerKind::conv) {
      s.in_channels = l.at("in_channels").get<std::size_t>();
      s.out_channels = l.at("out_channels").get<std::size_t>();
      s.kernel = l.at("kernel").get<std::size_t>();
    } else if (s.kind == LayerKind::dense) {
      s.in_features = l.at("in_features").get<std::size_t>();
      s.out_features = l.at("out_features").get<std::size_t>();
    }
    a.layers.push_back(s);
  }
  return a;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void put_tensor(std::string& out, const Tensor& t) {
  for (Real v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

}  // namespace

std::string architecture_to_json(const ArchitectureDescriptor& arch) { return arch_json(arch).dump(); }

ArchitectureDescriptor architecture_from_json(std::string_view text) {
  try {
    return arch_from(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("architecture: ") + e.what());
  }
}

std::string encode_checkpoint(const BayesianNetwork& model, const TrainingMetadata& metadata) {
  const auto names = model.parameter_names();
  const auto& params = model.parameters();
  json tensors = json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (const char* part : {"mu", "raw_sigma"}) {
      tensors.push_back({{"name", names[i] + "." + part},
                         {"dtype", "f32"},
                         {"shape", params[i].shape()},
                         {"offset", offset}});
      offset += params[i].mu.size() * sizeof(float);
    }
  }
  json manifest = {{"architecture", arch_json(model.architecture())},
                   {"tensors", std::move(tensors)},
                   {"metadata", {{"epoch", metadata.epoch}, {"seed", metadata.seed}, {"metrics", metadata.metrics}}}};
  const std::string text = manifest.dump();

  std::string out;
  out.reserve(9 + text.size() + offset);
  out.append(kCheckpointMagic);
  out.push_back(static_cast<char>(kCheckpointVersion));
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.append(text);
  for (const auto& p : params) {
    put_tensor(out, p.mu);
    put_tensor(out, p.raw_sigma);
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 9 || bytes.substr(0, 4) != kCheckpointMagic) throw FormatError("checkpoint: bad magic");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (raw[4] != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(static_cast<int>(raw[4])));
  }
  const std::size_t manifest_len = get_u32(raw + 5);
  if (bytes.size() - 9 < manifest_len) throw FormatError("checkpoint: truncated manifest");

  json manifest;
  try {
    manifest = json::parse(bytes.substr(9, manifest_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }

  const std::string_view payload = bytes.substr(9 + manifest_len);
  try {
    ArchitectureDescriptor arch = arch_from(manifest.at("architecture"));
    std::vector<Tensor> tensors;
    std::size_t expected_offset = 0;
    for (const json& t : manifest.at("tensors")) {
      if (t.at("dtype").get<std::string>() != "f32") throw FormatError("checkpoint: unsupported dtype");
      const Shape shape = t.at("shape").get<Shape>();
      const std::size_t offset = t.at("offset").get<std::size_t>();
      const std::size_t count = shape_size(shape);
      if (offset != expected_offset) throw FormatError("checkpoint: tensor offsets are not contiguous");
      if (offset + count * sizeof(float) > payload.size()) throw FormatError("checkpoint: truncated payload");
      std::vector<Real> values(count);
      const auto* p = reinterpret_cast<const unsigned char*>(payload.data()) + offset;
      for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<float>(get_u32(p + 4 * i));
      tensors.emplace_back(shape, std::move(values));
      expected_offset = offset + count * sizeof(float);
    }
    if (expected_offset != payload.size()) throw FormatError("checkpoint: payload size does not match manifest");
    if (tensors.size() % 2 != 0) throw FormatError("checkpoint: tensors must come in (mu, raw_sigma) pairs");

    std::vector<GaussianVariational> params;
    for (std::size_t i = 0; i < tensors.size(); i += 2) {
      params.emplace_back(std::move(tensors[i]), std::move(tensors[i + 1]));
    }
    TrainingMetadata meta;
    const json& m = manifest.at("metadata");
    meta.epoch = m.at("epoch").get<std::size_t>();
    meta.seed = m.at("seed").get<std::uint64_t>();
    meta.metrics = m.at("metrics").get<std::map<std::string, double>>();
    return Checkpoint{BayesianNetwork(std::move(arch), std::move(params)), std::move(meta)};
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const BayesianNetwork& model,
                     const TrainingMetadata& metadata) {
  write_file_atomic(path, encode_checkpoint(model, metadata));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

ATTUNE_NAMESPACE_END
