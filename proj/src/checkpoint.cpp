#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "geomf/model.hpp"

namespace geomf {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host byte order");

namespace {

using nlohmann::json;

constexpr const char* kFormat = "geomf-checkpoint";
constexpr int kVersion = 1;

json ablation_to_json(const AblationFlags& a) {
  return {{"inv_self", a.inv_self},       {"equ_self", a.equ_self},
          {"inv_cross", a.inv_cross},     {"equ_cross", a.equ_cross},
          {"inv_ffn", a.inv_ffn},         {"equ_ffn", a.equ_ffn},
          {"inv_ln", a.inv_ln},           {"equ_ln", a.equ_ln},
          {"structural_bias", a.structural_bias}, {"bias_inv_self", a.bias_inv_self},
          {"bias_equ_self", a.bias_equ_self},     {"bias_inv_cross", a.bias_inv_cross},
          {"bias_equ_cross", a.bias_equ_cross}};
}

json config_json(const ModelConfig& c) {
  return {{"layers", c.layers},
          {"width", c.width},
          {"heads", c.heads},
          {"ffn_width", c.ffn_width},
          {"kernels", c.kernels},
          {"vocab", c.vocab},
          {"use_velocities", c.use_velocities},
          {"dropout_embedding", c.dropout_embedding},
          {"dropout_attention", c.dropout_attention},
          {"dropout_activation", c.dropout_activation},
          {"dropout_hidden", c.dropout_hidden},
          {"drop_path", c.drop_path},
          {"drop_path_rate", c.drop_path_rate},
          {"mode", to_string(c.mode)},
          {"ablation", ablation_to_json(c.ablation)},
          {"seed", c.seed}};
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) throw FormatError(std::string("model config lacks field '") + key + "'");
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config field '") + key + "': " + e.what());
  }
}

ModelConfig config_from(const json& j) {
  if (!j.is_object()) throw FormatError("model config must be a JSON object");
  ModelConfig c;
  read_field(j, "layers", c.layers);
  read_field(j, "width", c.width);
  read_field(j, "heads", c.heads);
  read_field(j, "ffn_width", c.ffn_width);
  read_field(j, "kernels", c.kernels);
  read_field(j, "vocab", c.vocab);
  read_field(j, "use_velocities", c.use_velocities);
  read_field(j, "dropout_embedding", c.dropout_embedding);
  read_field(j, "dropout_attention", c.dropout_attention);
  read_field(j, "dropout_activation", c.dropout_activation);
  read_field(j, "dropout_hidden", c.dropout_hidden);
  read_field(j, "drop_path", c.drop_path);
  read_field(j, "drop_path_rate", c.drop_path_rate);
  read_field(j, "seed", c.seed);
  std::string mode;
  read_field(j, "mode", mode);
  try {
    c.mode = parse_symmetry_mode(mode);
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  if (!j.contains("ablation") || !j["ablation"].is_object()) throw FormatError("model config lacks 'ablation' object");
  const json& a = j["ablation"];
  AblationFlags& f = c.ablation;
  read_field(a, "inv_self", f.inv_self);
  read_field(a, "equ_self", f.equ_self);
  read_field(a, "inv_cross", f.inv_cross);
  read_field(a, "equ_cross", f.equ_cross);
  read_field(a, "inv_ffn", f.inv_ffn);
  read_field(a, "equ_ffn", f.equ_ffn);
  read_field(a, "inv_ln", f.inv_ln);
  read_field(a, "equ_ln", f.equ_ln);
  read_field(a, "structural_bias", f.structural_bias);
  read_field(a, "bias_inv_self", f.bias_inv_self);
  read_field(a, "bias_equ_self", f.bias_equ_self);
  read_field(a, "bias_inv_cross", f.bias_inv_cross);
  read_field(a, "bias_equ_cross", f.bias_equ_cross);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model config: ") + e.what());
  }
  return c;
}

json parse_manifest(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty checkpoint");
  json manifest;
  try {
    manifest = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(path + ": manifest is not valid JSON: " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != kFormat) {
    throw FormatError(path + ": not a checkpoint (format tag missing)");
  }
  if (manifest.value("version", -1) != kVersion) throw FormatError(path + ": unsupported checkpoint version");
  if (!manifest.contains("params") || !manifest["params"].is_array() || !manifest.contains("config") ||
      !manifest.contains("blob_bytes")) {
    throw FormatError(path + ": manifest lacks params, config or blob_bytes");
  }
  return manifest;
}

std::vector<ManifestEntry> entries_of(const json& manifest, const std::string& path) {
  std::vector<ManifestEntry> out;
  std::size_t index = 0;
  for (const json& e : manifest["params"]) {
    try {
      out.push_back({e.at("name").get<std::string>(), e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>()});
    } catch (const json::exception&) {
      throw FormatError(path + ": malformed manifest entry #" + std::to_string(index));
    }
    ++index;
  }
  return out;
}

std::ifstream open_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  return in;
}

}  // namespace

std::string config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(); }

ModelConfig config_from_json(const std::string& text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("model config is not valid JSON: ") + e.what());
  }
}

void save_checkpoint(const std::string& path, const Model& model) {
  json params = json::array();
  std::size_t offset = 0;
  model.params.visit([&](const std::string& name, const Tensor& t) {
    params.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(double);
  });
  const json manifest = {{"format", kFormat},
                         {"version", kVersion},
                         {"config", config_json(model.config)},
                         {"params", params},
                         {"blob_bytes", offset}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out << manifest.dump() << '\n';
  model.params.visit([&](const std::string&, const Tensor& t) {
    auto v = t.values();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  });
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

std::vector<ManifestEntry> read_manifest(const std::string& path, std::string* config_json_out) {
  std::ifstream in = open_checkpoint(path);
  const json manifest = parse_manifest(in, path);
  if (config_json_out) *config_json_out = manifest["config"].dump();
  return entries_of(manifest, path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in = open_checkpoint(path);
  const json manifest = parse_manifest(in, path);
  Model model;
  model.config = config_from(manifest["config"]);
  model.params = init_params(model.config);
  const std::vector<ManifestEntry> entries = entries_of(manifest, path);

  std::size_t index = 0;
  std::size_t offset = 0;
  model.params.visit([&](const std::string& name, Tensor& t) {
    if (index >= entries.size()) {
      throw FormatError(path + ": manifest ends before expected entry #" + std::to_string(index) + " '" + name + "'");
    }
    const ManifestEntry& e = entries[index];
    if (e.name != name || e.shape != t.shape() || e.offset != offset) {
      throw FormatError(path + ": manifest entry #" + std::to_string(index) + " '" + e.name + "' " +
                        to_string(e.shape) + " @" + std::to_string(e.offset) + " does not match expected '" + name +
                        "' " + to_string(t.shape()) + " @" + std::to_string(offset));
    }
    offset += t.size() * sizeof(double);
    ++index;
  });
  if (index != entries.size()) {
    throw FormatError(path + ": unexpected extra manifest entry #" + std::to_string(index) + " '" +
                      entries[index].name + "'");
  }
  if (manifest["blob_bytes"].get<std::size_t>() != offset) {
    throw FormatError(path + ": blob_bytes " + manifest["blob_bytes"].dump() + " does not match parameter total " +
                      std::to_string(offset));
  }
  std::vector<char> blob(offset);
  in.read(blob.data(), static_cast<std::streamsize>(offset));
  if (static_cast<std::size_t>(in.gcount()) != offset) throw FormatError(path + ": parameter blob is truncated");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after parameter blob");
  std::size_t pos = 0;
  model.params.visit([&](const std::string&, Tensor& t) {
    // Fresh storage so the loaded model never aliases init_params buffers.
    std::vector<double> values(t.size());
    std::memcpy(values.data(), blob.data() + pos, values.size() * sizeof(double));
    pos += values.size() * sizeof(double);
    t = Tensor(t.shape(), std::move(values));
  });
  return model;
}

}  // namespace geomf
