#include "cor/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

namespace cor {
namespace {

using nlohmann::json;

constexpr std::size_t kMagicSize = 8;
constexpr std::size_t kPreambleSize = 16;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float get_f32(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

const std::map<std::string, std::size_t ModelConfig::*>& config_fields() {
  static const std::map<std::string, std::size_t ModelConfig::*> fields = {
      {"layers", &ModelConfig::layers},   {"experts", &ModelConfig::experts}, {"k_baseline", &ModelConfig::k_baseline},
      {"d_model", &ModelConfig::d_model}, {"d_ff", &ModelConfig::d_ff},       {"vocab", &ModelConfig::vocab},
      {"context", &ModelConfig::context}, {"heads", &ModelConfig::heads},
  };
  return fields;
}

ModelConfig parse_config(const json& header) {
  if (!header.contains("config") || !header["config"].is_object()) {
    throw FormatError("checkpoint header lacks a config object", kPreambleSize, "config");
  }
  const json& cfg = header["config"];
  ModelConfig config;
  for (const auto& [name, member] : config_fields()) {
    if (!cfg.contains(name) || !cfg[name].is_number_unsigned()) {
      throw FormatError("checkpoint config field missing or not an unsigned integer", kPreambleSize, "config." + name);
    }
    config.*member = cfg[name].get<std::size_t>();
  }
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid checkpoint config: ") + e.what(), kPreambleSize, "config");
  }
  const double d = static_cast<double>(config.d_model);
  const double per_layer = 2 * d + 4 * d * d + d * static_cast<double>(config.experts) * (1.0 + 2.0 * static_cast<double>(config.d_ff));
  const double total = d * (2.0 * static_cast<double>(config.vocab) + static_cast<double>(config.context) + 1.0) +
                       per_layer * static_cast<double>(config.layers);
  if (total > 1e9) throw FormatError("checkpoint config implies an implausibly large model", kPreambleSize, "config");
  return config;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const MoeModel& model) {
  json cfg = json::object();
  for (const auto& [name, member] : config_fields()) cfg[name] = model.config().*member;

  json manifest = json::array();
  std::uint64_t offset = 0;
  model.weights().for_each([&](const std::string& name, const Tensor& t) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  });
  const std::string header = json{{"config", cfg}, {"tensors", manifest}}.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + kMagicSize);
  put_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  out.reserve(out.size() + offset);
  model.weights().for_each([&](const std::string&, const Tensor& t) {
    for (float v : t.values()) put_f32(out, v);
  });
  return out;
}

MoeModel decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kPreambleSize) throw FormatError("file too short for checkpoint preamble", 0, "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, kMagicSize) != 0) throw FormatError("bad magic bytes", 0, "magic");
  const std::uint64_t header_len = get_u64(bytes.data() + kMagicSize);
  if (header_len > bytes.size() - kPreambleSize) {
    throw FormatError("header length exceeds file size", kMagicSize, "header_length");
  }

  json header;
  try {
    header = json::parse(bytes.begin() + kPreambleSize, bytes.begin() + kPreambleSize + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed JSON header: ") + e.what(), kPreambleSize + e.byte, "header");
  }
  const ModelConfig config = parse_config(header);
  if (!header.contains("tensors") || !header["tensors"].is_array()) {
    throw FormatError("checkpoint header lacks a tensor manifest", kPreambleSize, "tensors");
  }
  const json& manifest = header["tensors"];

  // The expected layout is the initialized model for this config; shapes and
  // names are checked against it in order.
  MoeModel model = MoeModel::initialize(config, 0);
  const std::uint64_t data_start = kPreambleSize + header_len;
  const std::uint64_t data_size = bytes.size() - data_start;
  std::size_t index = 0;
  std::uint64_t expected_offset = 0;
  model.weights().for_each([&](const std::string& name, Tensor& t) {
    const std::string field = "tensors[" + std::to_string(index) + "]";
    if (index >= manifest.size()) throw FormatError("manifest ends before tensor " + name, kPreambleSize, field);
    const json& entry = manifest[index];
    if (!entry.is_object()) throw FormatError("manifest entry is not an object", kPreambleSize, field);
    if (!entry.contains("name") || entry["name"] != name) {
      throw FormatError("expected tensor '" + name + "'", kPreambleSize, field + ".name");
    }
    if (!entry.contains("dtype") || entry["dtype"] != "f32") {
      throw FormatError("unsupported dtype for '" + name + "'", kPreambleSize, field + ".dtype");
    }
    if (!entry.contains("shape") || !entry["shape"].is_array()) {
      throw FormatError("missing shape for '" + name + "'", kPreambleSize, field + ".shape");
    }
    Shape shape;
    for (const auto& dim : entry["shape"]) {
      if (!dim.is_number_unsigned()) throw FormatError("non-integer dimension", kPreambleSize, field + ".shape");
      shape.push_back(dim.get<std::size_t>());
    }
    if (shape != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_string(shape) + ", config implies " +
                            shape_string(t.shape()),
                        kPreambleSize, field + ".shape");
    }
    if (!entry.contains("offset") || !entry["offset"].is_number_unsigned() ||
        entry["offset"].get<std::uint64_t>() != expected_offset) {
      throw FormatError("tensor '" + name + "' offset is not contiguous", kPreambleSize, field + ".offset");
    }
    const std::uint64_t nbytes = t.size() * sizeof(float);
    if (expected_offset + nbytes > data_size) {
      throw FormatError("truncated data for tensor '" + name + "': needs " + std::to_string(nbytes) + " bytes, " +
                            std::to_string(data_size > expected_offset ? data_size - expected_offset : 0) +
                            " present",
                        data_start + std::min(expected_offset, data_size), field);
    }
    const std::uint8_t* p = bytes.data() + data_start + expected_offset;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = get_f32(p + 4 * i);
    expected_offset += nbytes;
    ++index;
  });
  if (index != manifest.size()) {
    throw FormatError("manifest lists " + std::to_string(manifest.size()) + " tensors, config implies " +
                          std::to_string(index),
                      kPreambleSize, "tensors");
  }
  if (expected_offset != data_size) {
    throw FormatError("trailing bytes after tensor data", data_start + expected_offset, "tensors");
  }
  return model;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

void save_checkpoint(const MoeModel& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(model));
}

MoeModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace cor
