#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conceptgraph/error.hpp"
#include "conceptgraph/model.hpp"
#include "conceptgraph/sha256.hpp"

namespace cg {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

inline constexpr int kFormatVersion = 1;
inline constexpr char kBlobMagic[4] = {'C', 'G', 'W', '1'};
inline constexpr std::size_t kBlobAlignment = 64;

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Weight blob
//
//   "CGW1" | u32 count | count x (u16 name_len, name, u8 rank, rank x u32 dim,
//   u64 offset) | zero padding | payload (float32 arrays at 64-byte aligned
//   absolute offsets) | SHA-256 of the payload region
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void put(Bytes& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail(ErrorCode::ParseError, "blob truncated in tensor table");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::size_t align_up(std::size_t v, std::size_t a) { return (v + a - 1) / a * a; }

}  // namespace detail

/// Serializes tensors in name order. The result is canonical: equal maps give
/// identical bytes.
inline Bytes encode_blob(const std::map<std::string, Tensor>& tensors) {
  Bytes out(kBlobMagic, kBlobMagic + 4);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  std::size_t table = out.size();
  for (const auto& [name, t] : tensors) table += 2 + name.size() + 1 + 4 * t.rank() + 8;
  std::size_t offset = detail::align_up(table, kBlobAlignment);
  const std::size_t payload_start = offset;
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) fail(ErrorCode::ParseError, "tensor name too long: " + name.substr(0, 32));
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    detail::put<std::uint64_t>(out, offset);
    offset = detail::align_up(offset + 4 * t.size(), kBlobAlignment);
  }
  for (const auto& [name, t] : tensors) {
    out.resize(detail::align_up(out.size(), kBlobAlignment), 0);
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), p, p + 4 * t.size());
  }
  if (tensors.empty()) out.resize(payload_start, 0);
  const Digest d = sha256(std::span(out).subspan(payload_start));
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

inline std::map<std::string, Tensor> decode_blob(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 4 + 32 || std::memcmp(bytes.data(), kBlobMagic, 4) != 0) {
    fail(ErrorCode::ParseError, "blob does not start with CGW1 magic");
  }
  detail::Reader r(bytes.subspan(4));
  const auto count = r.get<std::uint32_t>();
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.get_string(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint32_t>());
    e.offset = r.get<std::uint64_t>();
    entries.push_back(std::move(e));
  }
  const std::size_t payload_start = detail::align_up(4 + r.pos(), kBlobAlignment);
  const std::size_t payload_end = bytes.size() - 32;
  if (payload_start > payload_end) fail(ErrorCode::ParseError, "blob payload region missing");
  const Digest d = sha256(bytes.subspan(payload_start, payload_end - payload_start));
  if (std::memcmp(d.data(), bytes.data() + payload_end, 32) != 0) {
    fail(ErrorCode::ChecksumMismatch, "blob payload SHA-256 does not match its trailer");
  }
  std::map<std::string, Tensor> tensors;
  for (auto& e : entries) {
    if (e.shape.empty() || e.shape.size() > 4) {
      fail(ErrorCode::ParseError, "tensor '" + e.name + "' has unsupported rank " + std::to_string(e.shape.size()));
    }
    const std::size_t n = element_count(e.shape);
    if (e.offset < payload_start || e.offset % kBlobAlignment != 0 || e.offset + 4 * n > payload_end) {
      fail(ErrorCode::ParseError, "tensor '" + e.name + "' has an invalid payload offset");
    }
    std::vector<float> data(n);
    std::memcpy(data.data(), bytes.data() + e.offset, 4 * n);
    if (!tensors.emplace(e.name, Tensor(e.shape, std::move(data))).second) {
      fail(ErrorCode::ParseError, "duplicate tensor name '" + e.name + "'");
    }
  }
  return tensors;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

inline nlohmann::json layer_to_json(const LayerSpec& spec) {
  nlohmann::json params = nlohmann::json::object();
  const auto& p = spec.params;
  switch (spec.kind) {
    case LayerKind::Conv2d:
      params = {{"kernel", p.kernel}, {"stride", p.stride}, {"padding", p.padding},
                {"activation", to_string(p.activation)}};
      break;
    case LayerKind::Dense:
      params = {{"activation", to_string(p.activation)}};
      break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      params = {{"size", p.size}, {"stride", p.stride}};
      break;
    case LayerKind::UpsampleNearest:
      params = {{"factor", p.factor}};
      break;
    default:
      break;
  }
  nlohmann::json j = {{"name", spec.name}, {"kind", to_string(spec.kind)}, {"params", params},
                      {"inputs", spec.inputs}};
  j["weight_ref"] = spec.weight_ref ? nlohmann::json(*spec.weight_ref) : nlohmann::json(nullptr);
  j["bias_ref"] = spec.bias_ref ? nlohmann::json(*spec.bias_ref) : nlohmann::json(nullptr);
  return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  LayerSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.kind = parse_layer_kind(j.at("kind").get<std::string>());
  spec.inputs = j.at("inputs").get<std::vector<std::string>>();
  const auto& params = j.value("params", nlohmann::json::object());
  auto& p = spec.params;
  switch (spec.kind) {
    case LayerKind::Conv2d:
      p.kernel = params.at("kernel").get<std::size_t>();
      p.stride = params.value("stride", std::size_t{1});
      p.padding = params.value("padding", std::size_t{0});
      p.activation = parse_activation(params.value("activation", std::string("none")));
      break;
    case LayerKind::Dense:
      p.activation = parse_activation(params.value("activation", std::string("none")));
      break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      p.size = params.at("size").get<std::size_t>();
      p.stride = params.value("stride", p.size);
      break;
    case LayerKind::UpsampleNearest:
      p.factor = params.at("factor").get<std::size_t>();
      break;
    default:
      break;
  }
  for (auto* field : {"weight_ref", "bias_ref"}) {
    if (j.contains(field) && !j[field].is_null()) {
      (std::string_view(field) == "weight_ref" ? spec.weight_ref : spec.bias_ref) = j[field].get<std::string>();
    }
  }
  return spec;
}

/// Canonical manifest text for `model` whose blob hashes to `blob_sha256`.
inline std::string encode_manifest(const ModelGraph& model, const std::string& blob_sha256) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& spec : model.layers) layers.push_back(layer_to_json(spec));
  nlohmann::json j = {{"format_version", kFormatVersion},
                      {"input_shape", model.input_shape},
                      {"task", to_string(model.task)},
                      {"output_head", model.output_head},
                      {"layers", layers},
                      {"blob_sha256", blob_sha256}};
  return j.dump(2) + "\n";
}

/// Parses and fully validates a manifest/blob pair held in memory.
inline ModelGraph decode_model(const std::string& manifest_text, std::span<const std::uint8_t> blob) {
  ModelGraph model;
  std::string expected_sha;
  try {
    const auto j = nlohmann::json::parse(manifest_text);
    if (j.at("format_version").get<int>() != kFormatVersion) {
      fail(ErrorCode::ParseError, "unsupported format_version " + j.at("format_version").dump());
    }
    const auto shape = j.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) fail(ErrorCode::ParseError, "input_shape must be [H, W, C]");
    std::copy(shape.begin(), shape.end(), model.input_shape.begin());
    const auto task = j.at("task").get<std::string>();
    if (task == "segmentation") {
      model.task = Task::Segmentation;
    } else if (task == "classification") {
      model.task = Task::Classification;
    } else {
      fail(ErrorCode::ParseError, "unknown task '" + task + "'");
    }
    model.output_head = j.at("output_head").get<std::string>();
    for (const auto& l : j.at("layers")) model.layers.push_back(layer_from_json(l));
    expected_sha = j.at("blob_sha256").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, std::string("manifest: ") + e.what());
  }
  if (sha256_hex(blob) != expected_sha) {
    fail(ErrorCode::ChecksumMismatch, "blob SHA-256 differs from manifest blob_sha256");
  }
  model.tensors = decode_blob(blob);
  sort_topologically(model.layers);
  validate_model(model);
  return model;
}

inline ModelGraph load_model(const std::filesystem::path& manifest_path, const std::filesystem::path& blob_path) {
  const Bytes manifest = read_file(manifest_path);
  const Bytes blob = read_file(blob_path);
  return decode_model(std::string(manifest.begin(), manifest.end()), blob);
}

/// Writes the canonical manifest and blob for `model`.
inline void save_model(const ModelGraph& model, const std::filesystem::path& manifest_path,
                       const std::filesystem::path& blob_path) {
  const Bytes blob = encode_blob(model.tensors);
  write_file(blob_path, blob);
  write_text(manifest_path, encode_manifest(model, sha256_hex(blob)));
}

/// SHA-256 over every tensor (name, shape and data) of a model; used to
/// check that analyses leave the weights untouched.
inline std::string weights_checksum(const ModelGraph& model) { return sha256_hex(encode_blob(model.tensors)); }

}  // namespace cg
