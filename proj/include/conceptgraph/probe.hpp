#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "conceptgraph/error.hpp"
#include "conceptgraph/image_io.hpp"
#include "conceptgraph/model_io.hpp"
#include "conceptgraph/tensor.hpp"

namespace cg {

/// Per-channel affine normalization x' = (x - mean) / scale. A single value
/// broadcasts over all channels. PNG values enter as raw bytes (0..255).
struct Normalization {
  std::vector<float> mean{0.0f};
  std::vector<float> scale{1.0f};

  float mean_of(std::size_t c) const { return mean.size() == 1 ? mean[0] : mean.at(c); }
  float scale_of(std::size_t c) const { return scale.size() == 1 ? scale[0] : scale.at(c); }
};

struct ProbeItem {
  std::string id;
  Tensor image;  // (H, W, C), normalized
};

struct ProbeSet {
  std::vector<ProbeItem> items;
  Normalization normalization;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
};

/// Loads every .png / .f32 file of `dir`, sorted by filename. Each item must
/// match `input_shape` (H, W, C); the id is the filename stem.
inline ProbeSet load_probe_set(const std::filesystem::path& dir, const std::array<std::size_t, 3>& input_shape,
                               const Normalization& normalization = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) fail(ErrorCode::EmptyProbeDir, dir.string() + " is not a directory");
  const std::size_t h = input_shape[0], w = input_shape[1], c = input_shape[2];
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (normalization.scale_of(ch) == 0.0f) fail(ErrorCode::ConfigInvalid, "normalization scale is zero");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = entry.path().extension();
    if (entry.is_regular_file() && (ext == ".png" || ext == ".f32")) files.push_back(entry.path());
  }
  if (files.empty()) fail(ErrorCode::EmptyProbeDir, "no .png or .f32 files in " + dir.string());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

  ProbeSet probe;
  probe.normalization = normalization;
  std::set<std::string> ids;
  for (const auto& file : files) {
    std::vector<float> values;
    if (file.extension() == ".png") {
      const Image img = read_png(file);
      if (img.height != h || img.width != w || img.channels != c) {
        fail(ErrorCode::ShapeMismatch, file.filename().string() + " is " + std::to_string(img.height) + "x" +
                                           std::to_string(img.width) + "x" + std::to_string(img.channels) +
                                           ", model expects " + shape_string({h, w, c}));
      }
      values.assign(img.pixels.begin(), img.pixels.end());
    } else {
      const Bytes raw = read_file(file);
      if (raw.size() != 4 * h * w * c) {
        fail(ErrorCode::ShapeMismatch, file.filename().string() + " holds " + std::to_string(raw.size() / 4) +
                                           " floats, model expects " + std::to_string(h * w * c));
      }
      values.resize(h * w * c);
      std::memcpy(values.data(), raw.data(), raw.size());
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      const std::size_t ch = i % c;
      values[i] = (values[i] - normalization.mean_of(ch)) / normalization.scale_of(ch);
    }
    std::string id = file.stem().string();
    if (!ids.insert(id).second) fail(ErrorCode::DecodeError, "duplicate probe id '" + id + "'");
    try {
      probe.items.push_back({std::move(id), Tensor({h, w, c}, std::move(values))});
    } catch (const Error& e) {
      fail(ErrorCode::DecodeError, file.filename().string() + ": " + e.what());
    }
  }
  return probe;
}

}  // namespace cg
