#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conceptgraph/clustering.hpp"
#include "conceptgraph/error.hpp"
#include "conceptgraph/image_io.hpp"
#include "conceptgraph/kernel.hpp"
#include "conceptgraph/model.hpp"

namespace cg {

/// One concept: a cluster of output filters of a conv2d layer.
struct ConceptRef {
  std::string layer;
  std::size_t cluster_id = 0;
  std::set<std::size_t> members;

  /// Stable node id used in graphs and file names.
  std::string id() const { return layer + "/c" + std::to_string(cluster_id); }

  friend bool operator==(const ConceptRef&, const ConceptRef&) = default;
};

inline std::vector<ConceptRef> concepts_of(const ClusterAssignment& a) {
  std::vector<ConceptRef> out;
  for (std::size_t c = 0; c < a.cluster_count(); ++c) {
    const auto m = a.members(c);
    out.push_back({a.layer, c, std::set<std::size_t>(m.begin(), m.end())});
  }
  return out;
}

struct ConceptScalar {
  double y = 0.0;
  ActivationCache cache;
};

struct ConceptAttentionMap {
  ConceptRef concept_ref;
  std::string input_id;
  Tensor map;  // (H, W, 1) at input resolution, max-normalized to [0, 1]
  Tensor raw;  // (H', W', 1) at the resolution of the layer feeding the concept layer
  double y = 0.0;
  std::vector<double> beta;
};

namespace detail {

inline const LayerSpec& concept_layer(const ModelGraph& model, const ConceptRef& c) {
  const auto& spec = model.layer(c.layer);
  if (spec.kind != LayerKind::Conv2d) fail(ErrorCode::NotAConvLayer, "layer '" + c.layer + "' is not conv2d");
  if (c.members.empty()) fail(ErrorCode::EmptyCluster, "concept " + c.id() + " has no members");
  return spec;
}

}  // namespace detail

/// Condensed concept output y = (1/Z) sum_ij mean_{k in members} Phi_l,k(x)
/// with Z = H_l * W_l, evaluated with every non-member filter of l zeroed.
inline ConceptScalar concept_scalar(const ModelGraph& model, const Tensor& input, const ConceptRef& c) {
  detail::concept_layer(model, c);
  ConceptScalar out;
  out.cache = forward_to(model, input, c.layer, {Intervention{c.layer, c.members}});
  const Tensor& act = out.cache.at(c.layer);
  const std::size_t hw = act.dim(0) * act.dim(1), ch = act.dim(2);
  double acc = 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    for (auto k : c.members) acc += act[i * ch + k];
  }
  out.y = acc / (static_cast<double>(hw) * static_cast<double>(c.members.size()));
  return out;
}

/// Bilinear resize of a single-channel (H, W, 1) map, half-pixel centers with
/// edge clamping.
inline Tensor resize_bilinear(const Tensor& src, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = src.dim(0), w = src.dim(1);
  Tensor out({out_h, out_w, 1});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = (1 - tx) * src.at(y0, x0, 0) + tx * src.at(y0, x1, 0);
      const double bot = (1 - tx) * src.at(y1, x0, 0) + tx * src.at(y1, x1, 0);
      out.at(y, x, 0) = static_cast<float>((1 - ty) * top + ty * bot);
    }
  }
  return out;
}

/// Divides by the maximum; an all-zero map stays zero.
inline Tensor max_normalize(Tensor map) {
  float m = 0.0f;
  for (float v : map.values()) m = std::max(m, v);
  if (m > 0.0f) {
    for (auto& v : map.values()) v = std::min(v / m, 1.0f);
  }
  return map;
}

/// Masked Grad-CAM of a concept with respect to the input of its layer:
///   beta_m = (1/Z') sum_ij dy/dPhi_{l-1,m},   raw = ReLU(sum_m beta_m Phi_{l-1,m})
/// then bilinearly upsampled to the input resolution and max-normalized.
inline ConceptAttentionMap concept_attention_map(const ModelGraph& model, const Tensor& input, const ConceptRef& c,
                                                 std::string input_id = {}) {
  const LayerSpec& spec = detail::concept_layer(model, c);
  const std::string& pred = spec.inputs.front();
  if (pred != kInputName && is_merge(model.layer(pred).kind)) {
    fail(ErrorCode::NoUniquePredecessor,
         "layer '" + c.layer + "' is fed by merge layer '" + pred + "'; pick a layer with a single predecessor");
  }
  ConceptScalar cs = concept_scalar(model, input, c);
  const Tensor& prev = cs.cache.at(pred);
  const LayerWeights w = model.weights_of(spec);
  const auto [mw, mb] = mask_output_channels(*w.weight, w.bias, c.members);
  const Tensor grad = layer_input_gradient(spec, prev, mw, mb ? &*mb : nullptr, c.members);

  const std::size_t h = prev.dim(0), wd = prev.dim(1), ch = prev.dim(2), hw = h * wd;
  std::vector<double> beta(ch, 0.0);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t m = 0; m < ch; ++m) beta[m] += grad[i * ch + m];
  }
  for (auto& b : beta) b /= static_cast<double>(hw);

  Tensor raw({h, wd, 1});
  for (std::size_t i = 0; i < hw; ++i) {
    double acc = 0.0;
    for (std::size_t m = 0; m < ch; ++m) acc += beta[m] * prev[i * ch + m];
    raw[i] = acc > 0.0 ? static_cast<float>(acc) : 0.0f;
  }
  ConceptAttentionMap out;
  out.concept_ref = c;
  out.input_id = std::move(input_id);
  out.map = max_normalize(resize_bilinear(raw, model.input_shape[0], model.input_shape[1]));
  out.raw = std::move(raw);
  out.y = cs.y;
  out.beta = std::move(beta);
  return out;
}

inline nlohmann::json sidecar_json(const ConceptAttentionMap& m) {
  return {{"layer", m.concept_ref.layer},
          {"cluster", m.concept_ref.cluster_id},
          {"members", m.concept_ref.members},
          {"input_id", m.input_id},
          {"y", m.y},
          {"beta", m.beta}};
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

using Rgb = std::array<std::uint8_t, 3>;

/// Jet-style palette: blue -> cyan -> yellow -> red.
inline Rgb jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto channel = [v](double center) {
    const double t = std::clamp(1.5 - std::abs(4.0 * v - center), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(255.0 * t));
  };
  return {channel(3.0), channel(2.0), channel(1.0)};
}

/// Grayscale 8-bit rendering of an (H, W, C) tensor: channel mean, min-max
/// scaled. A constant tensor renders black.
inline Image to_display_image(const Tensor& t) {
  const std::size_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
  std::vector<double> g(h * w, 0.0);
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t k = 0; k < c; ++k) g[i] += t[i * c + k];
    g[i] /= static_cast<double>(c);
  }
  const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
  const double span = *hi - *lo;
  Image img{h, w, 1, std::vector<std::uint8_t>(h * w)};
  for (std::size_t i = 0; i < h * w; ++i) {
    img.pixels[i] = span > 0 ? static_cast<std::uint8_t>(std::lround(255.0 * (g[i] - *lo) / span)) : 0;
  }
  return img;
}

/// Alpha-blends the palette colour of `map` over a grayscale source. The
/// per-pixel opacity is alpha * map, so zero attention leaves the source
/// untouched: out = (1 - alpha*m) * img + alpha*m * palette(m).
inline Image overlay(const Tensor& map, const Image& source, double alpha = 0.5, Rgb (*palette)(double) = jet) {
  if (map.rank() != 3 || map.dim(0) != source.height || map.dim(1) != source.width || map.dim(2) != 1) {
    fail(ErrorCode::ShapeMismatch, "map " + shape_string(map.shape()) + " does not match image " +
                                       std::to_string(source.height) + "x" + std::to_string(source.width));
  }
  Image out{source.height, source.width, 3, std::vector<std::uint8_t>(source.height * source.width * 3)};
  for (std::size_t y = 0; y < source.height; ++y) {
    for (std::size_t x = 0; x < source.width; ++x) {
      const double m = std::clamp(static_cast<double>(map.at(y, x, 0)), 0.0, 1.0);
      const double a = alpha * m;
      const Rgb col = palette(m);
      for (std::size_t k = 0; k < 3; ++k) {
        const double src = source.at(y, x, source.channels == 3 ? k : 0);
        out.at(y, x, k) = static_cast<std::uint8_t>(std::lround((1.0 - a) * src + a * col[k]));
      }
    }
  }
  return out;
}

}  // namespace cg
