#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conceptgraph/error.hpp"
#include "conceptgraph/model.hpp"
#include "conceptgraph/tensor.hpp"

namespace cg {

enum class Linkage { Average, Complete };

inline std::string_view to_string(Linkage l) { return l == Linkage::Average ? "average" : "complete"; }

inline Linkage parse_linkage(std::string_view s) {
  if (s == "average") return Linkage::Average;
  if (s == "complete") return Linkage::Complete;
  fail(ErrorCode::ConfigInvalid, "unknown linkage '" + std::string(s) + "'");
}

struct RepresentativeVector {
  std::string layer;
  std::size_t filter_index = 0;
  std::vector<double> values;
};

/// Mean over the input-channel axis of one (f, f, inc) filter, flattened
/// row-major to f*f values.
inline std::vector<double> mean_over_input_channels(const Tensor& filter) {
  if (filter.rank() != 3 || filter.dim(0) != filter.dim(1)) {
    fail(ErrorCode::ShapeMismatch, "filter must be (f, f, inc), got " + shape_string(filter.shape()));
  }
  const std::size_t ff = filter.dim(0) * filter.dim(1), inc = filter.dim(2);
  std::vector<double> out(ff, 0.0);
  for (std::size_t j = 0; j < ff; ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < inc; ++c) acc += filter[j * inc + c];
    out[j] = acc / static_cast<double>(inc);
  }
  return out;
}

/// Representative vector of one filter: the input-channel mean plus the
/// positional ramp pe_scale * layer_sigma * j / (f*f - 1).
inline RepresentativeVector representative_vector(const Tensor& filter, double pe_scale, double layer_sigma,
                                                  std::size_t filter_index = 0, std::string layer = {}) {
  RepresentativeVector rv{std::move(layer), filter_index, mean_over_input_channels(filter)};
  const std::size_t n = rv.values.size();
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  for (std::size_t j = 0; j < n; ++j) rv.values[j] += pe_scale * layer_sigma * static_cast<double>(j) / denom;
  return rv;
}

/// Slice output filter k of a (f, f, inc, outc) conv weight as (f, f, inc).
inline Tensor filter_slice(const Tensor& weight, std::size_t k) {
  const auto& s = weight.shape();
  if (s.size() != 4) fail(ErrorCode::ShapeMismatch, "conv weight must be rank 4, got " + shape_string(s));
  const std::size_t outc = s[3], n = s[0] * s[1] * s[2];
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = weight[i * outc + k];
  return Tensor({s[0], s[1], s[2]}, std::move(v));
}

/// Writes `filter` (f, f, inc) back as output channel k of `weight`.
inline void set_filter_slice(Tensor& weight, std::size_t k, const Tensor& filter) {
  const std::size_t outc = weight.shape().back(), n = weight.size() / outc;
  if (filter.size() != n) fail(ErrorCode::ShapeMismatch, "filter size does not match weight slice");
  for (std::size_t i = 0; i < n; ++i) weight[i * outc + k] = filter[i];
}

/// Representative vectors for every output filter of a conv weight. The layer
/// sigma is the population standard deviation of all input-channel means of
/// the layer, taken before the positional ramp is added.
inline std::vector<RepresentativeVector> representative_vectors(const Tensor& weight, double pe_scale,
                                                                const std::string& layer = {}) {
  const std::size_t outc = weight.shape().back();
  std::vector<std::vector<double>> means;
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < outc; ++k) {
    means.push_back(mean_over_input_channels(filter_slice(weight, k)));
    for (double v : means.back()) {
      sum += v;
      ++count;
    }
  }
  const double mu = sum / static_cast<double>(count);
  for (const auto& m : means) {
    for (double v : m) sq += (v - mu) * (v - mu);
  }
  const double sigma = std::sqrt(sq / static_cast<double>(count));
  std::vector<RepresentativeVector> out;
  for (std::size_t k = 0; k < outc; ++k) {
    out.push_back(representative_vector(filter_slice(weight, k), pe_scale, sigma, k, layer));
  }
  return out;
}

struct ClusterAssignment {
  std::string layer;
  std::vector<std::size_t> labels;  // labels[filter_index] in 0..K-1
  double threshold_used = 0.0;
  Linkage linkage = Linkage::Average;
  std::optional<double> silhouette;  // nullopt when K == 1

  std::size_t cluster_count() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  }

  std::vector<std::size_t> members(std::size_t cluster) const {
    std::vector<std::size_t> m;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cluster) m.push_back(i);
    }
    return m;
  }
};

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

namespace detail {

inline void check_dimensions(const std::vector<std::vector<double>>& points) {
  if (points.empty()) fail(ErrorCode::DimensionMismatch, "no vectors to cluster");
  for (const auto& p : points) {
    if (p.size() != points.front().size()) {
      fail(ErrorCode::DimensionMismatch, "vectors of length " + std::to_string(p.size()) + " and " +
                                             std::to_string(points.front().size()));
    }
  }
}

/// Relabels so cluster ids follow the first filter index of each cluster.
inline std::vector<std::size_t> canonical_labels(const std::vector<std::size_t>& raw) {
  std::map<std::size_t, std::size_t> remap;
  std::vector<std::size_t> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto [it, _] = remap.emplace(raw[i], remap.size());
    out[i] = it->second;
  }
  return out;
}

}  // namespace detail

/// Agglomerative clustering under Euclidean distance. Pairs of clusters are
/// merged (closest first, lowest ids on ties) while their linkage distance is
/// at most `distance_threshold`. Linkage distances are maintained with the
/// Lance-Williams update.
inline std::vector<std::size_t> agglomerate(const std::vector<std::vector<double>>& points,
                                            double distance_threshold, Linkage linkage) {
  detail::check_dimensions(points);
  if (!(distance_threshold > 0.0)) fail(ErrorCode::ConfigInvalid, "distance threshold must be > 0");
  const std::size_t n = points.size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) d[i][j] = d[j][i] = euclidean(points[i], points[j]);
  }
  std::vector<std::size_t> owner(n), size(n, 1);
  for (std::size_t i = 0; i < n; ++i) owner[i] = i;
  std::vector<char> active(n, 1);

  for (std::size_t live = n; live > 1; --live) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t a = 0, b = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (active[j] && d[i][j] < best) {
          best = d[i][j];
          a = i;
          b = j;
        }
      }
    }
    if (best > distance_threshold) break;
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == a || k == b) continue;
      const double merged = linkage == Linkage::Complete
                                ? std::max(d[a][k], d[b][k])
                                : (static_cast<double>(size[a]) * d[a][k] + static_cast<double>(size[b]) * d[b][k]) /
                                      static_cast<double>(size[a] + size[b]);
      d[a][k] = d[k][a] = merged;
    }
    size[a] += size[b];
    active[b] = 0;
    for (auto& o : owner) {
      if (o == b) o = a;
    }
  }
  return detail::canonical_labels(owner);
}

/// Mean silhouette (b - a) / max(a, b) over all points; singleton clusters
/// contribute 0. Returns nullopt when fewer than two clusters exist.
inline std::optional<double> silhouette(const std::vector<std::vector<double>>& points,
                                        const std::vector<std::size_t>& labels) {
  detail::check_dimensions(points);
  if (labels.size() != points.size()) fail(ErrorCode::DimensionMismatch, "one label per vector required");
  const std::size_t k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> counts(k, 0);
  for (auto l : labels) ++counts[l];
  if (std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }) < 2) return std::nullopt;

  const std::size_t n = points.size();
  double total = 0.0;
  std::vector<double> sums(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (counts[labels[i]] == 1) continue;
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) sums[labels[j]] += euclidean(points[i], points[j]);
    }
    const double a = sums[labels[i]] / static_cast<double>(counts[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      if (c != labels[i] && counts[c] > 0) b = std::min(b, sums[c] / static_cast<double>(counts[c]));
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

inline std::vector<std::vector<double>> values_of(const std::vector<RepresentativeVector>& vectors) {
  std::vector<std::vector<double>> pts;
  pts.reserve(vectors.size());
  for (const auto& v : vectors) pts.push_back(v.values);
  return pts;
}

inline ClusterAssignment cluster_layer(const std::vector<RepresentativeVector>& vectors, double distance_threshold,
                                       Linkage linkage = Linkage::Average) {
  const auto pts = values_of(vectors);
  ClusterAssignment out;
  out.layer = vectors.empty() ? std::string() : vectors.front().layer;
  out.threshold_used = distance_threshold;
  out.linkage = linkage;
  const auto raw = agglomerate(pts, distance_threshold, linkage);
  // Filter indices may arrive in any order; labels are indexed by filter.
  std::vector<std::size_t> by_filter(vectors.size());
  std::vector<std::size_t> order(vectors.size());
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].filter_index >= vectors.size()) {
      fail(ErrorCode::DimensionMismatch, "filter index " + std::to_string(vectors[i].filter_index) + " out of range");
    }
    by_filter[vectors[i].filter_index] = raw[i];
    order[vectors[i].filter_index] = i;
  }
  out.labels = detail::canonical_labels(by_filter);
  std::vector<std::vector<double>> ordered_pts;
  for (auto i : order) ordered_pts.push_back(pts[i]);
  out.silhouette = silhouette(ordered_pts, out.labels);
  return out;
}

/// Clusters the filters of one conv2d layer of `model`.
inline ClusterAssignment cluster_model_layer(const ModelGraph& model, const std::string& layer,
                                             double distance_threshold, Linkage linkage, double pe_scale) {
  const auto& spec = model.layer(layer);
  if (spec.kind != LayerKind::Conv2d) fail(ErrorCode::NotAConvLayer, "layer '" + layer + "' is not conv2d");
  return cluster_layer(representative_vectors(model.tensor(*spec.weight_ref), pe_scale, layer), distance_threshold,
                       linkage);
}

inline nlohmann::json to_json(const ClusterAssignment& a) {
  return {{"layer", a.layer},
          {"linkage", to_string(a.linkage)},
          {"threshold", a.threshold_used},
          {"silhouette", a.silhouette ? nlohmann::json(*a.silhouette) : nlohmann::json(nullptr)},
          {"labels", a.labels}};
}

inline ClusterAssignment cluster_assignment_from_json(const nlohmann::json& j) {
  ClusterAssignment a;
  a.layer = j.at("layer").get<std::string>();
  a.linkage = parse_linkage(j.at("linkage").get<std::string>());
  a.threshold_used = j.at("threshold").get<double>();
  if (!j.at("silhouette").is_null()) a.silhouette = j.at("silhouette").get<double>();
  a.labels = j.at("labels").get<std::vector<std::size_t>>();
  return a;
}

}  // namespace cg
