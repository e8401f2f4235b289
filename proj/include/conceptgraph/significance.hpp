#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conceptgraph/attention.hpp"
#include "conceptgraph/clustering.hpp"
#include "conceptgraph/error.hpp"
#include "conceptgraph/model.hpp"
#include "conceptgraph/probe.hpp"
#include "conceptgraph/seeding.hpp"

namespace cg {

/// Elementwise Gaussian over the filters of a cluster.
struct ClusterGaussianFit {
  Tensor mu;
  Tensor sigma;
  std::size_t n = 0;
};

/// mu = elementwise mean, sigma = elementwise population standard deviation.
inline ClusterGaussianFit fit_cluster_gaussian(const std::vector<Tensor>& member_filters) {
  if (member_filters.empty()) fail(ErrorCode::EmptyCluster, "cannot fit a Gaussian to an empty cluster");
  const Shape& shape = member_filters.front().shape();
  const std::size_t size = member_filters.front().size();
  std::vector<double> mean(size, 0.0), var(size, 0.0);
  for (const auto& f : member_filters) {
    if (f.shape() != shape) fail(ErrorCode::ShapeMismatch, "cluster members differ in shape");
    for (std::size_t i = 0; i < size; ++i) mean[i] += f[i];
  }
  const auto n = static_cast<double>(member_filters.size());
  for (auto& m : mean) m /= n;
  for (const auto& f : member_filters) {
    for (std::size_t i = 0; i < size; ++i) var[i] += (f[i] - mean[i]) * (f[i] - mean[i]);
  }
  std::vector<float> mu(size), sigma(size);
  for (std::size_t i = 0; i < size; ++i) {
    mu[i] = static_cast<float>(mean[i]);
    sigma[i] = static_cast<float>(std::sqrt(var[i] / n));
  }
  return {Tensor(shape, std::move(mu)), Tensor(shape, std::move(sigma)), member_filters.size()};
}

/// n i.i.d. elementwise draws mu + sigma * z, drawn member-major then
/// row-major from a generator seeded with `seed`.
inline std::vector<Tensor> resample_cluster(const ClusterGaussianFit& fit, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t d = 0; d < n; ++d) {
    std::vector<float> v(fit.mu.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double z = normal(rng);
      v[i] = static_cast<float>(static_cast<double>(fit.mu[i]) + static_cast<double>(fit.sigma[i]) * z);
    }
    out.emplace_back(fit.mu.shape(), std::move(v));
  }
  return out;
}

enum class Prior { ClusterGaussian, LayerGaussian, ClusterUniform };

inline constexpr Prior kAllPriors[] = {Prior::ClusterGaussian, Prior::LayerGaussian, Prior::ClusterUniform};

inline std::string_view to_string(Prior p) {
  switch (p) {
    case Prior::ClusterGaussian: return "cluster_gaussian";
    case Prior::LayerGaussian: return "layer_gaussian";
    case Prior::ClusterUniform: return "cluster_uniform";
  }
  return "?";
}

/// Pearson correlation; 0 when either side is constant.
inline double pearson(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "correlating maps of different sizes");
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct ConsistencyResult {
  double mean = 0.0;
  std::vector<std::vector<double>> matrix;
};

/// Mean Pearson correlation over all unordered pairs of maps.
inline ConsistencyResult pairwise_consistency(const std::vector<Tensor>& maps) {
  if (maps.size() < 2) fail(ErrorCode::EmptyProbe, "consistency needs at least two probe items");
  ConsistencyResult r;
  const std::size_t n = maps.size();
  r.matrix.assign(n, std::vector<double>(n, 1.0));
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = pearson(maps[i].values(), maps[j].values());
      r.matrix[i][j] = r.matrix[j][i] = c;
      acc += c;
    }
  }
  r.mean = acc / static_cast<double>(n * (n - 1) / 2);
  return r;
}

/// The same maps with each one's pixels independently shuffled; the
/// no-spatial-structure reference for consistency.
inline std::vector<Tensor> spatially_permuted(const std::vector<Tensor>& maps, std::uint64_t seed) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    std::mt19937_64 rng(derive_seed(seed, "permute", i));
    Tensor t = maps[i];
    std::shuffle(t.values().begin(), t.values().end(), rng);
    out.push_back(std::move(t));
  }
  return out;
}

/// Raw (pre-normalization) concept attention maps over every probe item.
inline std::vector<Tensor> raw_maps(const ModelGraph& model, const ConceptRef& c, const ProbeSet& probe) {
  std::vector<Tensor> maps;
  maps.reserve(probe.size());
  for (const auto& item : probe.items) maps.push_back(concept_attention_map(model, item.image, c, item.id).raw);
  return maps;
}

inline ConsistencyResult consistency_score(const ModelGraph& model, const ConceptRef& c, const ProbeSet& probe) {
  if (probe.size() < 2) fail(ErrorCode::EmptyProbe, "consistency needs at least two probe items");
  return pairwise_consistency(raw_maps(model, c, probe));
}

namespace detail {

inline std::vector<Tensor> layer_filters(const ModelGraph& model, const std::string& layer) {
  const Tensor& w = model.tensor(*model.layer(layer).weight_ref);
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < w.shape().back(); ++k) out.push_back(filter_slice(w, k));
  return out;
}

/// Replacement filters for the members of `c` drawn from `prior`.
inline std::vector<Tensor> draw_replacements(const ModelGraph& model, const ConceptRef& c, Prior prior,
                                             std::uint64_t seed) {
  const auto all = layer_filters(model, c.layer);
  std::vector<Tensor> members;
  for (auto k : c.members) members.push_back(all.at(k));
  const std::size_t n = members.size();
  switch (prior) {
    case Prior::ClusterGaussian:
      return resample_cluster(fit_cluster_gaussian(members), n, seed);
    case Prior::LayerGaussian:
      return resample_cluster(fit_cluster_gaussian(all), n, seed);
    case Prior::ClusterUniform: {
      float lo = std::numeric_limits<float>::infinity(), hi = -lo;
      for (const auto& m : members) {
        for (float v : m.values()) {
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      }
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<double> uni(lo, hi);
      std::vector<Tensor> out;
      for (std::size_t d = 0; d < n; ++d) {
        std::vector<float> v(members.front().size());
        for (auto& x : v) x = lo == hi ? lo : static_cast<float>(uni(rng));
        out.emplace_back(members.front().shape(), std::move(v));
      }
      return out;
    }
  }
  return {};
}

}  // namespace detail

/// Copy of `model` with the member filters of `c` replaced, in member order.
inline ModelGraph with_replaced_filters(const ModelGraph& model, const ConceptRef& c,
                                        const std::vector<Tensor>& replacements) {
  ModelGraph copy = model;
  Tensor& w = copy.tensors.at(*copy.layer(c.layer).weight_ref);
  std::size_t i = 0;
  for (auto k : c.members) set_filter_slice(w, k, replacements.at(i++));
  return copy;
}

struct PriorRobustness {
  double mean = 0.0;
  std::vector<double> per_run;  // mean over probe items of each run
};

/// Replaces the concept's filters with draws from `prior`, recomputes the
/// concept attention maps and correlates them with the originals. Run r uses
/// the sub-seed derive_seed(seed, prior, r).
inline PriorRobustness robustness_score(const ModelGraph& model, const ConceptRef& c, const ProbeSet& probe,
                                        Prior prior, std::size_t runs, std::uint64_t seed,
                                        const std::vector<Tensor>* original_maps = nullptr) {
  if (probe.empty()) fail(ErrorCode::EmptyProbe, "robustness needs at least one probe item");
  if (runs == 0) fail(ErrorCode::ConfigInvalid, "robustness needs runs >= 1");
  std::vector<Tensor> own;
  if (!original_maps) {
    own = raw_maps(model, c, probe);
    original_maps = &own;
  }
  PriorRobustness r;
  double total = 0.0;
  for (std::size_t run = 0; run < runs; ++run) {
    const auto draws = detail::draw_replacements(model, c, prior, derive_seed(seed, to_string(prior), run));
    const ModelGraph resampled = with_replaced_filters(model, c, draws);
    double acc = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const auto cam = concept_attention_map(resampled, probe.items[i].image, c, probe.items[i].id);
      acc += pearson((*original_maps)[i].values(), cam.raw.values());
    }
    r.per_run.push_back(acc / static_cast<double>(probe.size()));
    total += acc;
  }
  r.mean = total / static_cast<double>(runs * probe.size());
  return r;
}

struct SignificanceReport {
  ConceptRef concept_ref;
  ConsistencyResult consistency;
  double permuted_baseline = 0.0;
  std::map<std::string, PriorRobustness> robustness;  // keyed by prior name
  std::size_t runs = 0;
  std::uint64_t seed = 0;
};

inline SignificanceReport significance_report(const ModelGraph& model, const ConceptRef& c, const ProbeSet& probe,
                                              std::size_t runs, std::uint64_t seed) {
  SignificanceReport rep;
  rep.concept_ref = c;
  rep.runs = runs;
  rep.seed = seed;
  const auto maps = raw_maps(model, c, probe);
  rep.consistency = pairwise_consistency(maps);
  rep.permuted_baseline = pairwise_consistency(spatially_permuted(maps, seed)).mean;
  for (auto prior : kAllPriors) {
    rep.robustness[std::string(to_string(prior))] = robustness_score(model, c, probe, prior, runs, seed, &maps);
  }
  return rep;
}

inline nlohmann::json to_json(const SignificanceReport& r) {
  nlohmann::json rob = nlohmann::json::object();
  for (const auto& [name, p] : r.robustness) rob[name] = {{"mean", p.mean}, {"per_run", p.per_run}};
  return {{"concept", r.concept_ref.id()},
          {"layer", r.concept_ref.layer},
          {"cluster", r.concept_ref.cluster_id},
          {"members", r.concept_ref.members},
          {"consistency", r.consistency.mean},
          {"consistency_matrix", r.consistency.matrix},
          {"permuted_baseline", r.permuted_baseline},
          {"robustness", rob},
          {"runs", r.runs},
          {"seed", r.seed}};
}

}  // namespace cg
