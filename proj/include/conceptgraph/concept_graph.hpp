#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conceptgraph/attention.hpp"
#include "conceptgraph/clustering.hpp"
#include "conceptgraph/error.hpp"
#include "conceptgraph/model.hpp"
#include "conceptgraph/probe.hpp"

namespace cg {

inline constexpr std::string_view kInputNode = "INPUT";
inline constexpr std::string_view kOutputNode = "OUTPUT";

/// Pre- and post-interventional activation samples at a downstream layer,
/// paired element by element over (item, position, channel).
struct PairedSamples {
  std::vector<double> pre;
  std::vector<double> post;
};

namespace detail {

inline void append_all(std::vector<double>& out, const Tensor& act) {
  out.insert(out.end(), act.data().begin(), act.data().end());
}

inline void check_order(const ModelGraph& model, const std::string& upstream, const std::string& downstream) {
  if (model.index_of(upstream) >= model.index_of(downstream)) {
    fail(ErrorCode::LayerOrderViolation, "layer '" + upstream + "' does not precede '" + downstream + "'");
  }
}

}  // namespace detail

/// PRE: the feature map of q's layer under do(C^p_{-i} = 0), i.e. what the
/// p-concept sends to every concept of that layer.
/// POST: the same feature map under do(C^p_{-i} = 0) and do(C^q_{-j} = 0),
/// i.e. what flows on through the q-concept alone.
/// Every channel of q's layer is sampled; layers between p and q run without
/// intervention.
inline PairedSamples interventional_activations(const ModelGraph& model, const ConceptRef& p, const ConceptRef& q,
                                                const ProbeSet& probe) {
  detail::check_order(model, p.layer, q.layer);
  PairedSamples s;
  const Intervention keep_p{p.layer, p.members};
  const Intervention keep_q{q.layer, q.members};
  for (const auto& item : probe.items) {
    detail::append_all(s.pre, forward_to(model, item.image, q.layer, {keep_p}).at(q.layer));
    detail::append_all(s.post, forward_to(model, item.image, q.layer, {keep_p, keep_q}).at(q.layer));
  }
  return s;
}

namespace detail {

inline double entropy_from_counts(const std::vector<std::size_t>& counts, double total) {
  double acc = 0.0;
  for (auto c : counts) {
    if (c) acc += static_cast<double>(c) * std::log(static_cast<double>(c));
  }
  return std::log(total) - acc / total;
}

}  // namespace detail

/// Normalized mutual information 2 I(A;B) / (H(A) + H(B)) in nats, from a
/// bins x bins equal-width histogram over the pooled range of A and B. Zero
/// when either marginal entropy vanishes.
inline double nmi(std::span<const double> a, std::span<const double> b, std::size_t bins) {
  if (a.size() != b.size()) fail(ErrorCode::InsufficientSamples, "NMI needs paired samples of equal length");
  if (a.size() < 2) fail(ErrorCode::InsufficientSamples, "NMI needs at least 2 samples");
  if (bins < 2) fail(ErrorCode::ConfigInvalid, "NMI needs at least 2 bins");
  double lo = a[0], hi = a[0];
  for (std::size_t i = 0; i < a.size(); ++i) {
    lo = std::min({lo, a[i], b[i]});
    hi = std::max({hi, a[i], b[i]});
  }
  if (!(hi > lo)) return 0.0;
  const double width = (hi - lo) / static_cast<double>(bins);
  auto bin = [&](double v) {
    const auto k = static_cast<std::size_t>((v - lo) / width);
    return std::min(k, bins - 1);
  };
  std::vector<std::size_t> ca(bins, 0), cb(bins, 0), cab(bins * bins, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto ia = bin(a[i]), ib = bin(b[i]);
    ++ca[ia];
    ++cb[ib];
    ++cab[ia * bins + ib];
  }
  const auto n = static_cast<double>(a.size());
  const double ha = detail::entropy_from_counts(ca, n);
  const double hb = detail::entropy_from_counts(cb, n);
  if (ha <= 0.0 || hb <= 0.0) return 0.0;
  // Joint entropy is order-independent; symmetric in (A, B).
  std::vector<std::size_t> joint = cab;
  std::sort(joint.begin(), joint.end());
  const double hab = detail::entropy_from_counts(joint, n);
  const double mi = ha + hb - hab;
  return std::clamp(2.0 * mi / (ha + hb), 0.0, 1.0);
}

inline double nmi(const PairedSamples& s, std::size_t bins) { return nmi(s.post, s.pre, bins); }

struct GraphNode {
  std::string id;
  std::string layer;          // empty for INPUT / OUTPUT
  std::optional<std::size_t> cluster;
  std::vector<std::size_t> members;

  friend bool operator==(const GraphNode&, const GraphNode&) = default;
};

struct GraphEdge {
  std::string src;
  std::string dst;
  double nmi = 1.0;

  friend bool operator==(const GraphEdge&, const GraphEdge&) = default;
};

/// Candidate link between consecutive analyzed layers with its NMI score.
struct LinkScore {
  std::string src;
  std::string dst;
  double nmi = 0.0;
};

struct ConceptGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
  std::vector<std::string> layers;
  double threshold = 0.0;

  /// Inter-concept edges only (excludes the INPUT/OUTPUT connectors).
  std::vector<GraphEdge> concept_edges() const {
    std::vector<GraphEdge> out;
    for (const auto& e : edges) {
      if (e.src != kInputNode && e.dst != kOutputNode) out.push_back(e);
    }
    return out;
  }
};

namespace detail {

inline std::vector<std::vector<ConceptRef>> concepts_by_layer(const ModelGraph& model,
                                                              const std::vector<ClusterAssignment>& assignments) {
  if (assignments.empty()) fail(ErrorCode::NoAnalyzedLayers, "no analyzed layers given");
  std::vector<std::vector<ConceptRef>> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    const auto& spec = model.layer(assignments[i].layer);
    if (spec.kind != LayerKind::Conv2d) fail(ErrorCode::NotAConvLayer, "'" + spec.name + "' is not conv2d");
    if (i > 0) check_order(model, assignments[i - 1].layer, assignments[i].layer);
    out.push_back(concepts_of(assignments[i]));
  }
  return out;
}

}  // namespace detail

/// NMI of every concept pair between consecutive analyzed layers. The PRE
/// pass for (p-concept, item) is shared by every q-concept.
inline std::vector<LinkScore> link_scores(const ModelGraph& model, const std::vector<ClusterAssignment>& assignments,
                                          const ProbeSet& probe, std::size_t bins) {
  if (probe.empty()) fail(ErrorCode::EmptyProbe, "link estimation needs probe items");
  const auto layers = detail::concepts_by_layer(model, assignments);
  std::vector<LinkScore> scores;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    for (const auto& p : layers[l]) {
      const Intervention keep_p{p.layer, p.members};
      std::vector<PairedSamples> samples(layers[l + 1].size());
      for (const auto& item : probe.items) {
        const auto pre = forward_to(model, item.image, layers[l + 1].front().layer, {keep_p});
        for (std::size_t j = 0; j < layers[l + 1].size(); ++j) {
          const auto& q = layers[l + 1][j];
          const auto post = forward_to(model, item.image, q.layer, {keep_p, Intervention{q.layer, q.members}});
          detail::append_all(samples[j].pre, pre.at(q.layer));
          detail::append_all(samples[j].post, post.at(q.layer));
        }
      }
      for (std::size_t j = 0; j < layers[l + 1].size(); ++j) {
        scores.push_back({p.id(), layers[l + 1][j].id(), nmi(samples[j], bins)});
      }
    }
  }
  return scores;
}

/// Assembles the concept DAG: INPUT feeds every first-layer concept, every
/// last-layer concept feeds OUTPUT, and a scored link becomes an edge iff its
/// NMI exceeds `threshold`.
inline ConceptGraph threshold_graph(const std::vector<ClusterAssignment>& assignments,
                                    const std::vector<LinkScore>& scores, double threshold) {
  if (assignments.empty()) fail(ErrorCode::NoAnalyzedLayers, "no analyzed layers given");
  ConceptGraph g;
  g.threshold = threshold;
  g.nodes.push_back({std::string(kInputNode), "", std::nullopt, {}});
  for (const auto& a : assignments) {
    g.layers.push_back(a.layer);
    for (const auto& c : concepts_of(a)) {
      g.nodes.push_back({c.id(), c.layer, c.cluster_id, std::vector<std::size_t>(c.members.begin(), c.members.end())});
    }
  }
  g.nodes.push_back({std::string(kOutputNode), "", std::nullopt, {}});
  for (const auto& c : concepts_of(assignments.front())) g.edges.push_back({std::string(kInputNode), c.id(), 1.0});
  for (const auto& s : scores) {
    if (s.nmi > threshold) g.edges.push_back({s.src, s.dst, s.nmi});
  }
  for (const auto& c : concepts_of(assignments.back())) g.edges.push_back({c.id(), std::string(kOutputNode), 1.0});
  return g;
}

inline ConceptGraph build_graph(const ModelGraph& model, const std::vector<ClusterAssignment>& assignments,
                                const ProbeSet& probe, double threshold, std::size_t bins) {
  return threshold_graph(assignments, link_scores(model, assignments, probe, bins), threshold);
}

/// Number of inter-concept edges at each threshold.
inline std::vector<std::pair<double, std::size_t>> sweep_threshold(const std::vector<LinkScore>& scores,
                                                                   const std::vector<double>& thresholds) {
  std::vector<std::pair<double, std::size_t>> out;
  for (double t : thresholds) {
    out.emplace_back(t, static_cast<std::size_t>(std::count_if(scores.begin(), scores.end(),
                                                               [t](const LinkScore& s) { return s.nmi > t; })));
  }
  return out;
}

struct Trail {
  std::vector<std::string> nodes;
  double score = 1.0;

  friend bool operator==(const Trail&, const Trail&) = default;
};

/// Orders trails by score (descending), then lexicographically by node ids.
inline bool trail_before(const Trail& a, const Trail& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.nodes < b.nodes;
}

/// Every INPUT -> OUTPUT path; a trail's score is its weakest edge NMI.
/// `top_k == 0` keeps all trails.
inline std::vector<Trail> enumerate_trails(const ConceptGraph& g, std::size_t top_k = 0) {
  std::map<std::string, std::vector<std::pair<std::string, double>>> out_edges;
  for (const auto& e : g.edges) out_edges[e.src].emplace_back(e.dst, e.nmi);
  for (auto& [_, v] : out_edges) std::sort(v.begin(), v.end());

  std::vector<Trail> trails;
  Trail current{{std::string(kInputNode)}, 1.0};
  std::function<void(const std::string&, double)> walk = [&](const std::string& node, double score) {
    if (node == kOutputNode) {
      trails.push_back({current.nodes, score});
      return;
    }
    auto it = out_edges.find(node);
    if (it == out_edges.end()) return;
    for (const auto& [next, w] : it->second) {
      if (current.nodes.size() > g.nodes.size() + 1) fail(ErrorCode::CyclicGraph, "concept graph has a cycle");
      current.nodes.push_back(next);
      walk(next, std::min(score, w));
      current.nodes.pop_back();
    }
  };
  walk(std::string(kInputNode), 1.0);
  std::sort(trails.begin(), trails.end(), trail_before);
  if (top_k && trails.size() > top_k) trails.resize(top_k);
  return trails;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ConceptGraph& g) {
  nlohmann::json nodes = nlohmann::json::array(), edges = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    nodes.push_back({{"id", n.id},
                     {"layer", n.layer.empty() ? nlohmann::json(nullptr) : nlohmann::json(n.layer)},
                     {"cluster", n.cluster ? nlohmann::json(*n.cluster) : nlohmann::json(nullptr)},
                     {"members", n.members}});
  }
  for (const auto& e : g.edges) edges.push_back({{"src", e.src}, {"dst", e.dst}, {"nmi", e.nmi}});
  return {{"nodes", nodes}, {"edges", edges}, {"T", g.threshold}, {"layers", g.layers}};
}

inline ConceptGraph graph_from_json(const nlohmann::json& j) {
  ConceptGraph g;
  try {
    for (const auto& n : j.at("nodes")) {
      GraphNode node;
      node.id = n.at("id").get<std::string>();
      if (!n.at("layer").is_null()) node.layer = n.at("layer").get<std::string>();
      if (!n.at("cluster").is_null()) node.cluster = n.at("cluster").get<std::size_t>();
      node.members = n.value("members", std::vector<std::size_t>{});
      g.nodes.push_back(std::move(node));
    }
    for (const auto& e : j.at("edges")) {
      g.edges.push_back({e.at("src").get<std::string>(), e.at("dst").get<std::string>(), e.at("nmi").get<double>()});
    }
    g.threshold = j.at("T").get<double>();
    g.layers = j.at("layers").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, std::string("graph JSON: ") + e.what());
  }
  return g;
}

inline std::string format_score(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << v;
  return os.str();
}

/// Graphviz rendering, one rank per analyzed layer, edges labelled by NMI.
inline std::string to_dot(const ConceptGraph& g) {
  std::ostringstream os;
  os << "digraph concepts {\n  rankdir=LR;\n  node [shape=box];\n";
  os << "  \"" << kInputNode << "\" [shape=ellipse];\n  \"" << kOutputNode << "\" [shape=ellipse];\n";
  for (const auto& layer : g.layers) {
    os << "  { rank=same;";
    for (const auto& n : g.nodes) {
      if (n.layer == layer) os << " \"" << n.id << "\";";
    }
    os << " }\n";
  }
  for (const auto& e : g.edges) {
    os << "  \"" << e.src << "\" -> \"" << e.dst << "\"";
    if (e.src != kInputNode && e.dst != kOutputNode) os << " [label=\"" << format_score(e.nmi) << "\"]";
    os << ";\n";
  }
  os << "}\n";
  return os.str();
}

}  // namespace cg
