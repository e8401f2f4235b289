// Independent reference implementations used only by the test suites.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "conceptgraph/conceptgraph.hpp"

namespace oracle {

/// Direct-sum cross-correlation in double precision. x: (H, W, C) flat,
/// w: (f, f, inc, outc) flat.
struct ConvCase {
  std::size_t h, w, inc, outc, f, stride, pad;
  std::vector<double> x, weight, bias;
  bool relu = true;

  std::size_t ho() const { return (h + 2 * pad - f) / stride + 1; }
  std::size_t wo() const { return (w + 2 * pad - f) / stride + 1; }

  double pre(const std::vector<double>& in, std::size_t oy, std::size_t ox, std::size_t k) const {
    double acc = bias.empty() ? 0.0 : bias[k];
    for (std::size_t ky = 0; ky < f; ++ky) {
      for (std::size_t kx = 0; kx < f; ++kx) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
        if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
        for (std::size_t c = 0; c < inc; ++c) {
          acc += in[(iy * w + ix) * inc + c] * weight[((ky * f + kx) * inc + c) * outc + k];
        }
      }
    }
    return acc;
  }

  /// y = (1/Z) sum_ij mean_{k in subset} act(pre)
  double condensed(const std::vector<double>& in, const std::set<std::size_t>& subset) const {
    double acc = 0.0;
    for (std::size_t oy = 0; oy < ho(); ++oy) {
      for (std::size_t ox = 0; ox < wo(); ++ox) {
        for (auto k : subset) {
          const double z = pre(in, oy, ox, k);
          acc += relu ? std::max(z, 0.0) : z;
        }
      }
    }
    return acc / (static_cast<double>(ho() * wo()) * static_cast<double>(subset.size()));
  }

  /// Smallest |pre-activation| over the whole output; kinks closer than the
  /// finite-difference step would make the oracle itself wrong.
  double min_abs_pre() const {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t oy = 0; oy < ho(); ++oy)
      for (std::size_t ox = 0; ox < wo(); ++ox)
        for (std::size_t k = 0; k < outc; ++k) m = std::min(m, std::abs(pre(x, oy, ox, k)));
    return m;
  }

  double max_abs_weight() const {
    double m = 0.0;
    for (double v : weight) m = std::max(m, std::abs(v));
    return m;
  }

  cg::LayerSpec spec() const {
    cg::LayerSpec s;
    s.name = "conv";
    s.kind = cg::LayerKind::Conv2d;
    s.params.kernel = f;
    s.params.stride = stride;
    s.params.padding = pad;
    s.params.activation = relu ? cg::Activation::Relu : cg::Activation::None;
    s.inputs = {"input"};
    s.weight_ref = "conv.w";
    s.bias_ref = "conv.b";
    return s;
  }

  static cg::Tensor to_tensor(cg::Shape shape, const std::vector<double>& v) {
    std::vector<float> f(v.begin(), v.end());
    return cg::Tensor(std::move(shape), std::move(f));
  }
  cg::Tensor x_tensor() const { return to_tensor({h, w, inc}, x); }
  cg::Tensor w_tensor() const { return to_tensor({f, f, inc, outc}, weight); }
  cg::Tensor b_tensor() const { return to_tensor({outc}, bias); }
};

/// Central finite differences of `condensed` with respect to every input element.
inline std::vector<double> fd_gradient(const ConvCase& c, const std::set<std::size_t>& subset, double step) {
  std::vector<double> g(c.x.size());
  std::vector<double> xp = c.x;
  for (std::size_t i = 0; i < xp.size(); ++i) {
    const double keep = xp[i];
    xp[i] = keep + step;
    const double up = c.condensed(xp, subset);
    xp[i] = keep - step;
    const double down = c.condensed(xp, subset);
    xp[i] = keep;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

/// Random conv instance with values already rounded to float, so the double
/// oracle and the float kernel see identical operands.
inline ConvCase random_conv(std::mt19937_64& rng, std::size_t max_hw = 8, std::size_t max_c = 4) {
  std::uniform_int_distribution<std::size_t> hw(3, max_hw), ch(1, max_c), fk(0, 1), st(1, 2), pd(0, 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  ConvCase c;
  c.h = hw(rng);
  c.w = hw(rng);
  c.inc = ch(rng);
  c.outc = ch(rng);
  c.f = fk(rng) ? 3 : 1;
  c.stride = st(rng);
  c.pad = c.f == 3 ? pd(rng) : 0;
  auto draw = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = static_cast<double>(static_cast<float>(normal(rng)));
    return v;
  };
  c.x = draw(c.h * c.w * c.inc);
  c.weight = draw(c.f * c.f * c.inc * c.outc);
  c.bias = draw(c.outc);
  return c;
}

inline std::set<std::size_t> random_subset(std::mt19937_64& rng, std::size_t n) {
  std::set<std::size_t> s;
  std::bernoulli_distribution coin(0.5);
  for (std::size_t k = 0; k < n; ++k) {
    if (coin(rng)) s.insert(k);
  }
  if (s.empty()) s.insert(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  return s;
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

inline double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Linkage computed from scratch over the member points of two clusters.
inline double linkage(const std::vector<std::vector<double>>& pts, const std::vector<std::size_t>& a,
                      const std::vector<std::size_t>& b, cg::Linkage kind) {
  double acc = kind == cg::Linkage::Complete ? 0.0 : 0.0;
  for (auto i : a) {
    for (auto j : b) {
      const double d = dist(pts[i], pts[j]);
      acc = kind == cg::Linkage::Complete ? std::max(acc, d) : acc + d;
    }
  }
  return kind == cg::Linkage::Complete ? acc : acc / static_cast<double>(a.size() * b.size());
}

/// Brute-force agglomerative clustering: at each step every pair of current
/// clusters is scored from the raw points. Returns the partition as a set of
/// sorted member lists.
inline std::set<std::vector<std::size_t>> agglomerate(const std::vector<std::vector<double>>& pts, double threshold,
                                                      cg::Linkage kind) {
  std::vector<std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < pts.size(); ++i) clusters.push_back({i});
  while (clusters.size() > 1) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t a = 0, b = 0;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        const double d = linkage(pts, clusters[i], clusters[j], kind);
        if (d < best) {
          best = d;
          a = i;
          b = j;
        }
      }
    }
    if (best > threshold) break;
    clusters[a].insert(clusters[a].end(), clusters[b].begin(), clusters[b].end());
    std::sort(clusters[a].begin(), clusters[a].end());
    clusters.erase(clusters.begin() + static_cast<long>(b));
  }
  return {clusters.begin(), clusters.end()};
}

inline std::set<std::vector<std::size_t>> partition_of(const std::vector<std::size_t>& labels) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  std::set<std::vector<std::size_t>> out;
  for (auto& [_, g] : groups) out.insert(g);
  return out;
}

/// Silhouette straight from the definition, cluster by cluster.
inline double silhouette(const std::vector<std::vector<double>>& pts, const std::vector<std::size_t>& labels) {
  const auto parts = partition_of(labels);
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const std::vector<std::size_t>* own = nullptr;
    for (const auto& p : parts) {
      if (std::find(p.begin(), p.end(), i) != p.end()) own = &p;
    }
    if (own->size() == 1) continue;
    double a = 0.0;
    for (auto j : *own) a += j == i ? 0.0 : dist(pts[i], pts[j]);
    a /= static_cast<double>(own->size() - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& p : parts) {
      if (&p == own) continue;
      double m = 0.0;
      for (auto j : p) m += dist(pts[i], pts[j]);
      b = std::min(b, m / static_cast<double>(p.size()));
    }
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(pts.size());
}

// ---------------------------------------------------------------------------
// Mutual information
// ---------------------------------------------------------------------------

/// NMI with I computed directly as sum p_ab log(p_ab / (p_a p_b)) over a
/// sparse joint histogram.
inline double nmi(const std::vector<double>& a, const std::vector<double>& b, std::size_t bins) {
  const auto [alo, ahi] = std::minmax_element(a.begin(), a.end());
  const auto [blo, bhi] = std::minmax_element(b.begin(), b.end());
  const double lo = std::min(*alo, *blo), hi = std::max(*ahi, *bhi);
  auto bin = [&](double v) {
    if (hi == lo) return std::size_t{0};
    return std::min(bins - 1, static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins)));
  };
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  std::map<std::size_t, double> pa, pb;
  const double n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = bin(a[i]), y = bin(b[i]);
    joint[{x, y}] += 1 / n;
    pa[x] += 1 / n;
    pb[y] += 1 / n;
  }
  auto entropy = [](const std::map<std::size_t, double>& p) {
    double h = 0;
    for (const auto& [_, v] : p) h -= v * std::log(v);
    return h;
  };
  const double ha = entropy(pa), hb = entropy(pb);
  if (ha <= 0 || hb <= 0) return 0.0;
  double mi = 0;
  for (const auto& [k, v] : joint) mi += v * std::log(v / (pa[k.first] * pb[k.second]));
  return 2 * mi / (ha + hb);
}

// ---------------------------------------------------------------------------
// Trails
// ---------------------------------------------------------------------------

/// Explicit-stack DFS over all INPUT -> OUTPUT paths, scored by minimum edge
/// weight, ranked by (score desc, node ids asc).
inline std::vector<cg::Trail> all_trails(const cg::ConceptGraph& g) {
  std::vector<cg::Trail> out;
  struct Frame {
    std::vector<std::string> path;
    double score;
  };
  std::vector<Frame> stack{{{"INPUT"}, 1.0}};
  while (!stack.empty()) {
    Frame f = stack.back();
    stack.pop_back();
    if (f.path.back() == "OUTPUT") {
      out.push_back({f.path, f.score});
      continue;
    }
    for (const auto& e : g.edges) {
      if (e.src != f.path.back()) continue;
      Frame next = f;
      next.path.push_back(e.dst);
      next.score = std::min(f.score, e.nmi);
      stack.push_back(std::move(next));
    }
  }
  std::sort(out.begin(), out.end(), [](const cg::Trail& a, const cg::Trail& b) {
    return a.score != b.score ? a.score > b.score : a.nodes < b.nodes;
  });
  return out;
}

/// Random DAG over at most `max_nodes` nodes including INPUT and OUTPUT. Inner
/// nodes are ordered; edges only go forward.
inline cg::ConceptGraph random_dag(std::mt19937_64& rng, std::size_t max_nodes) {
  std::uniform_int_distribution<std::size_t> count(0, max_nodes - 2);
  std::uniform_real_distribution<double> weight(0.0, 1.0);
  std::bernoulli_distribution edge(0.4);
  const std::size_t inner = count(rng);
  std::vector<std::string> order{"INPUT"};
  for (std::size_t i = 0; i < inner; ++i) order.push_back("n" + std::to_string(i));
  order.push_back("OUTPUT");
  cg::ConceptGraph g;
  for (const auto& id : order) g.nodes.push_back({id, "", std::nullopt, {}});
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      // rounded weights produce score ties, exercising the tie-break
      if (edge(rng)) g.edges.push_back({order[i], order[j], std::round(weight(rng) * 4) / 4});
    }
  }
  std::shuffle(g.edges.begin(), g.edges.end(), rng);
  return g;
}

}  // namespace oracle
