// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "conceptgraph/cli.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace cg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

/// Runs the fixture pipeline with the committed config into `out`; returns
/// the wall time of the significance stage.
double run_fixture_pipeline(const fs::path& out) {
  RunConfig cfg = load_config(testing_util::kFixtureDir / "config.json");
  cfg.out = out;
  Pipeline p(cfg);
  p.cluster();
  p.cam();
  const auto t0 = Clock::now();
  p.significance();
  const double sig_time = seconds_since(t0);
  p.graph();
  p.trails();
  p.sweep();
  p.report();
  return sig_time;
}

std::vector<fs::path> artifacts_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

int main() {
  std::cout << "conceptgraph acceptance suite" << std::endl;

  report("gradient correctness (100 random conv instances, max rel error < 1e-4, < 30 s)", [] {
    std::mt19937_64 rng(20240601);
    const double step = 1e-3;
    const auto t0 = Clock::now();
    double worst = 0.0;
    int accepted = 0, skipped = 0;
    while (accepted < 100) {
      const auto c = oracle::random_conv(rng, 8, 4);
      // A single-element step moves each pre-activation by at most step*max|w|;
      // closer kinks would make the finite difference itself wrong.
      if (c.min_abs_pre() <= step * c.max_abs_weight()) {
        ++skipped;
        continue;
      }
      const auto subset = oracle::random_subset(rng, c.outc);
      const Tensor x = c.x_tensor(), w = c.w_tensor(), b = c.b_tensor();
      const Tensor g = layer_input_gradient(c.spec(), x, w, &b, subset);
      const auto fd = oracle::fd_gradient(c, subset, step);
      double err = 0.0, scale = 0.0;
      for (std::size_t i = 0; i < fd.size(); ++i) {
        err = std::max(err, std::abs(g[i] - fd[i]));
        scale = std::max(scale, std::abs(fd[i]));
      }
      worst = std::max(worst, scale > 0 ? err / scale : err);
      ++accepted;
    }
    const double secs = seconds_since(t0);
    return Outcome{worst < 1e-4 && secs < 30.0, "max rel error " + fmt(worst) + ", " + std::to_string(skipped) +
                                                    " near-kink instances redrawn, " + fmt(secs) + " s"};
  });

  report("clustering oracle equivalence (50 random sets, exact partitions, silhouette within 1e-9)", [] {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> size(2, 10), dim(1, 5);
    std::uniform_real_distribution<double> u(0.0, 1.0), thr(0.05, 1.0);
    int partition_mismatch = 0, silhouette_checked = 0;
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = size(rng), d = dim(rng);
      std::vector<std::vector<double>> pts(n, std::vector<double>(d));
      for (auto& p : pts) {
        for (auto& v : p) v = u(rng);
      }
      std::vector<RepresentativeVector> vecs;
      for (std::size_t i = 0; i < n; ++i) vecs.push_back({"l", i, pts[i]});
      const double t = thr(rng);
      for (auto linkage : {Linkage::Average, Linkage::Complete}) {
        const auto a = cluster_layer(vecs, t, linkage);
        if (oracle::partition_of(a.labels) != oracle::agglomerate(pts, t, linkage)) ++partition_mismatch;
        if (a.silhouette) {
          worst = std::max(worst, std::abs(*a.silhouette - oracle::silhouette(pts, a.labels)));
          ++silhouette_checked;
        }
      }
    }
    return Outcome{partition_mismatch == 0 && worst <= 1e-9,
                   std::to_string(partition_mismatch) + " partition mismatches in 100 clusterings, max silhouette diff " +
                       fmt(worst) + " over " + std::to_string(silhouette_checked) + " scores"};
  });

  report("fixture silhouette (> 0.1 on every analyzed layer, < 1 min)", [] {
    const auto t0 = Clock::now();
    const auto cfg = load_config(testing_util::kFixtureDir / "config.json");
    const auto m = load_model(cfg.model, cfg.blob);
    bool ok = true;
    std::string detail;
    for (const auto& layer : cfg.analyzed_layers) {
      const auto a = cluster_model_layer(m, layer, cfg.threshold_for(layer), cfg.linkage, cfg.pe_scale);
      const double s = a.silhouette.value_or(-2.0);
      ok = ok && s > 0.1;
      detail += layer + " K=" + std::to_string(a.cluster_count()) + " s=" + fmt(s) + "; ";
    }
    const double secs = seconds_since(t0);
    return Outcome{ok && secs < 60.0, detail + fmt(secs) + " s"};
  });

  testing_util::TempDir run_a, run_b;
  double significance_secs = 0.0;
  const auto pipeline_t0 = Clock::now();
  std::string pipeline_error;
  try {
    significance_secs = run_fixture_pipeline(run_a.path());
  } catch (const std::exception& e) {
    pipeline_error = e.what();
  }
  const double pipeline_secs = seconds_since(pipeline_t0);
  auto significance = [&] {
    if (!pipeline_error.empty()) throw std::runtime_error("fixture pipeline failed: " + pipeline_error);
    return nlohmann::json::parse(testing_util::slurp(run_a / "significance.json")).at("concepts");
  };

  report("robustness ordering (cluster_gaussian beats both baselines for >= 80% of concepts, 5 runs, < 5 min)", [&] {
    const auto concepts = significance();
    std::size_t pass = 0, multi = 0, multi_pass = 0;
    for (const auto& c : concepts) {
      const auto& r = c.at("robustness");
      const double g = r.at("cluster_gaussian").at("mean"), l = r.at("layer_gaussian").at("mean"),
                   u = r.at("cluster_uniform").at("mean");
      const bool ok = g > l && g > u;
      pass += ok;
      if (c.at("members").size() > 1) {
        ++multi;
        multi_pass += ok;
      }
    }
    const double frac = static_cast<double>(pass) / static_cast<double>(concepts.size());
    const std::size_t runs = nlohmann::json::parse(testing_util::slurp(run_a / "significance.json")).at("runs");
    return Outcome{frac >= 0.8 && runs == 5 && significance_secs < 300.0,
                   std::to_string(pass) + "/" + std::to_string(concepts.size()) + " concepts (" +
                       std::to_string(multi_pass) + "/" + std::to_string(multi) + " with >1 filter), runs " +
                       std::to_string(runs) + ", " + fmt(significance_secs) + " s"};
  });

  report("consistency (mean pairwise CAM correlation above permuted baseline for >= 80% of concepts)", [&] {
    const auto concepts = significance();
    std::size_t pass = 0;
    for (const auto& c : concepts) pass += c.at("consistency").get<double>() > c.at("permuted_baseline").get<double>();
    const std::size_t probe = concepts.at(0).at("consistency_matrix").size();
    const double frac = static_cast<double>(pass) / static_cast<double>(concepts.size());
    return Outcome{frac >= 0.8 && probe == 16,
                   std::to_string(pass) + "/" + std::to_string(concepts.size()) + " concepts over " +
                       std::to_string(probe) + " probe images"};
  });

  report("link rule (block-diagonal net: T=0.5 gives exactly the aligned edges, T<0 complete bipartite)", [] {
    const auto m = testing_util::block_diagonal_net();
    const auto probe = testing_util::random_probe(m, 8, 99, 0.1f, 1.0f);
    const std::vector<ClusterAssignment> as{testing_util::assignment("p", {0, 1}),
                                            testing_util::assignment("q", {0, 1})};
    auto edges_at = [&](double t) {
      std::set<std::pair<std::string, std::string>> out;
      for (const auto& e : build_graph(m, as, probe, t, 32).concept_edges()) out.emplace(e.src, e.dst);
      return out;
    };
    const auto half = edges_at(0.5);
    const auto neg = edges_at(-0.01);
    const std::set<std::pair<std::string, std::string>> aligned{{"p/c0", "q/c0"}, {"p/c1", "q/c1"}};
    const std::set<std::pair<std::string, std::string>> complete{
        {"p/c0", "q/c0"}, {"p/c0", "q/c1"}, {"p/c1", "q/c0"}, {"p/c1", "q/c1"}};
    return Outcome{half == aligned && neg == complete,
                   "T=0.5: " + std::to_string(half.size()) + " edges, T<0: " + std::to_string(neg.size()) + " edges"};
  });

  report("NMI calibration (nmi(A,A)=1 within 1e-12, independent uniforms < 0.02, symmetric within 1e-12)", [] {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u;
    std::normal_distribution<double> n;
    std::vector<double> a(100000), b(100000);
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    const double self = nmi(a, a, 16), indep = nmi(a, b, 16);
    double asym = std::abs(nmi(a, b, 16) - nmi(b, a, 16));
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> x(5000), y(5000);
      const double k = trial / 20.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = n(rng);
        y[i] = k * x[i] + (1 - k) * n(rng);
      }
      asym = std::max(asym, std::abs(nmi(x, y, 32) - nmi(y, x, 32)));
    }
    return Outcome{std::abs(self - 1.0) <= 1e-12 && indep < 0.02 && asym <= 1e-12,
                   "|nmi(A,A)-1|=" + fmt(std::abs(self - 1.0)) + ", independent " + fmt(indep) + " (oracle " +
                       fmt(oracle::nmi(a, b, 16)) + "), max asymmetry " + fmt(asym)};
  });

  report("trail oracle (100 random DAGs of <= 12 nodes, paths and ranking equal exhaustive DFS)", [] {
    std::mt19937_64 rng(2718);
    int mismatches = 0;
    std::size_t total = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto g = oracle::random_dag(rng, 12);
      const auto expect = oracle::all_trails(g);
      total += expect.size();
      if (enumerate_trails(g) != expect) ++mismatches;
    }
    return Outcome{mismatches == 0,
                   std::to_string(mismatches) + " mismatching DAGs, " + std::to_string(total) + " trails compared"};
  });

  report("monotonicity (clusters vs threshold, edges vs T, normalized CAM vs member rescaling)", [&] {
    const auto cfg = load_config(testing_util::kFixtureDir / "config.json");
    const auto m = load_model(cfg.model, cfg.blob);
    bool clusters_ok = true;
    for (const auto& layer : cfg.analyzed_layers) {
      std::size_t prev = SIZE_MAX;
      for (double t = 0.01; t <= 1.0; t += 0.01) {
        const std::size_t k = cluster_model_layer(m, layer, t, cfg.linkage, cfg.pe_scale).cluster_count();
        clusters_ok = clusters_ok && k <= prev;
        prev = k;
      }
    }

    if (!pipeline_error.empty()) throw std::runtime_error("fixture pipeline failed: " + pipeline_error);
    const auto links = nlohmann::json::parse(testing_util::slurp(run_a / "link_scores.json")).at("links");
    std::vector<LinkScore> scores;
    for (const auto& l : links) scores.push_back({l.at("src"), l.at("dst"), l.at("nmi")});
    std::vector<ClusterAssignment> as;
    const auto clusters = nlohmann::json::parse(testing_util::slurp(run_a / "clusters.json"));
    for (const auto& a : clusters.at("layers")) {
      as.push_back(cluster_assignment_from_json(a));
    }
    bool edges_ok = true;
    std::set<std::pair<std::string, std::string>> prev_edges;
    bool first = true;
    for (double t = -0.05; t <= 1.0; t += 0.01) {
      std::set<std::pair<std::string, std::string>> cur;
      for (const auto& e : threshold_graph(as, scores, t).concept_edges()) cur.emplace(e.src, e.dst);
      if (!first) edges_ok = edges_ok && std::includes(prev_edges.begin(), prev_edges.end(), cur.begin(), cur.end());
      prev_edges = std::move(cur);
      first = false;
    }

    const auto probe = load_probe_set(cfg.probe, m.input_shape, cfg.normalization);
    double worst = 0.0;
    for (const auto& a : as) {
      for (const auto& c : concepts_of(a)) {
        for (float scale : {0.25f, 3.0f}) {
          ModelGraph scaled = m;
          const auto& spec = scaled.layer(c.layer);
          Tensor& w = scaled.tensors.at(*spec.weight_ref);
          Tensor& b = scaled.tensors.at(*spec.bias_ref);
          const std::size_t outc = w.shape().back();
          for (std::size_t i = 0; i < w.size(); ++i) {
            if (c.members.count(i % outc)) w[i] *= scale;
          }
          for (auto k : c.members) b[k] *= scale;
          for (std::size_t i = 0; i < probe.size(); i += 5) {
            const auto base = concept_attention_map(m, probe.items[i].image, c);
            const auto other = concept_attention_map(scaled, probe.items[i].image, c);
            for (std::size_t p = 0; p < base.map.size(); ++p) {
              worst = std::max(worst, static_cast<double>(std::abs(base.map[p] - other.map[p])));
            }
          }
        }
      }
    }
    return Outcome{clusters_ok && edges_ok && worst < 1e-5,
                   std::string("cluster counts ") + (clusters_ok ? "monotone" : "NOT monotone") + ", edge sets " +
                       (edges_ok ? "nested" : "NOT nested") + ", max normalized-CAM change under rescaling " +
                       fmt(worst)};
  });

  report("determinism (identical config and seed give byte-identical artifacts)", [&] {
    if (!pipeline_error.empty()) throw std::runtime_error("fixture pipeline failed: " + pipeline_error);
    run_fixture_pipeline(run_b.path());
    const auto files_a = artifacts_under(run_a.path()), files_b = artifacts_under(run_b.path());
    std::size_t differing = 0;
    for (const auto& f : files_a) {
      if (!fs::exists(run_b / f.string()) ||
          testing_util::slurp(run_a / f.string()) != testing_util::slurp(run_b / f.string())) {
        ++differing;
      }
    }
    return Outcome{files_a == files_b && differing == 0 && !files_a.empty(),
                   std::to_string(files_a.size()) + " artifacts compared, " + std::to_string(differing) +
                       " differ; first run " + fmt(pipeline_secs) + " s"};
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
