#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conceptgraph/attention.hpp"
#include "conceptgraph/clustering.hpp"
#include "conceptgraph/concept_graph.hpp"
#include "conceptgraph/error.hpp"
#include "conceptgraph/model_io.hpp"
#include "conceptgraph/probe.hpp"
#include "conceptgraph/seeding.hpp"
#include "conceptgraph/significance.hpp"

namespace cg {

namespace fs = std::filesystem;

/// Everything a pipeline run needs. Loaded from one JSON file; command-line
/// flags override individual fields.
struct RunConfig {
  fs::path model;
  fs::path blob;
  fs::path probe;
  fs::path out;
  std::vector<std::string> analyzed_layers;
  double distance_threshold = 0.0;
  std::map<std::string, double> layer_thresholds;  // per-layer override
  Linkage linkage = Linkage::Average;
  double pe_scale = 0.5;
  std::size_t nmi_bins = 32;
  std::optional<double> nmi_threshold;
  std::size_t runs = 5;
  std::uint64_t seed = 0;
  std::size_t top_k = 10;
  Normalization normalization;
  double overlay_alpha = 0.5;
  std::vector<double> sweep_thresholds;

  double threshold_for(const std::string& layer) const {
    auto it = layer_thresholds.find(layer);
    return it != layer_thresholds.end() ? it->second : distance_threshold;
  }
};

namespace detail {

template <typename T>
T config_value(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::ConfigInvalid, std::string("config key '") + key + "' has the wrong type");
  }
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace detail

/// Parses a config file. Relative paths inside it are resolved against the
/// directory that contains the file.
inline RunConfig load_config(const fs::path& path) {
  nlohmann::json j;
  try {
    const Bytes raw = read_file(path);
    j = nlohmann::json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
  } catch (const Error& e) {
    fail(ErrorCode::ConfigInvalid, e.what());
  }
  if (!j.is_object()) fail(ErrorCode::ConfigInvalid, path.string() + " is not a JSON object");
  const fs::path base = path.parent_path();
  using detail::config_value;
  RunConfig c;
  c.model = detail::resolve(base, config_value<std::string>(j, "model", ""));
  c.blob = detail::resolve(base, config_value<std::string>(j, "blob", ""));
  c.probe = detail::resolve(base, config_value<std::string>(j, "probe", ""));
  c.out = detail::resolve(base, config_value<std::string>(j, "out", ""));
  c.analyzed_layers = config_value<std::vector<std::string>>(j, "analyzed_layers", {});
  if (j.contains("distance_threshold") && j["distance_threshold"].is_object()) {
    c.layer_thresholds = config_value<std::map<std::string, double>>(j, "distance_threshold", {});
  } else {
    c.distance_threshold = config_value<double>(j, "distance_threshold", 0.0);
  }
  c.layer_thresholds = config_value<std::map<std::string, double>>(j, "layer_thresholds", c.layer_thresholds);
  c.linkage = parse_linkage(config_value<std::string>(j, "linkage", "average"));
  c.pe_scale = config_value<double>(j, "pe_scale", c.pe_scale);
  c.nmi_bins = config_value<std::size_t>(j, "nmi_bins", c.nmi_bins);
  if (j.contains("nmi_threshold")) c.nmi_threshold = config_value<double>(j, "nmi_threshold", 0.0);
  c.runs = config_value<std::size_t>(j, "runs", c.runs);
  c.seed = config_value<std::uint64_t>(j, "seed", c.seed);
  c.top_k = config_value<std::size_t>(j, "top_k", c.top_k);
  c.overlay_alpha = config_value<double>(j, "overlay_alpha", c.overlay_alpha);
  c.sweep_thresholds = config_value<std::vector<double>>(j, "sweep_thresholds", {});
  if (j.contains("normalization")) {
    const auto& n = j["normalization"];
    c.normalization.mean = config_value<std::vector<float>>(n, "mean", c.normalization.mean);
    c.normalization.scale = config_value<std::vector<float>>(n, "scale", c.normalization.scale);
  }
  return c;
}

/// Loaded inputs of a run; the model and probe are read once and shared by
/// every stage.
class Pipeline {
 public:
  explicit Pipeline(RunConfig config) : config_(std::move(config)) { check_config(); }

  const RunConfig& config() const { return config_; }

  const ModelGraph& model() {
    if (!model_) {
      model_ = load_model(config_.model, config_.blob);
      check_layers(*model_);
    }
    return *model_;
  }

  const ProbeSet& probe() {
    if (!probe_) probe_ = load_probe_set(config_.probe, model().input_shape, config_.normalization);
    return *probe_;
  }

  // Stage artifacts ---------------------------------------------------------

  fs::path artifact(const std::string& name) const { return config_.out / name; }

  void cluster() {
    std::vector<ClusterAssignment> all;
    std::ostringstream csv;
    csv << "layer,clusters,silhouette\n";
    for (const auto& layer : config_.analyzed_layers) {
      const double t = config_.threshold_for(layer);
      if (!(t > 0.0)) fail(ErrorCode::ConfigInvalid, "distance_threshold for '" + layer + "' must be > 0");
      auto a = cluster_model_layer(model(), layer, t, config_.linkage, config_.pe_scale);
      csv << layer << ',' << a.cluster_count() << ','
          << (a.silhouette ? nlohmann::json(*a.silhouette).dump() : std::string("undefined")) << '\n';
      all.push_back(std::move(a));
    }
    nlohmann::json j = {{"pe_scale", config_.pe_scale}, {"layers", nlohmann::json::array()}};
    for (const auto& a : all) j["layers"].push_back(to_json(a));
    write_json("clusters.json", j);
    write_text(artifact("silhouette.csv"), csv.str());
  }

  void cam() {
    const auto assignments = read_clusters();
    fs::create_directories(artifact("cams"));
    nlohmann::json index = nlohmann::json::array();
    for (const auto& a : assignments) {
      for (const auto& c : concepts_of(a)) {
        for (const auto& item : probe().items) {
          const auto m = concept_attention_map(model(), item.image, c, item.id);
          const std::string stem = cam_stem(c, item.id);
          write_png(artifact("cams") / (stem + ".png"),
                    overlay(m.map, to_display_image(item.image), config_.overlay_alpha));
          write_text(artifact("cams") / (stem + ".json"), sidecar_json(m).dump(2) + "\n");
          index.push_back({{"concept", c.id()}, {"input_id", item.id}, {"image", "cams/" + stem + ".png"}, {"y", m.y}});
        }
      }
    }
    write_json("cams/index.json", index);
  }

  void significance() {
    const auto assignments = read_clusters();
    std::ostringstream csv;
    csv << "concept,layer,cluster,prior,run,correlation\n";
    nlohmann::json reports = nlohmann::json::array();
    for (const auto& a : assignments) {
      for (const auto& c : concepts_of(a)) {
        const std::uint64_t seed = derive_seed(config_.seed, "significance:" + c.id());
        const auto rep = significance_report(model(), c, probe(), config_.runs, seed);
        for (const auto& [prior, r] : rep.robustness) {
          for (std::size_t run = 0; run < r.per_run.size(); ++run) {
            csv << c.id() << ',' << c.layer << ',' << c.cluster_id << ',' << prior << ',' << run << ','
                << nlohmann::json(r.per_run[run]).dump() << '\n';
          }
        }
        reports.push_back(to_json(rep));
      }
    }
    write_json("significance.json", {{"runs", config_.runs}, {"seed", config_.seed}, {"concepts", reports}});
    write_text(artifact("significance.csv"), csv.str());
  }

  void graph() {
    const auto assignments = read_clusters();
    const double t = require_threshold();
    const auto scores = link_scores(model(), assignments, probe(), config_.nmi_bins);
    nlohmann::json sj = nlohmann::json::array();
    for (const auto& s : scores) sj.push_back({{"src", s.src}, {"dst", s.dst}, {"nmi", s.nmi}});
    write_json("link_scores.json", {{"bins", config_.nmi_bins}, {"links", sj}});
    const auto g = threshold_graph(assignments, scores, t);
    write_json("graph.json", to_json(g));
    write_text(artifact("graph.dot"), to_dot(g));
  }

  void trails() {
    const auto g = graph_from_json(read_json("graph.json", "graph"));
    const auto list = enumerate_trails(g, config_.top_k);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& t : list) {
      nlohmann::json nodes = nlohmann::json::array();
      for (const auto& id : t.nodes) {
        nlohmann::json n = {{"id", id}};
        if (const auto* node = find_node(g, id); node && node->cluster) {
          nlohmann::json images = nlohmann::json::array();
          for (const auto& item : probe_ids()) {
            images.push_back("cams/" + cam_stem(ConceptRef{node->layer, *node->cluster, {}}, item) + ".png");
          }
          n["cam_images"] = images;
        }
        nodes.push_back(n);
      }
      j.push_back({{"score", t.score}, {"nodes", nodes}});
    }
    write_json("trails.json", j);
  }

  void sweep() {
    const auto assignments = read_clusters();
    std::vector<LinkScore> scores;
    const auto cached = fs::exists(artifact("link_scores.json")) ? read_json("link_scores.json", "graph")
                                                                 : nlohmann::json::object();
    if (cached.value("bins", std::size_t{0}) == config_.nmi_bins) {
      for (const auto& s : cached.at("links")) {
        scores.push_back({s.at("src").get<std::string>(), s.at("dst").get<std::string>(), s.at("nmi").get<double>()});
      }
    } else {
      scores = link_scores(model(), assignments, probe(), config_.nmi_bins);
    }
    std::vector<double> ts = config_.sweep_thresholds;
    if (ts.empty()) {
      for (int i = 0; i <= 20; ++i) ts.push_back(i * 0.05);
    }
    std::ostringstream csv;
    csv << "T,edges\n";
    for (const auto& [t, count] : sweep_threshold(scores, ts)) csv << nlohmann::json(t).dump() << ',' << count << '\n';
    write_text(artifact("threshold_sweep.csv"), csv.str());
  }

  void report();

 private:
  void check_config() const {
    auto missing = [](const fs::path& p, const char* what) {
      if (p.empty()) fail(ErrorCode::ConfigInvalid, std::string("config is missing '") + what + "'");
    };
    missing(config_.model, "model");
    missing(config_.blob, "blob");
    missing(config_.probe, "probe");
    missing(config_.out, "out");
    if (config_.analyzed_layers.empty()) fail(ErrorCode::ConfigInvalid, "config lists no analyzed_layers");
    if (config_.nmi_bins < 2) fail(ErrorCode::ConfigInvalid, "nmi_bins must be >= 2");
    if (config_.runs < 1) fail(ErrorCode::ConfigInvalid, "runs must be >= 1");
    std::error_code ec;
    fs::create_directories(config_.out, ec);
    if (ec || !fs::is_directory(config_.out)) {
      fail(ErrorCode::ConfigInvalid, "output directory " + config_.out.string() + " is not writable");
    }
  }

  void check_layers(const ModelGraph& m) const {
    for (const auto& layer : config_.analyzed_layers) {
      const auto idx = m.find(layer);
      if (!idx) fail(ErrorCode::ConfigInvalid, "analyzed layer '" + layer + "' does not exist in the model");
      if (m.layers[*idx].kind != LayerKind::Conv2d) {
        fail(ErrorCode::ConfigInvalid, "analyzed layer '" + layer + "' is not conv2d");
      }
    }
    for (std::size_t i = 1; i < config_.analyzed_layers.size(); ++i) {
      if (*m.find(config_.analyzed_layers[i - 1]) >= *m.find(config_.analyzed_layers[i])) {
        fail(ErrorCode::ConfigInvalid, "analyzed_layers must follow the model's layer order");
      }
    }
  }

  double require_threshold() const {
    if (!config_.nmi_threshold) fail(ErrorCode::ConfigInvalid, "nmi_threshold is required for graph construction");
    return *config_.nmi_threshold;
  }

  nlohmann::json read_json(const std::string& name, const std::string& stage) const {
    const fs::path p = artifact(name);
    if (!fs::exists(p)) {
      fail(ErrorCode::MissingUpstreamArtifact, p.string() + " not found; run the '" + stage + "' stage first");
    }
    const Bytes raw = read_file(p);
    try {
      return nlohmann::json::parse(raw.begin(), raw.end());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ParseError, p.string() + ": " + e.what());
    }
  }

  void write_json(const std::string& name, const nlohmann::json& j) const {
    write_text(artifact(name), j.dump(2) + "\n");
  }

  std::vector<ClusterAssignment> read_clusters() const {
    std::vector<ClusterAssignment> out;
    const auto j = read_json("clusters.json", "cluster");
    try {
      for (const auto& a : j.at("layers")) {
        out.push_back(cluster_assignment_from_json(a));
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ParseError, std::string("clusters.json: ") + e.what());
    }
    return out;
  }

  std::vector<std::string> probe_ids() {
    std::vector<std::string> ids;
    for (const auto& item : probe().items) ids.push_back(item.id);
    return ids;
  }

  static const GraphNode* find_node(const ConceptGraph& g, const std::string& id) {
    for (const auto& n : g.nodes) {
      if (n.id == id) return &n;
    }
    return nullptr;
  }

  static std::string cam_stem(const ConceptRef& c, const std::string& input_id) {
    return c.layer + "_" + std::to_string(c.cluster_id) + "_" + input_id;
  }

  RunConfig config_;
  std::optional<ModelGraph> model_;
  std::optional<ProbeSet> probe_;
};

inline void Pipeline::report() {
  const auto assignments = read_clusters();
  const auto sig = read_json("significance.json", "significance");
  const auto graph_json = read_json("graph.json", "graph");
  const auto trails = read_json("trails.json", "trails");
  if (!fs::exists(artifact("cams/index.json"))) {
    fail(ErrorCode::MissingUpstreamArtifact, "cams/index.json not found; run the 'cam' stage first");
  }
  const auto g = graph_from_json(graph_json);
  std::map<std::string, nlohmann::json> sig_by_concept;
  for (const auto& r : sig.at("concepts")) sig_by_concept[r.at("concept").get<std::string>()] = r;
  const auto ids = probe_ids();

  auto fmt = [](double v) { return format_score(v); };
  std::ostringstream md;
  md << "# Concept graph report\n\n";
  md << "Analyzed layers: ";
  for (std::size_t i = 0; i < config_.analyzed_layers.size(); ++i) {
    md << (i ? ", " : "") << '`' << config_.analyzed_layers[i] << '`';
  }
  md << "  \nProbe items: " << ids.size() << "  \nSeed: " << config_.seed << "\n\n";

  md << "## Concepts\n\n";
  md << "| layer | clusters | silhouette |\n|---|---|---|\n";
  for (const auto& a : assignments) {
    md << "| " << a.layer << " | " << a.cluster_count() << " | "
       << (a.silhouette ? fmt(*a.silhouette) : std::string("undefined")) << " |\n";
  }
  md << "\n| concept | filters | attention (first probe items) |\n|---|---|---|\n";
  for (const auto& a : assignments) {
    for (const auto& c : concepts_of(a)) {
      md << "| " << c.id() << " | ";
      std::size_t k = 0;
      for (auto f : c.members) md << (k++ ? " " : "") << f;
      md << " | ";
      for (std::size_t i = 0; i < std::min<std::size_t>(4, ids.size()); ++i) {
        md << "![](cams/" << cam_stem(c, ids[i]) << ".png) ";
      }
      md << "|\n";
    }
  }

  md << "\n## Significance\n\n";
  md << "Consistency is the mean pairwise correlation of a concept's attention maps across probe items; the "
        "baseline shuffles each map's pixels. Robustness is the mean correlation between original maps and maps "
        "recomputed after resampling the concept's filters ("
     << sig.at("runs").get<std::size_t>() << " runs per prior).\n\n";
  md << "| concept | consistency | shuffled baseline | cluster gaussian | layer gaussian | cluster uniform |\n";
  md << "|---|---|---|---|---|---|\n";
  for (const auto& [id, r] : sig_by_concept) {
    const auto& rob = r.at("robustness");
    md << "| " << id << " | " << fmt(r.at("consistency").get<double>()) << " | "
       << fmt(r.at("permuted_baseline").get<double>()) << " | "
       << fmt(rob.at("cluster_gaussian").at("mean").get<double>()) << " | "
       << fmt(rob.at("layer_gaussian").at("mean").get<double>()) << " | "
       << fmt(rob.at("cluster_uniform").at("mean").get<double>()) << " |\n";
  }

  md << "\n## Concept graph\n\nThreshold T = " << fmt(g.threshold) << ", " << g.concept_edges().size()
     << " concept links.\n\n```dot\n"
     << to_dot(g) << "```\n";

  md << "\n## Inference trails\n\n";
  if (trails.empty()) md << "No INPUT to OUTPUT trail survives the threshold.\n";
  std::size_t rank = 1;
  for (const auto& t : trails) {
    md << rank++ << ". score " << fmt(t.at("score").get<double>()) << ": ";
    std::size_t k = 0;
    for (const auto& n : t.at("nodes")) md << (k++ ? " -> " : "") << n.at("id").get<std::string>();
    md << "\n";
    if (!ids.empty()) {
      md << "\n   ";
      for (const auto& n : t.at("nodes")) {
        if (n.contains("cam_images")) md << "![](" << n.at("cam_images").at(0).get<std::string>() << ") ";
      }
      md << "\n\n";
    }
  }
  write_text(artifact("report.md"), md.str());
}

}  // namespace cg
