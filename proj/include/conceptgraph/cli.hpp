#pragma once

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "conceptgraph/error.hpp"
#include "conceptgraph/pipeline.hpp"

namespace cg {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitInternal = 4 };

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigInvalid:
    case ErrorCode::NoAnalyzedLayers:
    case ErrorCode::NotAConvLayer:
    case ErrorCode::NoUniquePredecessor:
    case ErrorCode::LayerOrderViolation:
      return kExitConfig;
    case ErrorCode::ShapeMismatch:
    case ErrorCode::NonFiniteValue:
    case ErrorCode::UnknownLayer:
    case ErrorCode::CyclicGraph:
    case ErrorCode::ParseError:
    case ErrorCode::DanglingTensorRef:
    case ErrorCode::ShapeContractViolation:
    case ErrorCode::ChecksumMismatch:
    case ErrorCode::EmptyProbeDir:
    case ErrorCode::DecodeError:
    case ErrorCode::EmptyProbe:
    case ErrorCode::MissingUpstreamArtifact:
    case ErrorCode::IoError:
    case ErrorCode::UnsupportedKind:
      return kExitData;
    default:
      return kExitInternal;
  }
}

/// Runs one command line (without the program name) and returns the exit
/// status. Diagnostics go to `err`.
inline int run_cli(const std::vector<std::string>& args, std::ostream& err = std::cerr) {
  CLI::App app{"Abstract a convolutional network into a concept graph", "conceptgraph"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path, model, blob, probe, out, layers;
  std::optional<std::uint64_t> seed;
  std::optional<double> nmi_threshold;
  std::optional<std::size_t> top_k;
  std::vector<double> thresholds;
  app.add_option("--config", config_path, "Run configuration (JSON)")->required();
  app.add_option("--model", model, "Model manifest (overrides config)");
  app.add_option("--blob", blob, "Weight blob (overrides config)");
  app.add_option("--probe", probe, "Probe image directory (overrides config)");
  app.add_option("--out", out, "Output directory (overrides config)");
  app.add_option("--seed", seed, "Root random seed");
  app.add_option("--layers", layers, "Comma-separated analyzed layers");
  app.add_option("--nmi-threshold", nmi_threshold, "Edge threshold T on NMI");
  app.add_option("--top-k", top_k, "Number of trails to keep");

  struct Command {
    const char* name;
    const char* help;
    void (Pipeline::*run)();
  };
  const Command commands[] = {
      {"cluster", "Cluster filters of the analyzed layers into concepts", &Pipeline::cluster},
      {"cam", "Render concept attention maps for every probe item", &Pipeline::cam},
      {"significance", "Consistency and robustness tests per concept", &Pipeline::significance},
      {"graph", "Estimate interventional links and build the concept graph", &Pipeline::graph},
      {"trails", "Enumerate ranked INPUT to OUTPUT trails", &Pipeline::trails},
      {"report", "Bundle all stage artifacts into report.md", &Pipeline::report},
      {"sweep-threshold", "Edge counts over a range of NMI thresholds", &Pipeline::sweep},
  };
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    if (std::string_view(c.name) == "sweep-threshold") {
      sub->add_option("--thresholds", thresholds, "Thresholds to evaluate")->delimiter(',');
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    err << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    RunConfig config = load_config(config_path);
    if (!model.empty()) config.model = model;
    if (!blob.empty()) config.blob = blob;
    if (!probe.empty()) config.probe = probe;
    if (!out.empty()) config.out = out;
    if (seed) config.seed = *seed;
    if (nmi_threshold) config.nmi_threshold = *nmi_threshold;
    if (top_k) config.top_k = *top_k;
    if (!thresholds.empty()) config.sweep_thresholds = thresholds;
    if (!layers.empty()) {
      config.analyzed_layers.clear();
      std::stringstream ss(layers);
      for (std::string l; std::getline(ss, l, ',');) {
        if (!l.empty()) config.analyzed_layers.push_back(l);
      }
    }
    Pipeline pipeline(std::move(config));
    const std::string name = app.get_subcommands().front()->get_name();
    for (const auto& c : commands) {
      if (name == c.name) (pipeline.*c.run)();
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitOk;
}

}  // namespace cg
