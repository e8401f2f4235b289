#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "conceptgraph/error.hpp"

namespace cg {

/// Name every graph uses for the model input image.
inline constexpr std::string_view kInputName = "input";

enum class LayerKind {
  Conv2d,
  Dense,
  Relu,
  MaxPool,
  AvgPool,
  GlobalAvgPool,
  UpsampleNearest,
  Concat,
  Add,
  Sigmoid,
  Softmax,
};

enum class Activation { None, Relu };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "max_pool";
    case LayerKind::AvgPool: return "avg_pool";
    case LayerKind::GlobalAvgPool: return "global_avg_pool";
    case LayerKind::UpsampleNearest: return "upsample_nearest";
    case LayerKind::Concat: return "concat";
    case LayerKind::Add: return "add";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

inline LayerKind parse_layer_kind(std::string_view name) {
  for (auto kind : {LayerKind::Conv2d, LayerKind::Dense, LayerKind::Relu, LayerKind::MaxPool,
                    LayerKind::AvgPool, LayerKind::GlobalAvgPool, LayerKind::UpsampleNearest,
                    LayerKind::Concat, LayerKind::Add, LayerKind::Sigmoid, LayerKind::Softmax}) {
    if (to_string(kind) == name) return kind;
  }
  fail(ErrorCode::UnsupportedKind, "unknown layer kind '" + std::string(name) + "'");
}

inline std::string_view to_string(Activation a) { return a == Activation::Relu ? "relu" : "none"; }

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::Relu;
  if (name == "none") return Activation::None;
  fail(ErrorCode::UnsupportedKind, "unknown activation '" + std::string(name) + "'");
}

inline bool takes_weights(LayerKind kind) {
  return kind == LayerKind::Conv2d || kind == LayerKind::Dense;
}

inline bool is_merge(LayerKind kind) { return kind == LayerKind::Concat || kind == LayerKind::Add; }

/// Kind-specific parameters. Fields that do not apply to a kind keep their
/// defaults and are not serialized.
struct LayerParams {
  std::size_t kernel = 1;  // conv2d: f
  std::size_t stride = 1;  // conv2d, pools
  std::size_t padding = 0; // conv2d: zero padding on every side
  std::size_t size = 2;    // pools: window
  std::size_t factor = 2;  // upsample_nearest
  Activation activation = Activation::None;  // fused activation for conv2d / dense

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Relu;
  LayerParams params;
  std::vector<std::string> inputs;
  std::optional<std::string> weight_ref;
  std::optional<std::string> bias_ref;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// do(·): zero every output filter of `layer` (and its bias element) that is
/// not listed in `keep`.
struct Intervention {
  std::string layer;
  std::set<std::size_t> keep;
};

/// Structural checks that need no weights: arity, weight refs, params.
inline void validate_spec(const LayerSpec& spec) {
  const auto& n = spec.name;
  if (n.empty()) fail(ErrorCode::ParseError, "layer with empty name");
  if (n == kInputName) fail(ErrorCode::ParseError, "layer name 'input' is reserved");
  if (is_merge(spec.kind)) {
    if (spec.inputs.size() < 2) {
      fail(ErrorCode::ShapeContractViolation, "merge layer '" + n + "' needs at least 2 inputs");
    }
  } else if (spec.inputs.size() != 1) {
    fail(ErrorCode::ShapeContractViolation, "layer '" + n + "' needs exactly 1 input");
  }
  if (takes_weights(spec.kind)) {
    if (!spec.weight_ref) fail(ErrorCode::ShapeContractViolation, "layer '" + n + "' has no weight_ref");
  } else if (spec.weight_ref || spec.bias_ref) {
    fail(ErrorCode::ShapeContractViolation, "layer '" + n + "' does not take weights");
  }
  const auto& p = spec.params;
  if (spec.kind == LayerKind::Conv2d && (p.kernel == 0 || p.stride == 0)) {
    fail(ErrorCode::ShapeContractViolation, "conv2d '" + n + "' needs kernel and stride >= 1");
  }
  if ((spec.kind == LayerKind::MaxPool || spec.kind == LayerKind::AvgPool) &&
      (p.size == 0 || p.stride == 0)) {
    fail(ErrorCode::ShapeContractViolation, "pool '" + n + "' needs size and stride >= 1");
  }
  if (spec.kind == LayerKind::UpsampleNearest && p.factor == 0) {
    fail(ErrorCode::ShapeContractViolation, "upsample '" + n + "' needs factor >= 1");
  }
}

}  // namespace cg
