#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "conceptgraph/error.hpp"
#include "conceptgraph/kernel.hpp"
#include "conceptgraph/layer.hpp"
#include "conceptgraph/tensor.hpp"

namespace cg {

enum class Task { Segmentation, Classification };

inline std::string_view to_string(Task t) { return t == Task::Segmentation ? "segmentation" : "classification"; }

/// Layer DAG plus its named parameter tensors. `layers` is kept in
/// topological order; `tensors` is owned by value so a modified copy never
/// aliases the original.
struct ModelGraph {
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensor> tensors;
  std::array<std::size_t, 3> input_shape{};  // H, W, C
  std::string output_head;
  Task task = Task::Segmentation;

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t index_of(std::string_view name) const {
    auto i = find(name);
    if (!i) fail(ErrorCode::UnknownLayer, "no layer named '" + std::string(name) + "'");
    return *i;
  }

  const LayerSpec& layer(std::string_view name) const { return layers[index_of(name)]; }

  const Tensor& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorCode::DanglingTensorRef, "tensor '" + name + "' not found");
    return it->second;
  }

  LayerWeights weights_of(const LayerSpec& spec) const {
    LayerWeights w;
    if (spec.weight_ref) w.weight = &tensor(*spec.weight_ref);
    if (spec.bias_ref) w.bias = &tensor(*spec.bias_ref);
    return w;
  }

  Shape input_tensor_shape() const { return {input_shape[0], input_shape[1], input_shape[2]}; }

  friend bool operator==(const ModelGraph&, const ModelGraph&) = default;
};

/// Reorders `layers` topologically (stable with respect to file order).
/// Throws UnknownLayer for unresolved inputs and CyclicGraph for cycles.
inline void sort_topologically(std::vector<LayerSpec>& layers) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!index.emplace(layers[i].name, i).second) {
      fail(ErrorCode::ParseError, "duplicate layer name '" + layers[i].name + "'");
    }
  }
  std::vector<std::size_t> pending(layers.size(), 0);
  std::vector<std::vector<std::size_t>> users(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (const auto& in : layers[i].inputs) {
      if (in == kInputName) continue;
      auto it = index.find(in);
      if (it == index.end()) {
        fail(ErrorCode::UnknownLayer, "layer '" + layers[i].name + "' reads unknown layer '" + in + "'");
      }
      ++pending[i];
      users[it->second].push_back(i);
    }
  }
  std::vector<LayerSpec> ordered;
  std::vector<char> done(layers.size(), 0);
  ordered.reserve(layers.size());
  while (ordered.size() < layers.size()) {
    bool progressed = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (done[i] || pending[i] != 0) continue;
      done[i] = 1;
      progressed = true;
      ordered.push_back(layers[i]);
      for (auto u : users[i]) --pending[u];
      break;
    }
    if (!progressed) fail(ErrorCode::CyclicGraph, "layer graph contains a cycle");
  }
  layers = std::move(ordered);
}

/// Evaluation of a model up to some layer. Activations are keyed by layer
/// name; the input image is stored under "input".
using ActivationCache = std::map<std::string, Tensor, std::less<>>;

namespace detail {

inline std::vector<char> ancestors_of(const ModelGraph& model, std::size_t stop) {
  std::vector<char> needed(model.layers.size(), 0);
  needed[stop] = 1;
  for (std::size_t i = stop + 1; i-- > 0;) {
    if (!needed[i]) continue;
    for (const auto& in : model.layers[i].inputs) {
      if (in == kInputName) continue;
      needed[model.index_of(in)] = 1;
    }
  }
  return needed;
}

}  // namespace detail

/// Forward pass from the input image to `stop_layer`, computing only the
/// layers `stop_layer` depends on. Each intervention masks the output filters
/// (and bias elements) of its layer outside `keep`; the model itself is never
/// modified.
inline ActivationCache forward_to(const ModelGraph& model, const Tensor& input, std::string_view stop_layer,
                                  const std::vector<Intervention>& interventions = {}) {
  const std::size_t stop = model.index_of(stop_layer);
  if (input.shape() != model.input_tensor_shape()) {
    fail(ErrorCode::ShapeMismatch, "input " + shape_string(input.shape()) + " but model expects " +
                                       shape_string(model.input_tensor_shape()));
  }
  std::map<std::size_t, const Intervention*> by_layer;
  for (const auto& iv : interventions) {
    const std::size_t idx = model.index_of(iv.layer);
    if (idx > stop) {
      fail(ErrorCode::LayerOrderViolation, "intervention on '" + iv.layer + "' lies after stop layer '" +
                                               std::string(stop_layer) + "'");
    }
    if (!takes_weights(model.layers[idx].kind)) {
      fail(ErrorCode::UnsupportedKind, "cannot intervene on weightless layer '" + iv.layer + "'");
    }
    if (by_layer.count(idx)) fail(ErrorCode::ConfigInvalid, "two interventions on '" + iv.layer + "'");
    by_layer[idx] = &iv;
  }

  const auto needed = detail::ancestors_of(model, stop);
  ActivationCache cache;
  cache.emplace(std::string(kInputName), input);
  std::vector<const Tensor*> args;
  for (std::size_t i = 0; i <= stop; ++i) {
    if (!needed[i]) continue;
    const LayerSpec& spec = model.layers[i];
    args.clear();
    for (const auto& in : spec.inputs) args.push_back(&cache.find(in)->second);
    LayerWeights w = model.weights_of(spec);
    Tensor out;
    if (auto it = by_layer.find(i); it != by_layer.end()) {
      auto [mw, mb] = mask_output_channels(*w.weight, w.bias, it->second->keep);
      out = forward_layer(spec, args, LayerWeights{&mw, mb ? &*mb : nullptr});
    } else {
      out = forward_layer(spec, args, w);
    }
    cache.insert_or_assign(spec.name, std::move(out));
  }
  return cache;
}

/// Checks every structural and shape invariant of a model: topological
/// order, reference resolution, weight shapes (by evaluating on zeros).
inline void validate_model(const ModelGraph& model) {
  for (auto d : model.input_shape) {
    if (d == 0) fail(ErrorCode::ShapeContractViolation, "input_shape has a zero dimension");
  }
  std::set<std::string> seen{std::string(kInputName)};
  for (const auto& spec : model.layers) {
    validate_spec(spec);
    for (const auto& in : spec.inputs) {
      if (!seen.count(in)) {
        fail(ErrorCode::CyclicGraph, "layer '" + spec.name + "' reads '" + in + "' before it is defined");
      }
    }
    if (!seen.insert(spec.name).second) fail(ErrorCode::ParseError, "duplicate layer name '" + spec.name + "'");
    for (const auto* ref : {&spec.weight_ref, &spec.bias_ref}) {
      if (*ref && !model.tensors.count(**ref)) {
        fail(ErrorCode::DanglingTensorRef, "layer '" + spec.name + "' references missing tensor '" + **ref + "'");
      }
    }
    if (spec.kind == LayerKind::Conv2d) {
      const auto& ws = model.tensor(*spec.weight_ref).shape();
      if (ws.size() != 4 || ws[0] != spec.params.kernel || ws[1] != spec.params.kernel) {
        fail(ErrorCode::ShapeContractViolation, "conv2d '" + spec.name + "' weight must be (f, f, inc, outc) with f=" +
                                                    std::to_string(spec.params.kernel) + ", got " + shape_string(ws));
      }
    }
    if (spec.bias_ref) {
      const auto& bs = model.tensor(*spec.bias_ref).shape();
      const auto outc = model.tensor(*spec.weight_ref).shape().back();
      if (bs.size() != 1 || bs[0] != outc) {
        fail(ErrorCode::ShapeContractViolation, "layer '" + spec.name + "' bias must be (" + std::to_string(outc) +
                                                    "), got " + shape_string(bs));
      }
    }
  }
  if (!model.find(model.output_head)) {
    fail(ErrorCode::UnknownLayer, "output_head '" + model.output_head + "' is not a layer");
  }
  try {
    ActivationCache cache;
    cache.emplace(std::string(kInputName), Tensor(model.input_tensor_shape()));
    std::vector<const Tensor*> args;
    for (const auto& spec : model.layers) {
      args.clear();
      for (const auto& in : spec.inputs) args.push_back(&cache.find(in)->second);
      cache.insert_or_assign(spec.name, forward_layer(spec, args, model.weights_of(spec)));
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ShapeMismatch) fail(ErrorCode::ShapeContractViolation, e.what());
    throw;
  }
}

/// Output channel count of a conv2d/dense layer.
inline std::size_t output_channels(const ModelGraph& model, const LayerSpec& spec) {
  if (!spec.weight_ref) fail(ErrorCode::NotAConvLayer, "layer '" + spec.name + "' has no filters");
  return model.tensor(*spec.weight_ref).shape().back();
}

}  // namespace cg
