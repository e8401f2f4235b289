#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "conceptgraph/error.hpp"
#include "conceptgraph/layer.hpp"
#include "conceptgraph/tensor.hpp"

namespace cg {

/// Non-owning view of the parameters a layer evaluates with. Either pointer may
/// be null; conv2d and dense require `weight`.
struct LayerWeights {
  const Tensor* weight = nullptr;
  const Tensor* bias = nullptr;
};

namespace detail {

inline void require_rank3(const Tensor& t, const std::string& who) {
  if (t.rank() != 3) {
    fail(ErrorCode::ShapeMismatch, who + " expects an (H, W, C) input, got " + shape_string(t.shape()));
  }
}

inline std::size_t conv_out_extent(std::size_t in, std::size_t f, std::size_t stride, std::size_t pad,
                                   const std::string& who) {
  if (in + 2 * pad < f) {
    fail(ErrorCode::ShapeMismatch, who + ": kernel " + std::to_string(f) + " larger than padded input " +
                                       std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - f) / stride + 1;
}

inline void check_conv_weights(const LayerSpec& spec, const Tensor& input, const LayerWeights& w) {
  if (!w.weight) fail(ErrorCode::ShapeMismatch, "conv2d '" + spec.name + "' evaluated without weights");
  const auto& ws = w.weight->shape();
  const auto f = spec.params.kernel;
  if (ws.size() != 4 || ws[0] != f || ws[1] != f || ws[2] != input.dim(2)) {
    fail(ErrorCode::ShapeMismatch, "conv2d '" + spec.name + "' weight " + shape_string(ws) +
                                       " incompatible with kernel " + std::to_string(f) + " and input " +
                                       shape_string(input.shape()));
  }
  if (w.bias && (w.bias->rank() != 1 || w.bias->dim(0) != ws[3])) {
    fail(ErrorCode::ShapeMismatch, "conv2d '" + spec.name + "' bias " + shape_string(w.bias->shape()) +
                                       " does not match outc " + std::to_string(ws[3]));
  }
}

/// Cross-correlation with zero padding; returns pre-activation values.
inline Tensor conv2d_pre(const LayerSpec& spec, const Tensor& input, const LayerWeights& w) {
  require_rank3(input, "conv2d '" + spec.name + "'");
  check_conv_weights(spec, input, w);
  const auto& p = spec.params;
  const std::size_t h = input.dim(0), wd = input.dim(1), inc = input.dim(2);
  const std::size_t f = p.kernel, outc = w.weight->dim(3);
  const std::size_t ho = conv_out_extent(h, f, p.stride, p.padding, spec.name);
  const std::size_t wo = conv_out_extent(wd, f, p.stride, p.padding, spec.name);
  const float* in = input.data().data();
  const float* wt = w.weight->data().data();

  std::vector<float> out(ho * wo * outc, 0.0f);
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      float* acc = &out[(oy * wo + ox) * outc];
      if (w.bias) {
        for (std::size_t k = 0; k < outc; ++k) acc[k] = (*w.bias)[k];
      }
      for (std::size_t ky = 0; ky < f; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - static_cast<std::ptrdiff_t>(p.padding);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < f; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - static_cast<std::ptrdiff_t>(p.padding);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
          const float* px = in + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * inc;
          const float* wk = wt + (ky * f + kx) * inc * outc;
          for (std::size_t c = 0; c < inc; ++c) {
            const float v = px[c];
            if (v == 0.0f) continue;
            const float* wc = wk + c * outc;
            for (std::size_t k = 0; k < outc; ++k) acc[k] += v * wc[k];
          }
        }
      }
    }
  }
  return Tensor({ho, wo, outc}, std::move(out));
}

inline void apply_activation(Tensor& t, Activation a) {
  if (a == Activation::Relu) {
    for (auto& v : t.values()) v = v > 0.0f ? v : 0.0f;
  }
}

inline Tensor dense(const LayerSpec& spec, const Tensor& input, const LayerWeights& w) {
  if (!w.weight) fail(ErrorCode::ShapeMismatch, "dense '" + spec.name + "' evaluated without weights");
  const auto& ws = w.weight->shape();
  if (ws.size() != 2 || ws[0] != input.size()) {
    fail(ErrorCode::ShapeMismatch, "dense '" + spec.name + "' weight " + shape_string(ws) +
                                       " incompatible with " + std::to_string(input.size()) + " inputs");
  }
  const std::size_t in = ws[0], out = ws[1];
  if (w.bias && (w.bias->rank() != 1 || w.bias->dim(0) != out)) {
    fail(ErrorCode::ShapeMismatch, "dense '" + spec.name + "' bias shape mismatch");
  }
  std::vector<float> res(out, 0.0f);
  if (w.bias) std::copy(w.bias->data().begin(), w.bias->data().end(), res.begin());
  for (std::size_t i = 0; i < in; ++i) {
    const float v = input[i];
    for (std::size_t k = 0; k < out; ++k) res[k] += v * (*w.weight)[i * out + k];
  }
  Tensor t({1, 1, out}, std::move(res));
  apply_activation(t, spec.params.activation);
  return t;
}

inline Tensor pool(const LayerSpec& spec, const Tensor& input, bool take_max) {
  require_rank3(input, std::string(to_string(spec.kind)) + " '" + spec.name + "'");
  const auto& p = spec.params;
  const std::size_t h = input.dim(0), wd = input.dim(1), c = input.dim(2);
  if (h < p.size || wd < p.size) {
    fail(ErrorCode::ShapeMismatch, "pool '" + spec.name + "' window larger than input " +
                                       shape_string(input.shape()));
  }
  const std::size_t ho = (h - p.size) / p.stride + 1, wo = (wd - p.size) / p.stride + 1;
  Tensor out({ho, wo, c});
  const float norm = 1.0f / static_cast<float>(p.size * p.size);
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        float acc = take_max ? -std::numeric_limits<float>::infinity() : 0.0f;
        for (std::size_t ky = 0; ky < p.size; ++ky) {
          for (std::size_t kx = 0; kx < p.size; ++kx) {
            const float v = input.at(oy * p.stride + ky, ox * p.stride + kx, ch);
            acc = take_max ? std::max(acc, v) : acc + v;
          }
        }
        out.at(oy, ox, ch) = take_max ? acc : acc * norm;
      }
    }
  }
  return out;
}

inline Tensor global_avg_pool(const LayerSpec& spec, const Tensor& input) {
  require_rank3(input, "global_avg_pool '" + spec.name + "'");
  const std::size_t hw = input.dim(0) * input.dim(1), c = input.dim(2);
  std::vector<double> acc(c, 0.0);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) acc[ch] += input[i * c + ch];
  }
  std::vector<float> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) out[ch] = static_cast<float>(acc[ch] / static_cast<double>(hw));
  return Tensor({1, 1, c}, std::move(out));
}

inline Tensor upsample_nearest(const LayerSpec& spec, const Tensor& input) {
  require_rank3(input, "upsample_nearest '" + spec.name + "'");
  const std::size_t f = spec.params.factor;
  const std::size_t h = input.dim(0), wd = input.dim(1), c = input.dim(2);
  Tensor out({h * f, wd * f, c});
  for (std::size_t y = 0; y < h * f; ++y) {
    for (std::size_t x = 0; x < wd * f; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) out.at(y, x, ch) = input.at(y / f, x / f, ch);
    }
  }
  return out;
}

inline Tensor concat(const LayerSpec& spec, std::span<const Tensor* const> inputs) {
  const Tensor& first = *inputs[0];
  require_rank3(first, "concat '" + spec.name + "'");
  std::size_t total = 0;
  for (const Tensor* t : inputs) {
    require_rank3(*t, "concat '" + spec.name + "'");
    if (t->dim(0) != first.dim(0) || t->dim(1) != first.dim(1)) {
      fail(ErrorCode::ShapeMismatch, "concat '" + spec.name + "' spatial mismatch " +
                                         shape_string(first.shape()) + " vs " + shape_string(t->shape()));
    }
    total += t->dim(2);
  }
  const std::size_t hw = first.dim(0) * first.dim(1);
  std::vector<float> out;
  out.reserve(hw * total);
  for (std::size_t i = 0; i < hw; ++i) {
    for (const Tensor* t : inputs) {
      const std::size_t c = t->dim(2);
      out.insert(out.end(), t->data().begin() + static_cast<std::ptrdiff_t>(i * c),
                 t->data().begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
    }
  }
  return Tensor({first.dim(0), first.dim(1), total}, std::move(out));
}

inline Tensor add(const LayerSpec& spec, std::span<const Tensor* const> inputs) {
  Tensor out = *inputs[0];
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    if (inputs[i]->shape() != out.shape()) {
      fail(ErrorCode::ShapeMismatch, "add '" + spec.name + "' operands " + shape_string(out.shape()) +
                                         " and " + shape_string(inputs[i]->shape()));
    }
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += (*inputs[i])[j];
  }
  return out;
}

inline Tensor softmax_channels(const Tensor& input) {
  Tensor out = input;
  const std::size_t c = input.rank() == 3 ? input.dim(2) : input.size();
  for (std::size_t base = 0; base < out.size(); base += c) {
    float m = -std::numeric_limits<float>::infinity();
    for (std::size_t k = 0; k < c; ++k) m = std::max(m, out[base + k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) sum += std::exp(static_cast<double>(out[base + k] - m));
    for (std::size_t k = 0; k < c; ++k) {
      out[base + k] = static_cast<float>(std::exp(static_cast<double>(out[base + k] - m)) / sum);
    }
  }
  return out;
}

}  // namespace detail

/// Evaluates one layer. Deterministic: the accumulation order is fixed, so
/// identical inputs give bit-identical outputs.
inline Tensor forward_layer(const LayerSpec& spec, std::span<const Tensor* const> inputs,
                            const LayerWeights& weights = {}) {
  const bool merge = is_merge(spec.kind);
  if (inputs.empty() || (merge && inputs.size() < 2) || (!merge && inputs.size() != 1)) {
    fail(ErrorCode::ShapeMismatch, "layer '" + spec.name + "' got " + std::to_string(inputs.size()) + " inputs");
  }
  if (!takes_weights(spec.kind) && (weights.weight || weights.bias)) {
    fail(ErrorCode::ShapeMismatch, "layer '" + spec.name + "' does not take weights");
  }
  const Tensor& x = *inputs[0];
  Tensor out;
  switch (spec.kind) {
    case LayerKind::Conv2d:
      out = detail::conv2d_pre(spec, x, weights);
      detail::apply_activation(out, spec.params.activation);
      break;
    case LayerKind::Dense:
      out = detail::dense(spec, x, weights);
      break;
    case LayerKind::Relu:
      out = x;
      detail::apply_activation(out, Activation::Relu);
      break;
    case LayerKind::MaxPool:
      out = detail::pool(spec, x, true);
      break;
    case LayerKind::AvgPool:
      out = detail::pool(spec, x, false);
      break;
    case LayerKind::GlobalAvgPool:
      out = detail::global_avg_pool(spec, x);
      break;
    case LayerKind::UpsampleNearest:
      out = detail::upsample_nearest(spec, x);
      break;
    case LayerKind::Concat:
      out = detail::concat(spec, inputs);
      break;
    case LayerKind::Add:
      out = detail::add(spec, inputs);
      break;
    case LayerKind::Sigmoid:
      out = x;
      for (auto& v : out.values()) v = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
      break;
    case LayerKind::Softmax:
      out = detail::softmax_channels(x);
      break;
    default:
      fail(ErrorCode::UnsupportedKind, "layer kind not supported: " + std::string(to_string(spec.kind)));
  }
  out.check_finite();
  return out;
}

inline Tensor forward_layer(const LayerSpec& spec, const Tensor& input, const LayerWeights& weights = {}) {
  const Tensor* one[] = {&input};
  return forward_layer(spec, std::span<const Tensor* const>(one), weights);
}

/// Copy of a conv2d/dense weight (and bias) with every output channel outside
/// `keep` set to zero. Output channels are the last weight axis.
inline std::pair<Tensor, std::optional<Tensor>> mask_output_channels(const Tensor& weight,
                                                                     const Tensor* bias,
                                                                     const std::set<std::size_t>& keep) {
  const std::size_t outc = weight.shape().back();
  for (auto k : keep) {
    if (k >= outc) {
      fail(ErrorCode::ShapeMismatch, "kept channel " + std::to_string(k) + " out of range [0, " +
                                         std::to_string(outc) + ")");
    }
  }
  std::vector<char> kept(outc, 0);
  for (auto k : keep) kept[k] = 1;
  Tensor w = weight;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!kept[i % outc]) w[i] = 0.0f;
  }
  std::optional<Tensor> b;
  if (bias) {
    b = *bias;
    for (std::size_t k = 0; k < outc; ++k) {
      if (!kept[k]) (*b)[k] = 0.0f;
    }
  }
  return {std::move(w), std::move(b)};
}

/// Vector-Jacobian product of the condensed scalar
///   y = (1/Z) * sum_{i,j} mean_{k in subset} act(conv(x)_k)(i, j),  Z = H_out * W_out
/// with respect to the conv input x. The activation mask is taken from the
/// pre-activation values at x; the result has the shape of x.
inline Tensor layer_input_gradient(const LayerSpec& spec, const Tensor& layer_input, const Tensor& weight,
                                   const Tensor* bias, const std::set<std::size_t>& channel_subset) {
  if (spec.kind != LayerKind::Conv2d) {
    fail(ErrorCode::KindNotDifferentiableHere,
         "layer '" + spec.name + "' is " + std::string(to_string(spec.kind)) + "; only conv2d is supported");
  }
  if (channel_subset.empty()) fail(ErrorCode::ShapeMismatch, "empty channel subset for '" + spec.name + "'");
  const LayerWeights lw{&weight, bias};
  const Tensor pre = detail::conv2d_pre(spec, layer_input, lw);
  const auto& p = spec.params;
  const std::size_t h = layer_input.dim(0), wd = layer_input.dim(1), inc = layer_input.dim(2);
  const std::size_t ho = pre.dim(0), wo = pre.dim(1), outc = pre.dim(2), f = p.kernel;
  for (auto k : channel_subset) {
    if (k >= outc) fail(ErrorCode::ShapeMismatch, "channel " + std::to_string(k) + " out of range");
  }
  const double seed = 1.0 / (static_cast<double>(ho * wo) * static_cast<double>(channel_subset.size()));
  const std::vector<std::size_t> subset(channel_subset.begin(), channel_subset.end());

  std::vector<double> grad(h * wd * inc, 0.0);
  std::vector<double> g(subset.size());
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      bool any = false;
      for (std::size_t s = 0; s < subset.size(); ++s) {
        const float z = pre.at(oy, ox, subset[s]);
        const bool open = p.activation == Activation::None || z > 0.0f;
        g[s] = open ? seed : 0.0;
        any = any || open;
      }
      if (!any) continue;
      for (std::size_t ky = 0; ky < f; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - static_cast<std::ptrdiff_t>(p.padding);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < f; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - static_cast<std::ptrdiff_t>(p.padding);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
          double* dx = &grad[(static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * inc];
          const float* wk = weight.data().data() + (ky * f + kx) * inc * outc;
          for (std::size_t c = 0; c < inc; ++c) {
            double acc = 0.0;
            for (std::size_t s = 0; s < subset.size(); ++s) acc += g[s] * wk[c * outc + subset[s]];
            dx[c] += acc;
          }
        }
      }
    }
  }
  std::vector<float> out(grad.size());
  std::transform(grad.begin(), grad.end(), out.begin(), [](double v) { return static_cast<float>(v); });
  return Tensor(layer_input.shape(), std::move(out));
}

}  // namespace cg
