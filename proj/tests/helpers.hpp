// Small builders shared by the test suites.
#pragma once

#include <stdlib.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "conceptgraph/conceptgraph.hpp"

namespace testing_util {

namespace fs = std::filesystem;

inline const fs::path kFixtureDir = CG_FIXTURE_DIR;

inline cg::Tensor random_tensor(cg::Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(cg::element_count(shape));
  for (auto& x : v) x = u(rng);
  return cg::Tensor(std::move(shape), std::move(v));
}

/// Sequential conv-net builder; every layer reads the previous one.
class NetBuilder {
 public:
  NetBuilder(std::size_t h, std::size_t w, std::size_t c) { m_.input_shape = {h, w, c}; }

  NetBuilder& conv(const std::string& name, cg::Tensor weight, std::optional<cg::Tensor> bias = std::nullopt,
                   bool relu = true, std::size_t stride = 1, std::size_t padding = 0) {
    cg::LayerSpec s;
    s.name = name;
    s.kind = cg::LayerKind::Conv2d;
    s.params.kernel = weight.dim(0);
    s.params.stride = stride;
    s.params.padding = padding;
    s.params.activation = relu ? cg::Activation::Relu : cg::Activation::None;
    s.inputs = {last_};
    s.weight_ref = name + ".w";
    m_.tensors.emplace(name + ".w", std::move(weight));
    if (bias) {
      s.bias_ref = name + ".b";
      m_.tensors.emplace(name + ".b", std::move(*bias));
    }
    return layer(std::move(s));
  }

  NetBuilder& layer(cg::LayerSpec s) {
    if (s.inputs.empty()) s.inputs = {last_};
    last_ = s.name;
    m_.layers.push_back(std::move(s));
    return *this;
  }

  cg::ModelGraph build() {
    m_.output_head = last_;
    cg::validate_model(m_);
    return m_;
  }

 private:
  cg::ModelGraph m_;
  std::string last_{cg::kInputName};
};

/// 1x1 conv weight (1, 1, inc, outc) from a row-major [inc][outc] matrix.
inline cg::Tensor pointwise(std::size_t inc, std::size_t outc, std::vector<float> values) {
  return cg::Tensor({1, 1, inc, outc}, std::move(values));
}

/// Two 1x1 ReLU conv layers p and q whose channel 0 only feeds channel 0 and
/// channel 1 only feeds channel 1.
inline cg::ModelGraph block_diagonal_net() {
  return NetBuilder(6, 6, 2)
      .conv("p", pointwise(2, 2, {1, 0, 0, 1}), cg::Tensor({2}, {0, 0}))
      .conv("q", pointwise(2, 2, {1, 0, 0, 1}), cg::Tensor({2}, {0, 0}))
      .build();
}

inline cg::ProbeSet random_probe(const cg::ModelGraph& m, std::size_t n, std::uint64_t seed, float lo = 0.0f,
                                 float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  cg::ProbeSet p;
  for (std::size_t i = 0; i < n; ++i) {
    p.items.push_back({"item" + std::to_string(i), random_tensor(m.input_tensor_shape(), rng, lo, hi)});
  }
  return p;
}

inline cg::ClusterAssignment assignment(const std::string& layer, std::vector<std::size_t> labels) {
  cg::ClusterAssignment a;
  a.layer = layer;
  a.labels = std::move(labels);
  a.threshold_used = 1.0;
  return a;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string pattern = (fs::temp_directory_path() / "conceptgraph_test_XXXXXX").string();
    if (!mkdtemp(pattern.data())) throw std::runtime_error("mkdtemp failed");
    path_ = pattern;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline cg::ModelGraph load_fixture_model() {
  return cg::load_model(kFixtureDir / "model.json", kFixtureDir / "model.cgw");
}

inline std::string slurp(const fs::path& p) {
  const auto b = cg::read_file(p);
  return {b.begin(), b.end()};
}

}  // namespace testing_util
