#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "conceptgraph/error.hpp"

namespace cg {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense float32 tensor, row-major with channels last. Activations use rank 3
/// (H, W, C); conv weights use rank 4 (f, f, inc, outc).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(element_count(shape_), 0.0f);
  }

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (element_count(shape_) != data_.size()) {
      fail(ErrorCode::ShapeMismatch, "shape " + shape_string(shape_) + " does not hold " +
                                         std::to_string(data_.size()) + " values");
    }
    check_finite();
  }

  static Tensor filled(Shape shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    if (!std::isfinite(value)) fail(ErrorCode::NonFiniteValue, "fill value is not finite");
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const float> values() const noexcept { return data_; }
  std::span<float> values() noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  // Rank-3 (H, W, C) accessors.
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }
  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  /// Rejects NaN/Inf. Kernels call this on every result they hand back.
  void check_finite() const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i])) {
        fail(ErrorCode::NonFiniteValue, "non-finite value at flat index " + std::to_string(i));
      }
    }
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    if (shape_.empty() || shape_.size() > 4) {
      fail(ErrorCode::ShapeMismatch, "tensor rank must be 1..4, got " + std::to_string(shape_.size()));
    }
    for (auto d : shape_) {
      if (d == 0) fail(ErrorCode::ShapeMismatch, "zero-sized dimension in " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<float> data_;
};

}  // namespace cg
