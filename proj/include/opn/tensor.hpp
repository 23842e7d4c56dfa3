#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "opn/errors.hpp"

namespace opn {

/// Shape of a 4-D activation tensor: (batch, channels, height, width).
struct Dims4 {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t count() const { return batch * channels * height * width; }
  bool operator==(const Dims4&) const = default;
};

std::string to_string(const Dims4& d);

/// Dense row-major NCHW tensor of doubles; the single carrier for
/// activations and gradients throughout the library.
///
/// Tensors are plain values: copy/move freely, nothing here mutates its
/// inputs except the explicit set() accessor.
class Tensor4 {
 public:
  Tensor4() = default;

  /// All dims must be >= 1; every element is set to `fill`.
  explicit Tensor4(Dims4 dims, double fill = 0.0);

  static Tensor4 filled(Dims4 dims, double value) { return Tensor4(dims, value); }

  const Dims4& dims() const { return dims_; }
  std::size_t size() const { return values_.size(); }

  /// Bounds-checked access; throws IndexError.
  double get(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const;
  void set(std::size_t b, std::size_t c, std::size_t h, std::size_t w, double v);

  // Unchecked access for hot loops.
  double& operator()(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return values_[offset(b, c, h, w)];
  }
  double operator()(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return values_[offset(b, c, h, w)];
  }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool all_finite() const;

 private:
  std::size_t offset(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return ((b * dims_.channels + c) * dims_.height + h) * dims_.width + w;
  }

  Dims4 dims_{};
  std::vector<double> values_;
};

/// Same storage reinterpreted under a new shape; element counts must match.
Tensor4 reshape(Tensor4 t, Dims4 new_dims);

// Elementwise arithmetic; operands must share dims exactly (ShapeError).
Tensor4 add(const Tensor4& a, const Tensor4& b);
Tensor4 sub(const Tensor4& a, const Tensor4& b);
Tensor4 mul(const Tensor4& a, const Tensor4& b);
Tensor4 scale(const Tensor4& a, double s);

}  // namespace opn
