#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "opn/tensor.hpp"

namespace opn {

struct GradReport {
  std::string layer;
  std::size_t trials = 0;
  double h = 0.0;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  std::string worst_location;  // e.g. "trial 4, dW[37]"
  bool passed = false;
};

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per element.
/// f must be finite throughout the h-neighborhood (NumericError otherwise).
Tensor4 numeric_grad(const std::function<double(const Tensor4&)>& f, const Tensor4& x, double h);

/// Same oracle over a raw parameter vector; params is restored on return.
std::vector<double> numeric_grad_params(const std::function<double()>& f,
                                        std::vector<double>& params, double h);

/// |a - n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

enum class CheckKind {
  kConv,
  kDense,
  kRelu,
  kDropout,
  kSoftmaxXent,
  kAvgPool,
  kMaxPool,
  kLbpn,
  kOpn,
  kOpnSoftmax,
};

std::vector<CheckKind> all_check_kinds();
std::string to_string(CheckKind kind);
CheckKind parse_check_kind(const std::string& name);  // ConfigError on unknown

/// Runs `trials` randomized small instances of one layer kind and compares
/// every analytic gradient block against the central-difference oracle.
/// Rank-dependent layers get inputs resampled until each region's minimum
/// pairwise gap exceeds 100 h, so the permutation cannot flip between the
/// two evaluation points.
GradReport check_layer(CheckKind kind, std::size_t trials, double h, double tolerance,
                       std::uint64_t seed);

std::vector<GradReport> check_all_layers(std::size_t trials, double h, double tolerance,
                                         std::uint64_t seed);

}  // namespace opn
