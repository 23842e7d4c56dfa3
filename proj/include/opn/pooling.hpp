#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "opn/tensor.hpp"

namespace opn {

/// Pooling window geometry. Downsampling in the networks here is always
/// non-overlapping (filter == stride); avg/max additionally accept any
/// geometry that tiles the input exactly.
struct PoolSpec {
  std::size_t filter_h = 2;
  std::size_t filter_w = 2;
  std::size_t stride = 2;

  std::size_t region_size() const { return filter_h * filter_w; }
  bool non_overlapping() const { return filter_h == stride && filter_w == stride; }

  /// Output spatial size, assuming the spec tiles (h, w) exactly.
  std::pair<std::size_t, std::size_t> output_hw(std::size_t h, std::size_t w) const;

  /// Throws ShapeError unless windows stepped by `stride` cover (h, w)
  /// exactly, with no partial window at either border.
  void require_tiles(const Dims4& in) const;

  /// Throws ShapeError unless filter == stride. Learned pooling weights
  /// accumulate per region position, which requires disjoint regions.
  void require_non_overlapping() const;
};

enum class PoolKind { kMax, kAvg, kLbpn, kOpn, kOpnSoftmax };

/// Accepts "max", "avg", "lbpn", "opn", "opn_softmax"; throws ConfigError.
PoolKind parse_pool_kind(const std::string& name);
std::string to_string(PoolKind kind);
bool pool_kind_has_weights(PoolKind kind);

/// Per-channel weights indexed by sort rank; rank 0 weighs the largest
/// activation of a region. The learned parameters of ordinal pooling.
struct RankWeights {
  std::size_t channels = 0;
  std::size_t k = 0;
  std::vector<double> w;  // channels x k, row-major

  RankWeights() = default;
  RankWeights(std::size_t channels_, std::size_t k_, double fill = 0.0)
      : channels(channels_), k(k_), w(channels_ * k_, fill) {}

  double& at(std::size_t c, std::size_t r) { return w[c * k + r]; }
  double at(std::size_t c, std::size_t r) const { return w[c * k + r]; }
  std::span<const double> row(std::size_t c) const { return {w.data() + c * k, k}; }
};

/// Per-channel weights indexed by row-major position within the pooling
/// window. The learned parameters of location-based pooling.
struct LocationWeights {
  std::size_t channels = 0;
  std::size_t k = 0;
  std::vector<double> w;  // channels x k, row-major

  LocationWeights() = default;
  LocationWeights(std::size_t channels_, std::size_t k_, double fill = 0.0)
      : channels(channels_), k(k_), w(channels_ * k_, fill) {}

  double& at(std::size_t c, std::size_t p) { return w[c * k + p]; }
  double at(std::size_t c, std::size_t p) const { return w[c * k + p]; }
  std::span<const double> row(std::size_t c) const { return {w.data() + c * k, k}; }
};

/// Region-local argmax positions recorded by max_pool_forward, one per
/// output element; ties resolve to the smallest row-major position.
struct ArgmaxCache {
  Dims4 out_dims;
  PoolSpec spec;
  std::vector<std::uint32_t> argmax;
};

/// Rank-to-position maps recorded by opn_forward: for each output element,
/// the k region positions listed from largest to smallest activation.
struct RankPermutation {
  Dims4 out_dims;
  PoolSpec spec;
  std::size_t k = 0;
  std::vector<std::uint32_t> perm;  // out_dims.count() * k

  std::span<const std::uint32_t> at(std::size_t flat_out_index) const {
    return {perm.data() + flat_out_index * k, k};
  }
};

// ---- Plain pooling operations ----------------------------------------------

Tensor4 avg_pool_forward(const Tensor4& x, const PoolSpec& spec);

/// Routes dy_region / |R_p| to every input position of the region.
Tensor4 avg_pool_backward(const Tensor4& dy, const PoolSpec& spec, const Dims4& x_dims);

std::pair<Tensor4, ArgmaxCache> max_pool_forward(const Tensor4& x, const PoolSpec& spec);

/// Routes each dy_region entirely to the cached argmax position.
Tensor4 max_pool_backward(const Tensor4& dy, const ArgmaxCache& cache, const Dims4& x_dims);

// ---- Location-based pooling (per-channel weights by window position) -------

Tensor4 lbpn_forward(const Tensor4& x, const PoolSpec& spec, const LocationWeights& w);

struct LbpnGrads {
  Tensor4 dx;
  LocationWeights dw;  // same shape as the weights, gradient values
};
LbpnGrads lbpn_backward(const Tensor4& dy, const Tensor4& x, const PoolSpec& spec,
                        const LocationWeights& w);

// ---- Ordinal pooling (per-channel weights by activation rank) --------------

/// Positions of `region` listed from largest to smallest value; stable, so
/// equal values keep ascending row-major order. Throws NumericError on NaN.
std::vector<std::uint32_t> rank_region(std::span<const double> region);

struct OpnForwardResult {
  Tensor4 y;
  RankPermutation perms;
};
OpnForwardResult opn_forward(const Tensor4& x, const PoolSpec& spec, const RankWeights& w);

struct OpnGrads {
  Tensor4 dx;
  RankWeights dw;
};
/// The permutation is held fixed (piecewise-linear subgradient): no gradient
/// flows through the ordering itself.
OpnGrads opn_backward(const Tensor4& dy, const Tensor4& x, const RankPermutation& perms,
                      const RankWeights& w);

/// Variant with weights reparameterized as softmax(theta) per channel, so the
/// effective weights stay positive and sum to 1.
struct OpnSoftmaxForwardResult {
  Tensor4 y;
  RankPermutation perms;
  RankWeights w_effective;
};
OpnSoftmaxForwardResult opn_softmax_forward(const Tensor4& x, const PoolSpec& spec,
                                            const RankWeights& theta);

struct OpnSoftmaxGrads {
  Tensor4 dx;
  RankWeights dtheta;
};
OpnSoftmaxGrads opn_softmax_backward(const Tensor4& dy, const Tensor4& x,
                                     const RankPermutation& perms, const RankWeights& theta,
                                     const RankWeights& w_effective);

/// Per-channel softmax of the logit rows, with max subtraction.
RankWeights softmax_rows(const RankWeights& theta);

// ---- Initialization and bookkeeping -----------------------------------------

/// Every channel row gets the decreasing positive sequence
/// 2(k - r) / (k (k + 1)), which sums to 1; for k = 4 this is
/// [0.4, 0.3, 0.2, 0.1]. Rows are identical across channels.
RankWeights init_rank_weights(std::size_t channels, std::size_t k);

/// Uniform 1/k rows, so an untrained layer reproduces avg-pooling.
LocationWeights init_location_weights(std::size_t channels, std::size_t k);

/// Logits whose softmax equals init_rank_weights.
RankWeights init_rank_logits(std::size_t channels, std::size_t k);

/// Learnable parameter count: 0 for max/avg, |R_p| x channels otherwise.
std::size_t pooling_param_count(PoolKind kind, std::size_t channels, const PoolSpec& spec);

/// Parameters of the convolution that could replace a pooling layer over N
/// channels with filter footprint |R_c|: |R_c| * N^2 + N (bias included).
std::size_t conv_equivalent_param_count(std::size_t region_size, std::size_t channels);

/// Fraction of channels whose rank weights strictly decrease with rank.
/// A reported diagnostic of trained weights, never an asserted invariant.
double strictly_decreasing_fraction(const RankWeights& w);

/// CSV rows `layer,channel,rank,weight`, one per (channel, rank). Used for
/// both rank- and location-indexed weights; for the latter the rank column
/// carries the region position.
void write_weights_csv(std::ostream& os, std::size_t layer, std::size_t channels, std::size_t k,
                       std::span<const double> w);
void write_weights_csv(std::ostream& os, std::size_t layer, const RankWeights& w);
void write_weights_csv(std::ostream& os, std::size_t layer, const LocationWeights& w);

}  // namespace opn
