#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "opn/rng.hpp"
#include "opn/tensor.hpp"

namespace opn {

/// Stride-1 cross-correlation with zero same-padding: output spatial dims
/// equal the input's.
struct ConvLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t filter_h = 0;
  std::size_t filter_w = 0;
  std::vector<double> weights;  // (out, in, fh, fw) row-major
  std::vector<double> bias;     // out

  std::size_t weight_count() const { return out_channels * in_channels * filter_h * filter_w; }
  double& weight_at(std::size_t o, std::size_t i, std::size_t p, std::size_t q) {
    return weights[((o * in_channels + i) * filter_h + p) * filter_w + q];
  }
};

/// Zero-mean Gaussian weights with stddev sqrt(2 / fan_in), biases 0.1.
ConvLayer make_conv_layer(std::size_t in_channels, std::size_t out_channels,
                          std::size_t filter_h, std::size_t filter_w, Rng& rng);

Tensor4 conv2d_forward(const Tensor4& x, const ConvLayer& layer);

struct ConvGrads {
  Tensor4 dx;
  std::vector<double> dweights;
  std::vector<double> dbias;
};
ConvGrads conv2d_backward(const Tensor4& dy, const Tensor4& x, const ConvLayer& layer);

// ---- ReLU -------------------------------------------------------------------

struct ReluResult {
  Tensor4 y;
  std::vector<std::uint8_t> mask;  // 1 where x > 0; the subgradient at 0 is 0
};
ReluResult relu_forward(const Tensor4& x);
Tensor4 relu_backward(const Tensor4& dy, const std::vector<std::uint8_t>& mask);

// ---- Fully connected --------------------------------------------------------

struct DenseLayer {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<double> weights;  // out x in, row-major
  std::vector<double> bias;     // out

  double& weight_at(std::size_t o, std::size_t i) { return weights[o * in_dim + i]; }
};

DenseLayer make_dense_layer(std::size_t in_dim, std::size_t out_dim, Rng& rng);

/// x: (B, in_dim, 1, 1) -> (B, out_dim, 1, 1); y = W x + b per batch item.
Tensor4 dense_forward(const Tensor4& x, const DenseLayer& layer);

struct DenseGrads {
  Tensor4 dx;
  std::vector<double> dweights;
  std::vector<double> dbias;
};
DenseGrads dense_backward(const Tensor4& dy, const Tensor4& x, const DenseLayer& layer);

// ---- Dropout ----------------------------------------------------------------

struct DropoutResult {
  Tensor4 y;
  std::vector<std::uint8_t> mask;  // Bernoulli(keep_prob) draws, 0 or 1
};

/// Inverted dropout: kept activations are scaled by 1/keep_prob at training
/// time, so keep_prob == 1 is exactly the identity. The mask depends only on
/// the seed and element count, never on x. ConfigError unless 0 < keep <= 1.
DropoutResult dropout_forward(const Tensor4& x, double keep_prob, std::uint64_t seed);
Tensor4 dropout_backward(const Tensor4& dy, const std::vector<std::uint8_t>& mask,
                         double keep_prob);

// ---- Softmax + cross-entropy head -------------------------------------------

struct SoftmaxXentResult {
  double loss = 0.0;  // mean over the batch of -log p[label]
  Tensor4 probs;      // (B, classes, 1, 1)
};

/// logits: (B, classes, 1, 1); one label per batch item. Softmax uses max
/// subtraction. DataError if a label is outside [0, classes).
SoftmaxXentResult softmax_xent_forward(const Tensor4& logits, std::span<const int> labels);

/// dLogits = (probs - onehot) / batch_size.
Tensor4 softmax_xent_backward(const Tensor4& probs, std::span<const int> labels);

}  // namespace opn
