#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "opn/layers.hpp"
#include "opn/mnist.hpp"
#include "opn/pooling.hpp"
#include "opn/tensor.hpp"

namespace opn {

/// conv -> relu -> pool -> conv -> relu -> pool -> dense -> relu -> dropout
/// -> dense. The two pooling stages must tile the input exactly (28x28 ->
/// 14x14 -> 7x7 with the default 2x2/2 windows).
struct NetworkConfig {
  PoolKind pooling = PoolKind::kMax;
  std::size_t input_channels = 1;
  std::size_t input_h = 28;
  std::size_t input_w = 28;
  std::size_t conv1_channels = 32;
  std::size_t conv1_filter = 5;
  std::size_t conv2_channels = 64;
  std::size_t conv2_filter = 5;
  std::size_t hidden_dim = 1024;
  std::size_t num_classes = 10;
  std::uint64_t seed = 1;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 50;
  double learning_rate = 0.05;
  double dropout_base = 0.98;       // keep probability at batch 0
  double dropout_rate = 0.003;      // exponential decay rate per interval
  std::size_t dropout_interval = 1000;  // batches per decay step
};

/// keep = base * exp(-rate * floor(index / interval)), clamped to >= 0.5.
double dropout_keep_prob(std::size_t global_batch_index, const TrainConfig& cfg);

struct Network {
  NetworkConfig cfg;
  PoolSpec pool{2, 2, 2};
  ConvLayer conv1;
  ConvLayer conv2;
  DenseLayer fc1;
  DenseLayer fc2;
  // Learned pooling parameters; which pair is live depends on cfg.pooling.
  // For opn these are the rank weights, for opn_softmax the rank logits.
  RankWeights rank1, rank2;
  LocationWeights loc1, loc2;

  std::size_t flatten_dim() const;
  std::size_t pooling_param_count_total() const;
};

/// ConfigError if the pooling geometry does not tile the spatial pipeline.
Network build_network(const NetworkConfig& cfg);

/// Eval-mode forward (dropout disabled): logits (B, num_classes, 1, 1).
Tensor4 network_logits(const Network& net, const Tensor4& images);

/// Full forward/backward pass and in-place SGD update p <- p - lr * grad of
/// every parameter, pooling weights included. Returns the batch loss.
/// DivergenceError if the loss is not finite.
double train_step(Network& net, const Tensor4& images, std::span<const int> labels, double lr,
                  double keep_prob, std::uint64_t dropout_seed);

/// Accuracy with dropout disabled; argmax ties resolve to the smallest
/// class index.
double evaluate(const Network& net, const Dataset& data);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double test_acc = 0.0;
  double wall_seconds = 0.0;
};

struct RunMetrics {
  std::vector<EpochRecord> epochs;  // row 0 is the pre-training baseline
  double min_val_error = 1.0;
  double min_test_error = 1.0;
};

/// CSV with header epoch,train_loss,val_acc,test_acc,wall_seconds; numeric
/// fields round-trip through text.
void write_metrics_csv(std::ostream& os, const RunMetrics& m);

struct RunResult {
  RunMetrics metrics;
  Network net;
};

/// Trains for train_cfg.epochs epochs of seeded shuffled mini-batches,
/// evaluating on validation and test data after every epoch (and once before
/// training starts).
RunResult run_experiment(const NetworkConfig& net_cfg, const TrainConfig& train_cfg,
                         const MnistData& data);

}  // namespace opn
