#include "opn/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace opn {

double dropout_keep_prob(std::size_t global_batch_index, const TrainConfig& cfg) {
  if (!(cfg.dropout_base > 0.0 && cfg.dropout_base <= 1.0)) {
    throw ConfigError("dropout_base must be in (0, 1]");
  }
  const double steps =
      static_cast<double>(global_batch_index / std::max<std::size_t>(cfg.dropout_interval, 1));
  const double keep = cfg.dropout_base * std::exp(-cfg.dropout_rate * steps);
  return std::max(keep, 0.5);
}

std::size_t Network::flatten_dim() const {
  auto [h1, w1] = pool.output_hw(cfg.input_h, cfg.input_w);
  auto [h2, w2] = pool.output_hw(h1, w1);
  return cfg.conv2_channels * h2 * w2;
}

std::size_t Network::pooling_param_count_total() const {
  return pooling_param_count(cfg.pooling, cfg.conv1_channels, pool) +
         pooling_param_count(cfg.pooling, cfg.conv2_channels, pool);
}

Network build_network(const NetworkConfig& cfg) {
  Network net;
  net.cfg = cfg;
  const auto stage = [&](std::size_t h, std::size_t w) {
    try {
      net.pool.require_tiles({1, 1, h, w});
    } catch (const ShapeError& e) {
      throw ConfigError(e.what());
    }
    return net.pool.output_hw(h, w);
  };
  auto [h1, w1] = stage(cfg.input_h, cfg.input_w);
  stage(h1, w1);

  Rng rng(cfg.seed);
  net.conv1 = make_conv_layer(cfg.input_channels, cfg.conv1_channels, cfg.conv1_filter,
                              cfg.conv1_filter, rng);
  net.conv2 = make_conv_layer(cfg.conv1_channels, cfg.conv2_channels, cfg.conv2_filter,
                              cfg.conv2_filter, rng);
  net.fc1 = make_dense_layer(net.flatten_dim(), cfg.hidden_dim, rng);
  net.fc2 = make_dense_layer(cfg.hidden_dim, cfg.num_classes, rng);

  const std::size_t k = net.pool.region_size();
  switch (cfg.pooling) {
    case PoolKind::kOpn:
      net.rank1 = init_rank_weights(cfg.conv1_channels, k);
      net.rank2 = init_rank_weights(cfg.conv2_channels, k);
      break;
    case PoolKind::kOpnSoftmax:
      net.rank1 = init_rank_logits(cfg.conv1_channels, k);
      net.rank2 = init_rank_logits(cfg.conv2_channels, k);
      break;
    case PoolKind::kLbpn:
      net.loc1 = init_location_weights(cfg.conv1_channels, k);
      net.loc2 = init_location_weights(cfg.conv2_channels, k);
      break;
    case PoolKind::kMax:
    case PoolKind::kAvg:
      break;
  }
  return net;
}

namespace {

struct PoolCtx {
  Tensor4 y;
  ArgmaxCache argmax;
  RankPermutation perms;
  RankWeights w_eff;  // opn_softmax only
};

PoolCtx pool_fwd(PoolKind kind, const Tensor4& x, const PoolSpec& spec, const RankWeights& rank,
                 const LocationWeights& loc) {
  switch (kind) {
    case PoolKind::kAvg:
      return {avg_pool_forward(x, spec), {}, {}, {}};
    case PoolKind::kMax: {
      auto [y, cache] = max_pool_forward(x, spec);
      return {std::move(y), std::move(cache), {}, {}};
    }
    case PoolKind::kLbpn:
      return {lbpn_forward(x, spec, loc), {}, {}, {}};
    case PoolKind::kOpn: {
      auto fwd = opn_forward(x, spec, rank);
      return {std::move(fwd.y), {}, std::move(fwd.perms), {}};
    }
    case PoolKind::kOpnSoftmax: {
      auto fwd = opn_softmax_forward(x, spec, rank);
      return {std::move(fwd.y), {}, std::move(fwd.perms), std::move(fwd.w_effective)};
    }
  }
  throw ConfigError("pool_fwd: bad kind");
}

struct PoolBwd {
  Tensor4 dx;
  RankWeights drank;
  LocationWeights dloc;
};

PoolBwd pool_bwd(PoolKind kind, const Tensor4& dy, const Tensor4& x, const PoolCtx& ctx,
                 const PoolSpec& spec, const RankWeights& rank, const LocationWeights& loc) {
  switch (kind) {
    case PoolKind::kAvg:
      return {avg_pool_backward(dy, spec, x.dims()), {}, {}};
    case PoolKind::kMax:
      return {max_pool_backward(dy, ctx.argmax, x.dims()), {}, {}};
    case PoolKind::kLbpn: {
      auto g = lbpn_backward(dy, x, spec, loc);
      return {std::move(g.dx), {}, std::move(g.dw)};
    }
    case PoolKind::kOpn: {
      auto g = opn_backward(dy, x, ctx.perms, rank);
      return {std::move(g.dx), std::move(g.dw), {}};
    }
    case PoolKind::kOpnSoftmax: {
      auto g = opn_softmax_backward(dy, x, ctx.perms, rank, ctx.w_eff);
      return {std::move(g.dx), std::move(g.dtheta), {}};
    }
  }
  throw ConfigError("pool_bwd: bad kind");
}

void axpy_update(std::vector<double>& params, const std::vector<double>& grad, double lr) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

Tensor4 network_logits(const Network& net, const Tensor4& images) {
  const PoolKind kind = net.cfg.pooling;
  Tensor4 a = conv2d_forward(images, net.conv1);
  a = relu_forward(a).y;
  a = pool_fwd(kind, a, net.pool, net.rank1, net.loc1).y;
  a = conv2d_forward(a, net.conv2);
  a = relu_forward(a).y;
  a = pool_fwd(kind, a, net.pool, net.rank2, net.loc2).y;
  a = reshape(std::move(a), {images.dims().batch, net.flatten_dim(), 1, 1});
  a = dense_forward(a, net.fc1);
  a = relu_forward(a).y;
  // dropout at keep = 1 is the identity; skipped entirely in eval mode
  return dense_forward(a, net.fc2);
}

double train_step(Network& net, const Tensor4& images, std::span<const int> labels, double lr,
                  double keep_prob, std::uint64_t dropout_seed) {
  if (images.dims().batch == 0 || labels.empty()) {
    throw ConfigError("train_step: empty batch");
  }
  const PoolKind kind = net.cfg.pooling;
  const std::size_t batch = images.dims().batch;

  // Forward, keeping every intermediate needed by the backward pass.
  Tensor4 c1 = conv2d_forward(images, net.conv1);
  ReluResult r1 = relu_forward(c1);
  PoolCtx p1 = pool_fwd(kind, r1.y, net.pool, net.rank1, net.loc1);
  Tensor4 c2 = conv2d_forward(p1.y, net.conv2);
  ReluResult r2 = relu_forward(c2);
  PoolCtx p2 = pool_fwd(kind, r2.y, net.pool, net.rank2, net.loc2);
  const Dims4 p2_dims = p2.y.dims();
  Tensor4 flat = reshape(std::move(p2.y), {batch, net.flatten_dim(), 1, 1});
  Tensor4 h = dense_forward(flat, net.fc1);
  ReluResult r3 = relu_forward(h);
  DropoutResult drop = dropout_forward(r3.y, keep_prob, dropout_seed);
  Tensor4 logits = dense_forward(drop.y, net.fc2);
  SoftmaxXentResult sx = softmax_xent_forward(logits, labels);
  if (!std::isfinite(sx.loss)) {
    throw DivergenceError("train_step: non-finite loss");
  }

  // Backward.
  Tensor4 dlogits = softmax_xent_backward(sx.probs, labels);
  DenseGrads g_fc2 = dense_backward(dlogits, drop.y, net.fc2);
  Tensor4 dh = dropout_backward(g_fc2.dx, drop.mask, keep_prob);
  dh = relu_backward(dh, r3.mask);
  DenseGrads g_fc1 = dense_backward(dh, flat, net.fc1);
  Tensor4 dflat = reshape(std::move(g_fc1.dx), p2_dims);
  PoolBwd gp2 = pool_bwd(kind, dflat, r2.y, p2, net.pool, net.rank2, net.loc2);
  Tensor4 dc2 = relu_backward(gp2.dx, r2.mask);
  ConvGrads g_conv2 = conv2d_backward(dc2, p1.y, net.conv2);
  PoolBwd gp1 = pool_bwd(kind, g_conv2.dx, r1.y, p1, net.pool, net.rank1, net.loc1);
  Tensor4 dc1 = relu_backward(gp1.dx, r1.mask);
  ConvGrads g_conv1 = conv2d_backward(dc1, images, net.conv1);

  // SGD update.
  axpy_update(net.conv1.weights, g_conv1.dweights, lr);
  axpy_update(net.conv1.bias, g_conv1.dbias, lr);
  axpy_update(net.conv2.weights, g_conv2.dweights, lr);
  axpy_update(net.conv2.bias, g_conv2.dbias, lr);
  axpy_update(net.fc1.weights, g_fc1.dweights, lr);
  axpy_update(net.fc1.bias, g_fc1.dbias, lr);
  axpy_update(net.fc2.weights, g_fc2.dweights, lr);
  axpy_update(net.fc2.bias, g_fc2.dbias, lr);
  switch (kind) {
    case PoolKind::kOpn:
    case PoolKind::kOpnSoftmax:
      axpy_update(net.rank1.w, gp1.drank.w, lr);
      axpy_update(net.rank2.w, gp2.drank.w, lr);
      break;
    case PoolKind::kLbpn:
      axpy_update(net.loc1.w, gp1.dloc.w, lr);
      axpy_update(net.loc2.w, gp2.dloc.w, lr);
      break;
    case PoolKind::kMax:
    case PoolKind::kAvg:
      break;
  }
  return sx.loss;
}

double evaluate(const Network& net, const Dataset& data) {
  if (data.size() == 0) {
    throw ConfigError("evaluate: empty dataset");
  }
  constexpr std::size_t kChunk = 250;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, data.size() - start);
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    Dataset chunk = take(data, idx);
    Tensor4 logits = network_logits(net, chunk.images);
    const double* pl = logits.data();
    const std::size_t classes = net.cfg.num_classes;
    for (std::size_t b = 0; b < n; ++b) {
      const double* row = pl + b * classes;
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (row[c] > row[best]) best = c;
      }
      if (static_cast<int>(best) == chunk.labels[b]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

void write_metrics_csv(std::ostream& os, const RunMetrics& m) {
  os << "epoch,train_loss,val_acc,test_acc,wall_seconds\n";
  char buf[4][32];
  for (const EpochRecord& r : m.epochs) {
    std::snprintf(buf[0], sizeof buf[0], "%.17g", r.train_loss);
    std::snprintf(buf[1], sizeof buf[1], "%.17g", r.val_acc);
    std::snprintf(buf[2], sizeof buf[2], "%.17g", r.test_acc);
    std::snprintf(buf[3], sizeof buf[3], "%.17g", r.wall_seconds);
    os << r.epoch << "," << buf[0] << "," << buf[1] << "," << buf[2] << "," << buf[3] << "\n";
  }
}

RunResult run_experiment(const NetworkConfig& net_cfg, const TrainConfig& train_cfg,
                         const MnistData& data) {
  if (data.train.size() == 0) {
    throw ConfigError("run_experiment: empty training set");
  }
  RunResult result{{}, build_network(net_cfg)};
  Network& net = result.net;
  RunMetrics& metrics = result.metrics;

  double t0 = now_seconds();
  metrics.epochs.push_back(
      {0, 0.0, evaluate(net, data.val), evaluate(net, data.test), now_seconds() - t0});

  std::size_t global_batch = 0;
  for (std::size_t epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    t0 = now_seconds();
    Rng shuffle_rng(mix64(net_cfg.seed, epoch));
    const auto batches = epoch_batches(data.train.size(), train_cfg.batch_size, shuffle_rng);
    double loss_sum = 0.0;
    for (const auto& batch_idx : batches) {
      const Dataset batch = take(data.train, batch_idx);
      const double keep = dropout_keep_prob(global_batch, train_cfg);
      loss_sum += train_step(net, batch.images, batch.labels, train_cfg.learning_rate, keep,
                             mix64(~net_cfg.seed, global_batch));
      ++global_batch;
    }
    metrics.epochs.push_back({epoch, loss_sum / static_cast<double>(batches.size()),
                              evaluate(net, data.val), evaluate(net, data.test),
                              now_seconds() - t0});
  }

  for (const EpochRecord& r : metrics.epochs) {
    metrics.min_val_error = std::min(metrics.min_val_error, 1.0 - r.val_acc);
    metrics.min_test_error = std::min(metrics.min_test_error, 1.0 - r.test_acc);
  }
  return result;
}

}  // namespace opn
