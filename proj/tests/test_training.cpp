#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "opn/training.hpp"
#include "test_util.hpp"

using namespace opn;

namespace {

// Small network so randomized training tests stay fast.
NetworkConfig tiny_config(PoolKind kind, std::uint64_t seed) {
  NetworkConfig cfg;
  cfg.pooling = kind;
  cfg.input_h = 8;
  cfg.input_w = 8;
  cfg.conv1_channels = 4;
  cfg.conv1_filter = 3;
  cfg.conv2_channels = 6;
  cfg.conv2_filter = 3;
  cfg.hidden_dim = 16;
  cfg.seed = seed;
  return cfg;
}

Dataset random_dataset(std::size_t n, std::size_t hw, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.images = Tensor4({n, 1, hw, hw});
  for (double& v : d.images.values()) v = rng.uniform();
  d.labels.resize(n);
  for (int& l : d.labels) l = static_cast<int>(rng.below(10));
  return d;
}

double loss_of(const Network& net, const Tensor4& images, std::span<const int> labels) {
  return softmax_xent_forward(network_logits(net, images), labels).loss;
}

}  // namespace

TEST_CASE("dropout keep probability schedule") {
  TrainConfig cfg;
  CHECK(dropout_keep_prob(0, cfg) == 0.98);
  CHECK(dropout_keep_prob(999, cfg) == 0.98);

  // Independent scalar computation of the documented formula.
  const double expect_1000 = 0.98 * std::exp(-0.003);
  CHECK(dropout_keep_prob(1000, cfg) == doctest::Approx(expect_1000).epsilon(1e-12));
  CHECK(dropout_keep_prob(1000, cfg) == doctest::Approx(0.977063).epsilon(1e-6));
  CHECK(dropout_keep_prob(2000, cfg) ==
        doctest::Approx(0.98 * std::exp(-0.006)).epsilon(1e-12));

  double prev = 1.0;
  for (std::size_t i = 0; i < 400000; i += 997) {
    const double keep = dropout_keep_prob(i, cfg);
    CHECK(keep <= prev);
    CHECK(keep >= 0.5);
    prev = keep;
  }
  // Far out, the clamp holds.
  CHECK(dropout_keep_prob(1000000000, cfg) == 0.5);
}

TEST_CASE("build_network wiring and parameter accounting") {
  NetworkConfig cfg;  // defaults: 28x28, 32/64 channels, 1024 hidden
  cfg.pooling = PoolKind::kOpn;
  Network net = build_network(cfg);
  CHECK(net.flatten_dim() == 3136);
  CHECK(net.pooling_param_count_total() == 384);  // 4*32 + 4*64
  CHECK(net.rank1.channels == 32);
  CHECK(net.rank2.channels == 64);

  cfg.pooling = PoolKind::kMax;
  CHECK(build_network(cfg).pooling_param_count_total() == 0);

  cfg.pooling = PoolKind::kLbpn;
  Network lb = build_network(cfg);
  CHECK(lb.pooling_param_count_total() == 384);
  CHECK(lb.loc1.k == 4);

  // A zero image still produces 10 finite logits.
  cfg.pooling = PoolKind::kOpn;
  Network opn_net = build_network(cfg);
  Tensor4 zero({1, 1, 28, 28}, 0.0);
  Tensor4 logits = network_logits(opn_net, zero);
  CHECK(logits.dims() == Dims4{1, 10, 1, 1});
  CHECK(logits.all_finite());

  // Geometry that does not tile 2x2/2 twice is rejected.
  NetworkConfig bad = cfg;
  bad.input_h = 30;  // 30 -> 15, and 15 does not tile
  CHECK_THROWS_AS(build_network(bad), ConfigError);
}

TEST_CASE("train_step with lr=0 changes nothing and returns a finite loss") {
  for (PoolKind kind : {PoolKind::kMax, PoolKind::kAvg, PoolKind::kLbpn, PoolKind::kOpn,
                        PoolKind::kOpnSoftmax}) {
    CAPTURE(to_string(kind));
    Network net = build_network(tiny_config(kind, 5));
    const Network before = net;
    Dataset batch = random_dataset(4, 8, 77);
    const double loss = train_step(net, batch.images, batch.labels, 0.0, 0.9, 123);
    CHECK(std::isfinite(loss));
    CHECK(net.conv1.weights == before.conv1.weights);
    CHECK(net.conv2.weights == before.conv2.weights);
    CHECK(net.fc1.weights == before.fc1.weights);
    CHECK(net.fc2.weights == before.fc2.weights);
    CHECK(net.rank1.w == before.rank1.w);
    CHECK(net.loc1.w == before.loc1.w);
  }
}

TEST_CASE("one SGD step on a single example decreases its loss") {
  Rng seeds(2024);
  int instance = 0;
  for (PoolKind kind : {PoolKind::kMax, PoolKind::kOpn, PoolKind::kLbpn, PoolKind::kAvg}) {
    for (int t = 0; t < 5; ++t, ++instance) {
      CAPTURE(to_string(kind));
      CAPTURE(instance);
      Network net = build_network(tiny_config(kind, seeds.next_u64()));
      Dataset one = random_dataset(1, 8, seeds.next_u64());
      const double before = loss_of(net, one.images, one.labels);
      const double reported =
          train_step(net, one.images, one.labels, 1e-3, 1.0, 1);  // keep=1: no dropout noise
      CHECK(reported == doctest::Approx(before).epsilon(1e-12));
      const double after = loss_of(net, one.images, one.labels);
      CHECK(after < before);
    }
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  Dataset batch = random_dataset(6, 8, 3);
  double losses[2];
  std::vector<double> weights[2];
  for (int run = 0; run < 2; ++run) {
    Network net = build_network(tiny_config(PoolKind::kOpn, 11));
    losses[run] = train_step(net, batch.images, batch.labels, 0.05, 0.8, 42);
    weights[run] = net.conv1.weights;
    weights[run].insert(weights[run].end(), net.rank1.w.begin(), net.rank1.w.end());
  }
  CHECK(losses[0] == losses[1]);  // bitwise
  CHECK(weights[0] == weights[1]);
}

TEST_CASE("OPN pooling weights actually move during training") {
  Network net = build_network(tiny_config(PoolKind::kOpn, 9));
  const RankWeights before = net.rank1;
  Dataset batch = random_dataset(8, 8, 31);
  for (int i = 0; i < 5; ++i) {
    train_step(net, batch.images, batch.labels, 0.05, 1.0, static_cast<std::uint64_t>(i));
  }
  CHECK(net.rank1.w != before.w);
}

TEST_CASE("divergence raises instead of silently continuing") {
  Network net = build_network(tiny_config(PoolKind::kMax, 13));
  // Poison one weight; the forward pass then produces a non-finite loss.
  net.fc2.weights[0] = std::numeric_limits<double>::infinity();
  Dataset batch = random_dataset(2, 8, 5);
  CHECK_THROWS_AS(train_step(net, batch.images, batch.labels, 0.01, 1.0, 7), DivergenceError);
}

TEST_CASE("evaluate: perfect single item, purity, chance level") {
  Network net = build_network(tiny_config(PoolKind::kAvg, 21));
  Dataset one = random_dataset(1, 8, 55);
  // Label the item with the network's own argmax: accuracy must be 1.
  Tensor4 logits = network_logits(net, one.images);
  std::size_t best = 0;
  for (std::size_t c = 1; c < 10; ++c) {
    if (logits(0, c, 0, 0) > logits(0, best, 0, 0)) best = c;
  }
  one.labels[0] = static_cast<int>(best);
  CHECK(evaluate(net, one) == 1.0);

  // Evaluating twice without training gives identical results.
  Dataset data = random_dataset(300, 8, 66);
  CHECK(evaluate(net, data) == evaluate(net, data));

  // A random-weight net on 10-class data sits near chance.
  Dataset big = random_dataset(1000, 8, 67);
  const double acc = evaluate(net, big);
  CHECK(acc >= 0.05);
  CHECK(acc <= 0.2);
}

TEST_CASE("run_experiment: baseline row, determinism, metrics csv") {
  Dataset train = random_dataset(40, 8, 70);
  Dataset val = random_dataset(20, 8, 71);
  Dataset test = random_dataset(20, 8, 72);
  MnistData data{train, val, test};

  TrainConfig tc;
  tc.epochs = 0;
  tc.batch_size = 10;
  RunResult r0 = run_experiment(tiny_config(PoolKind::kOpn, 3), tc, data);
  CHECK(r0.metrics.epochs.size() == 1);
  CHECK(r0.metrics.epochs[0].epoch == 0);
  CHECK(r0.metrics.min_val_error ==
        doctest::Approx(1.0 - r0.metrics.epochs[0].val_acc).epsilon(1e-15));

  tc.epochs = 2;
  tc.learning_rate = 0.01;
  RunResult a = run_experiment(tiny_config(PoolKind::kOpn, 3), tc, data);
  RunResult b = run_experiment(tiny_config(PoolKind::kOpn, 3), tc, data);
  CHECK(a.metrics.epochs.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.metrics.epochs[i].train_loss == b.metrics.epochs[i].train_loss);  // bitwise
    CHECK(a.metrics.epochs[i].val_acc == b.metrics.epochs[i].val_acc);
    CHECK(a.metrics.epochs[i].test_acc == b.metrics.epochs[i].test_acc);
  }

  std::ostringstream os;
  write_metrics_csv(os, a.metrics);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_loss,val_acc,test_acc,wall_seconds");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);

  // Accuracies stay in [0, 1] and epochs increase.
  for (std::size_t i = 0; i < a.metrics.epochs.size(); ++i) {
    const EpochRecord& rec = a.metrics.epochs[i];
    CHECK(rec.epoch == i);
    CHECK(rec.val_acc >= 0.0);
    CHECK(rec.val_acc <= 1.0);
    CHECK(rec.test_acc >= 0.0);
    CHECK(rec.test_acc <= 1.0);
  }
}

TEST_CASE("one epoch of OPN on a real-data subset clears the smoke threshold" *
          doctest::skip(!test::has_mnist())) {
  MnistData data = load_mnist(test::data_dir(), 10000);
  data.train = head(data.train, 1000);
  data.val = head(data.val, 1000);
  data.test = head(data.test, 1000);

  NetworkConfig cfg;
  cfg.pooling = PoolKind::kOpn;
  cfg.seed = 1;
  TrainConfig tc;
  tc.epochs = 1;
  RunResult r = run_experiment(cfg, tc, data);
  CHECK(r.metrics.epochs.back().val_acc > 0.5);

  // Trained rank weights are no longer identical across channels.
  bool all_same = true;
  for (std::size_t c = 1; c < r.net.rank1.channels && all_same; ++c) {
    for (std::size_t k = 0; k < r.net.rank1.k; ++k) {
      if (r.net.rank1.at(c, k) != r.net.rank1.at(0, k)) {
        all_same = false;
        break;
      }
    }
  }
  CHECK(!all_same);
}
