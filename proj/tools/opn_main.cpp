// Experiment CLI: trains the pooling networks on MNIST, runs the gradient
// oracle, exports pooling weights, and compares schemes across seeds.
//
// Exit codes: 0 success, 1 usage, 2 data, 3 divergence, 4 gradcheck failure.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "opn/gradcheck.hpp"
#include "opn/training.hpp"

namespace fs = std::filesystem;
using namespace opn;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitGradcheck = 4;

struct CliConfig {
  std::string pooling = "opn";
  std::size_t epochs = 20;
  std::size_t batch_size = 50;
  double lr = 0.05;
  std::uint64_t seed = 1;
  std::string data_dir;
  std::string out_dir = ".";
  std::size_t subset = 0;  // 0 = full training set
  std::size_t val_size = 10000;

  // gradcheck
  std::size_t trials = 20;
  double h = 1e-5;
  double tolerance = 1e-4;
  std::vector<std::string> layers;

  // compare
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> schemes{"max", "lbpn", "opn"};
};

std::string default_data_dir() {
  if (const char* env = std::getenv("OPN_DATA_DIR")) return env;
  return "data/mnist";
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

MnistData load_data(const CliConfig& cfg) {
  MnistData data = load_mnist(cfg.data_dir, cfg.val_size);
  if (cfg.subset > 0) data.train = head(data.train, cfg.subset);
  return data;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << content;
}

void export_pool_weights(const Network& net, const fs::path& out_dir, const std::string& tag) {
  const PoolKind kind = net.cfg.pooling;
  if (!pool_kind_has_weights(kind)) return;
  for (std::size_t layer = 1; layer <= 2; ++layer) {
    std::ostringstream os;
    if (kind == PoolKind::kLbpn) {
      write_weights_csv(os, layer, layer == 1 ? net.loc1 : net.loc2);
    } else if (kind == PoolKind::kOpnSoftmax) {
      // Export the effective (softmaxed) weights, which are what pooling uses.
      write_weights_csv(os, layer, softmax_rows(layer == 1 ? net.rank1 : net.rank2));
    } else {
      write_weights_csv(os, layer, layer == 1 ? net.rank1 : net.rank2);
    }
    write_file(out_dir / ("pool_weights_" + std::to_string(layer) + "_" + tag + ".csv"),
               os.str());
  }
}

RankWeights effective_rank_weights(const Network& net, int layer) {
  const RankWeights& raw = (layer == 1) ? net.rank1 : net.rank2;
  return net.cfg.pooling == PoolKind::kOpnSoftmax ? softmax_rows(raw) : raw;
}

int cmd_train(const CliConfig& cfg) {
  const PoolKind kind = parse_pool_kind(cfg.pooling);
  const MnistData data = load_data(cfg);

  NetworkConfig net_cfg;
  net_cfg.pooling = kind;
  net_cfg.seed = cfg.seed;
  TrainConfig train_cfg;
  train_cfg.epochs = cfg.epochs;
  train_cfg.batch_size = cfg.batch_size;
  train_cfg.learning_rate = cfg.lr;

  fs::create_directories(cfg.out_dir);
  export_pool_weights(build_network(net_cfg), cfg.out_dir, "initial");

  std::cout << "training pooling=" << cfg.pooling << " seed=" << cfg.seed
            << " epochs=" << cfg.epochs << " train_n=" << data.train.size() << "\n";
  RunResult result = run_experiment(net_cfg, train_cfg, data);

  std::ostringstream metrics;
  write_metrics_csv(metrics, result.metrics);
  const fs::path metrics_path =
      fs::path(cfg.out_dir) /
      ("metrics_" + cfg.pooling + "_" + std::to_string(cfg.seed) + ".csv");
  write_file(metrics_path, metrics.str());
  export_pool_weights(result.net, cfg.out_dir, "final");

  for (const EpochRecord& r : result.metrics.epochs) {
    std::printf("epoch %3zu  loss %.4f  val %.4f  test %.4f  (%.1fs)\n", r.epoch, r.train_loss,
                r.val_acc, r.test_acc, r.wall_seconds);
  }
  std::cout << "min validation error: " << fmt(result.metrics.min_val_error) << "\n";
  std::cout << "min test error: " << fmt(result.metrics.min_test_error) << "\n";
  if (kind == PoolKind::kOpn || kind == PoolKind::kOpnSoftmax) {
    for (int layer = 1; layer <= 2; ++layer) {
      std::cout << "pool layer " << layer << " strictly-decreasing channels: "
                << strictly_decreasing_fraction(effective_rank_weights(result.net, layer))
                << "\n";
    }
  }
  std::cout << "wrote " << metrics_path.string() << "\n";
  return 0;
}

int cmd_export_weights(const CliConfig& cfg) {
  const PoolKind kind = parse_pool_kind(cfg.pooling);
  if (!pool_kind_has_weights(kind)) {
    throw ConfigError("export-weights: pooling kind '" + cfg.pooling + "' has no weights");
  }
  NetworkConfig net_cfg;
  net_cfg.pooling = kind;
  net_cfg.seed = cfg.seed;
  fs::create_directories(cfg.out_dir);
  export_pool_weights(build_network(net_cfg), cfg.out_dir, "initial");
  std::cout << "wrote initial pooling weights for '" << cfg.pooling << "' to " << cfg.out_dir
            << "\n";
  return 0;
}

int cmd_gradcheck(const CliConfig& cfg) {
  std::vector<CheckKind> kinds;
  if (cfg.layers.empty()) {
    kinds = all_check_kinds();
  } else {
    for (const std::string& name : cfg.layers) kinds.push_back(parse_check_kind(name));
  }
  bool all_passed = true;
  std::printf("%-14s %-7s %-12s %-6s %s\n", "layer", "trials", "max_rel_err", "pass", "worst");
  for (CheckKind kind : kinds) {
    const GradReport r = check_layer(kind, cfg.trials, cfg.h, cfg.tolerance, cfg.seed);
    std::printf("%-14s %-7zu %-12.3e %-6s %s\n", r.layer.c_str(), r.trials, r.max_rel_error,
                r.passed ? "ok" : "FAIL", r.passed ? "" : r.worst_location.c_str());
    all_passed = all_passed && r.passed;
  }
  return all_passed ? 0 : kExitGradcheck;
}

int cmd_compare(const CliConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("compare: need at least one seed");
  const MnistData data = load_data(cfg);
  fs::create_directories(cfg.out_dir);

  struct Entry {
    std::string scheme;
    std::uint64_t seed;
    double min_val_err;
    double test_err;
  };
  std::vector<Entry> entries;
  std::map<std::string, std::vector<double>> test_errs, val_errs;
  std::vector<std::pair<double, double>> opn_decreasing;  // per-seed (layer1, layer2)

  for (const std::string& scheme : cfg.schemes) {
    const PoolKind kind = parse_pool_kind(scheme);
    for (std::uint64_t seed : cfg.seeds) {
      NetworkConfig net_cfg;
      net_cfg.pooling = kind;
      net_cfg.seed = seed;
      TrainConfig train_cfg;
      train_cfg.epochs = cfg.epochs;
      train_cfg.batch_size = cfg.batch_size;
      train_cfg.learning_rate = cfg.lr;
      std::cout << "compare: scheme=" << scheme << " seed=" << seed << "\n";
      RunResult r = run_experiment(net_cfg, train_cfg, data);
      entries.push_back({scheme, seed, r.metrics.min_val_error, r.metrics.min_test_error});
      val_errs[scheme].push_back(r.metrics.min_val_error);
      test_errs[scheme].push_back(r.metrics.min_test_error);
      if (kind == PoolKind::kOpn || kind == PoolKind::kOpnSoftmax) {
        opn_decreasing.emplace_back(
            strictly_decreasing_fraction(effective_rank_weights(r.net, 1)),
            strictly_decreasing_fraction(effective_rank_weights(r.net, 2)));
      }
    }
  }

  std::ostringstream os;
  os << "scheme,seed,min_val_err,test_err\n";
  for (const Entry& e : entries) {
    os << e.scheme << "," << e.seed << "," << fmt(e.min_val_err) << "," << fmt(e.test_err)
       << "\n";
  }
  write_file(fs::path(cfg.out_dir) / "compare.csv", os.str());

  const auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const auto min_of = [](const std::vector<double>& v) {
    double m = v[0];
    for (double x : v) m = std::min(m, x);
    return m;
  };

  std::ostringstream sum;
  sum << "scheme,mean_val_err,min_val_err,mean_test_err,min_test_err\n";
  for (const std::string& scheme : cfg.schemes) {
    sum << scheme << "," << fmt(mean(val_errs[scheme])) << "," << fmt(min_of(val_errs[scheme]))
        << "," << fmt(mean(test_errs[scheme])) << "," << fmt(min_of(test_errs[scheme])) << "\n";
  }
  std::string delta_line;
  if (test_errs.count("opn") && test_errs.count("max")) {
    // Accuracy delta: positive when OPN beats max pooling.
    const double delta = mean(test_errs["max"]) - mean(test_errs["opn"]);
    delta_line = fmt(delta);
    sum << "opn_minus_max_test_acc_delta," << delta_line << ",,,\n";
  }
  write_file(fs::path(cfg.out_dir) / "compare_summary.csv", sum.str());

  std::cout << "\nscheme     mean_val_err  mean_test_err\n";
  for (const std::string& scheme : cfg.schemes) {
    std::printf("%-10s %.6f      %.6f\n", scheme.c_str(), mean(val_errs[scheme]),
                mean(test_errs[scheme]));
  }
  if (!delta_line.empty()) {
    std::cout << "OPN - max mean test accuracy delta: " << delta_line << "\n";
  }
  if (!opn_decreasing.empty()) {
    double l1 = 0, l2 = 0;
    for (auto [a, b] : opn_decreasing) {
      l1 += a;
      l2 += b;
    }
    l1 /= static_cast<double>(opn_decreasing.size());
    l2 /= static_cast<double>(opn_decreasing.size());
    std::cout << "OPN strictly-decreasing rank-weight channels: layer1 " << l1 << ", layer2 "
              << l2 << "\n";
  }
  std::cout << "wrote " << (fs::path(cfg.out_dir) / "compare.csv").string() << " and "
            << (fs::path(cfg.out_dir) / "compare_summary.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CliConfig cfg;
  cfg.data_dir = default_data_dir();

  CLI::App app{"Ordinal pooling networks: MNIST experiments and gradient checks"};
  app.require_subcommand(1);

  const auto add_common = [&cfg](CLI::App* sub) {
    sub->add_option("--data-dir", cfg.data_dir, "MNIST directory (env OPN_DATA_DIR)");
    sub->add_option("--out-dir", cfg.out_dir, "output directory for CSV files");
    sub->add_option("--seed", cfg.seed, "RNG seed");
    sub->add_option("--epochs", cfg.epochs, "training epochs");
    sub->add_option("--batch-size", cfg.batch_size, "mini-batch size");
    sub->add_option("--lr", cfg.lr, "SGD learning rate");
    sub->add_option("--subset", cfg.subset, "train on only the first K examples");
    sub->add_option("--val-size", cfg.val_size, "validation examples split off the train set");
  };

  CLI::App* train = app.add_subcommand("train", "train one network and write metrics CSVs");
  add_common(train);
  train->add_option("--pooling", cfg.pooling, "max|avg|lbpn|opn|opn_softmax");

  CLI::App* compare =
      app.add_subcommand("compare", "train several schemes over shared seeds and compare");
  add_common(compare);
  compare->add_option("--seeds", cfg.seeds, "seeds to run each scheme under")->delimiter(',');
  compare->add_option("--schemes", cfg.schemes, "pooling schemes to compare")->delimiter(',');

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference oracle suite");
  gradcheck->add_option("--trials", cfg.trials, "random trials per layer kind");
  gradcheck->add_option("--h", cfg.h, "central-difference step");
  gradcheck->add_option("--tol", cfg.tolerance, "max relative error");
  gradcheck->add_option("--seed", cfg.seed, "RNG seed");
  gradcheck->add_option("--layers", cfg.layers, "subset of layer kinds to check")
      ->delimiter(',');

  CLI::App* export_weights =
      app.add_subcommand("export-weights", "write initial pooling weight CSVs");
  export_weights->add_option("--pooling", cfg.pooling, "lbpn|opn|opn_softmax");
  export_weights->add_option("--out-dir", cfg.out_dir, "output directory");
  export_weights->add_option("--seed", cfg.seed, "RNG seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(cfg);
    if (compare->parsed()) return cmd_compare(cfg);
    if (gradcheck->parsed()) return cmd_gradcheck(cfg);
    if (export_weights->parsed()) return cmd_export_weights(cfg);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
