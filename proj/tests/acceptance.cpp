// Acceptance suite: runs every release criterion end to end and prints one
// [PASS]/[FAIL] line per criterion. Criteria 5 and 6 drive the actual CLI
// binary on the real MNIST files.
//
// Usage: opn_acceptance --cli <path-to-opn> [--data-dir D] [--out-dir O]

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "opn/gradcheck.hpp"
#include "opn/mnist.hpp"
#include "opn/pooling.hpp"
#include "opn/training.hpp"

namespace fs = std::filesystem;
using namespace opn;

namespace {

struct Outcome {
  int criterion;
  bool passed;
  std::string detail;
};

std::vector<Outcome> g_outcomes;

void report(int criterion, bool passed, const std::string& detail) {
  g_outcomes.push_back({criterion, passed, detail});
  std::cout << (passed ? "[PASS] " : "[FAIL] ") << "criterion " << criterion << ": " << detail
            << std::endl;
}

double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string fmt(double v, const char* spec = "%.3g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

int run_cli(const std::string& cmd) {
  std::cout << "+ " << cmd << std::endl;
  const int rc = std::system(cmd.c_str());
  return rc;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("acceptance: cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

// ---- criterion 1: gradient oracle over every layer kind ---------------------

void criterion_1() {
  const double t0 = now_s();
  const auto reports = check_all_layers(20, 1e-5, 1e-4, 20240501);
  const double elapsed = now_s() - t0;
  bool all = true;
  double worst = 0.0;
  std::string worst_layer;
  for (const GradReport& r : reports) {
    if (!r.passed) all = false;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_layer = r.layer;
    }
  }
  const bool timed = elapsed <= 120.0;
  report(1, all && timed,
         "gradient oracle, " + std::to_string(reports.size()) +
             " layer kinds x 20 trials, worst rel err " + fmt(worst) + " (" + worst_layer +
             "), " + fmt(elapsed, "%.1f") + "s" + (timed ? "" : " — over the 120s budget"));
}

// ---- criterion 2: degeneration equivalences ----------------------------------

void criterion_2() {
  Rng rng(777);
  const PoolSpec spec{2, 2, 2};
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t hw[] = {4, 8};
    const Dims4 dims{1 + rng.below(2), 1 + rng.below(3), hw[rng.below(2)], hw[rng.below(2)]};
    Tensor4 x(dims);
    for (double& v : x.values()) v = rng.uniform(-5, 5);

    RankWeights uniform(dims.channels, 4, 0.25);
    RankWeights onehot(dims.channels, 4, 0.0);
    for (std::size_t c = 0; c < dims.channels; ++c) onehot.at(c, 0) = 1.0;

    OpnForwardResult f_uni = opn_forward(x, spec, uniform);
    OpnForwardResult f_hot = opn_forward(x, spec, onehot);
    auto [y_max, argmax] = max_pool_forward(x, spec);
    Tensor4 y_avg = avg_pool_forward(x, spec);
    for (std::size_t j = 0; j < y_avg.size(); ++j) {
      worst = std::max(worst, std::fabs(f_uni.y.values()[j] - y_avg.values()[j]));
      worst = std::max(worst, std::fabs(f_hot.y.values()[j] - y_max.values()[j]));
    }

    Tensor4 dy(y_avg.dims());
    for (double& v : dy.values()) v = rng.uniform(-2, 2);
    Tensor4 dx_uni = opn_backward(dy, x, f_uni.perms, uniform).dx;
    Tensor4 dx_avg = avg_pool_backward(dy, spec, dims);
    Tensor4 dx_hot = opn_backward(dy, x, f_hot.perms, onehot).dx;
    Tensor4 dx_max = max_pool_backward(dy, argmax, dims);
    for (std::size_t j = 0; j < dx_avg.size(); ++j) {
      worst = std::max(worst, std::fabs(dx_uni.values()[j] - dx_avg.values()[j]));
      worst = std::max(worst, std::fabs(dx_hot.values()[j] - dx_max.values()[j]));
    }
  }
  report(2, worst <= 1e-12,
         "avg/max degeneration (forward + backward) on 1000 random tensors, max abs dev " +
             fmt(worst));
}

// ---- criterion 3: parameter accounting ---------------------------------------

void criterion_3() {
  bool ok = true;
  const PoolSpec spec{2, 2, 2};
  for (std::size_t n = 1; n <= 256 && ok; ++n) {
    ok = pooling_param_count(PoolKind::kOpn, n, spec) == 4 * n &&
         pooling_param_count(PoolKind::kLbpn, n, spec) == 4 * n;
  }
  NetworkConfig cfg;
  cfg.pooling = PoolKind::kOpn;
  const std::size_t total = build_network(cfg).pooling_param_count_total();
  ok = ok && total == 384;
  report(3, ok, "4N parameters per 2x2 layer for N in 1..256; default network total " +
                    std::to_string(total));
}

// ---- criterion 4: worked rank-weight example ---------------------------------

void criterion_4() {
  const PoolSpec spec{2, 2, 2};
  Tensor4 x({1, 1, 2, 2});
  x.values() = {1, 2, 3, 4};
  RankWeights w(1, 4);
  w.w = {0.4, 0.3, 0.2, 0.1};
  OpnForwardResult fwd = opn_forward(x, spec, w);
  Tensor4 dy({1, 1, 1, 1}, 1.0);
  OpnGrads g = opn_backward(dy, x, fwd.perms, w);

  bool ok = fwd.y.values()[0] == 3.0;
  ok = ok && g.dx.values() == std::vector<double>{0.1, 0.2, 0.3, 0.4};
  ok = ok && g.dw.w == std::vector<double>{4, 3, 2, 1};

  // Cross-check dx against the oracle.
  Tensor4 numeric = numeric_grad(
      [&](const Tensor4& xin) { return opn_forward(xin, spec, w).y.values()[0]; }, x, 1e-5);
  double worst = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    worst = std::max(worst, relative_error(g.dx.values()[i], numeric.values()[i]));
  }
  ok = ok && worst <= 1e-4;
  report(4, ok, "region [1,2,3,4] x weights [0.4,0.3,0.2,0.1]: forward 3.0 exactly, "
                "dx/dW exact, oracle rel err " +
                    fmt(worst));
}

// ---- criterion 7: dropout schedule -------------------------------------------

void criterion_7() {
  TrainConfig cfg;
  bool ok = dropout_keep_prob(0, cfg) == 0.98;
  ok = ok && std::fabs(dropout_keep_prob(999, cfg) - 0.98) <= 1e-12;
  ok = ok && std::fabs(dropout_keep_prob(1000, cfg) - 0.98 * std::exp(-0.003)) <= 1e-12;
  ok = ok && std::fabs(dropout_keep_prob(2000, cfg) - 0.98 * std::exp(-0.006)) <= 1e-12;
  double prev = 1.0;
  for (std::size_t i = 0; i <= 200000; i += 100) {
    const double keep = dropout_keep_prob(i, cfg);
    if (keep > prev) {
      ok = false;
      break;
    }
    prev = keep;
  }
  report(7, ok, "keep prob: 0.98 at batch 0, matches the decay formula at 999/1000/2000 "
                "to 1e-12, non-increasing");
}

// ---- criterion 8: data pipeline ----------------------------------------------

void criterion_8(const fs::path& data_dir) {
  bool ok = true;
  std::string detail;

  // Synthetic IDX round-trip.
  Rng rng(4096);
  Tensor4 images({32, 1, 7, 5});
  for (double& v : images.values()) v = static_cast<double>(rng.below(256)) / 255.0;
  std::vector<int> labels(32);
  for (int& l : labels) l = static_cast<int>(rng.below(10));
  ok = ok && parse_idx_images(encode_idx_images(images)).values() == images.values();
  ok = ok && parse_idx_labels(encode_idx_labels(labels)) == labels;

  // Malformed fixtures.
  auto expect_format_error = [&](std::vector<unsigned char> bytes, bool images_parser) {
    try {
      if (images_parser) {
        parse_idx_images(bytes);
      } else {
        parse_idx_labels(bytes);
      }
      return false;
    } catch (const FormatError&) {
      return true;
    }
  };
  std::vector<unsigned char> good = encode_idx_images(images);
  std::vector<unsigned char> bad_magic = good;
  bad_magic[3] = 0x01;  // labels magic on an images payload
  ok = ok && expect_format_error(bad_magic, true);
  std::vector<unsigned char> truncated(good.begin(), good.end() - 7);
  ok = ok && expect_format_error(truncated, true);
  std::vector<unsigned char> good_labels = encode_idx_labels(labels);
  std::vector<unsigned char> short_labels(good_labels.begin(), good_labels.end() - 2);
  ok = ok && expect_format_error(short_labels, false);

  // Real split sizes.
  try {
    MnistData data = load_mnist(data_dir, 10000);
    const bool sizes =
        data.train.size() == 50000 && data.val.size() == 10000 && data.test.size() == 10000;
    ok = ok && sizes;
    detail = "IDX round-trip exact, malformed inputs rejected, split 60000 -> 50000/10000";
  } catch (const Error& e) {
    ok = false;
    detail = std::string("MNIST unavailable: ") + e.what();
  }
  report(8, ok, detail);
}

// ---- criteria 5 and 6: desk-scale training through the CLI -------------------

struct MetricsSummary {
  double min_test_err = 1.0;
  double min_val_err = 1.0;
};

MetricsSummary summarize_metrics(const fs::path& csv) {
  MetricsSummary s;
  const auto rows = read_csv(csv);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    s.min_val_err = std::min(s.min_val_err, 1.0 - std::stod(rows[i][2]));
    s.min_test_err = std::min(s.min_test_err, 1.0 - std::stod(rows[i][3]));
  }
  return s;
}

void criteria_5_and_6(const std::string& cli, const fs::path& data_dir,
                      const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const std::string common =
      " --data-dir " + data_dir.string() + " --out-dir " + out_dir.string();

  // (a) two full 2-epoch runs with the defaults.
  const double t0 = now_s();
  const int rc_max = run_cli(cli + " train --pooling max --epochs 2 --seed 1" + common);
  const int rc_opn = run_cli(cli + " train --pooling opn --epochs 2 --seed 1" + common);
  const double train_elapsed = now_s() - t0;

  bool ok5 = rc_max == 0 && rc_opn == 0;
  std::string detail5;
  MetricsSummary max_s, opn_s;
  if (ok5) {
    max_s = summarize_metrics(out_dir / "metrics_max_1.csv");
    opn_s = summarize_metrics(out_dir / "metrics_opn_1.csv");
    const bool acc_ok = max_s.min_test_err <= 0.03 && opn_s.min_test_err <= 0.03;
    const bool time_ok = train_elapsed <= 1800.0;
    ok5 = acc_ok && time_ok;
    detail5 = "2-epoch full runs: max test acc " + fmt(1.0 - max_s.min_test_err, "%.4f") +
              ", opn test acc " + fmt(1.0 - opn_s.min_test_err, "%.4f") + " (both need >= 0.97), " +
              fmt(train_elapsed, "%.0f") + "s of 1800s";
  } else {
    detail5 = "train subcommand failed (exit " + std::to_string(rc_max) + "/" +
              std::to_string(rc_opn) + ")";
  }

  // (b) compare over 3 seeds at desk scale; directional sanity bound.
  const int rc_cmp = run_cli(cli + " compare --seeds 1,2,3 --epochs 1 --subset 10000" + common);
  if (rc_cmp != 0) {
    ok5 = false;
    detail5 += "; compare failed (exit " + std::to_string(rc_cmp) + ")";
  } else {
    std::map<std::string, std::vector<double>> test_errs;
    const auto rows = read_csv(out_dir / "compare.csv");
    for (std::size_t i = 1; i < rows.size(); ++i) {
      test_errs[rows[i][0]].push_back(std::stod(rows[i][3]));
    }
    const auto mean = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x;
      return v.empty() ? 1.0 : s / static_cast<double>(v.size());
    };
    const double max_acc = 1.0 - mean(test_errs["max"]);
    const double opn_acc = 1.0 - mean(test_errs["opn"]);
    const bool directional = opn_acc >= max_acc - 0.003;
    ok5 = ok5 && directional;
    detail5 += "; compare over 3 seeds: OPN mean test acc " + fmt(opn_acc, "%.4f") +
               " vs max " + fmt(max_acc, "%.4f") + " (delta " + fmt(opn_acc - max_acc, "%+.4f") +
               ", bound -0.003)";
  }
  report(5, ok5, detail5);

  // (6) diagnostics on the trained OPN weights exported by run (a).
  bool ok6 = true;
  std::string detail6;
  try {
    double worst_sum_dev = 0.0;
    bool any_differs = false;
    std::string fractions;
    for (int layer = 1; layer <= 2; ++layer) {
      const auto rows =
          read_csv(out_dir / ("pool_weights_" + std::to_string(layer) + "_final.csv"));
      std::map<int, std::vector<double>> by_channel;
      for (std::size_t i = 1; i < rows.size(); ++i) {
        by_channel[std::stoi(rows[i][1])].push_back(std::stod(rows[i][3]));
      }
      const std::vector<double>& first = by_channel.begin()->second;
      std::size_t decreasing = 0;
      for (const auto& [channel, w] : by_channel) {
        if (w != first) any_differs = true;
        double sum = 0.0;
        bool dec = true;
        for (std::size_t r = 0; r < w.size(); ++r) {
          sum += w[r];
          if (r > 0 && !(w[r] < w[r - 1])) dec = false;
        }
        worst_sum_dev = std::max(worst_sum_dev, std::fabs(sum - 1.0));
        decreasing += dec;
      }
      fractions += (layer == 1 ? "layer1 " : ", layer2 ") +
                   fmt(static_cast<double>(decreasing) / static_cast<double>(by_channel.size()),
                       "%.3f");
    }
    ok6 = any_differs && worst_sum_dev > 1e-9;
    detail6 = "trained rank weights differ across channels, max |row sum - 1| " +
              fmt(worst_sum_dev) + " (unnormalized); strictly-decreasing fraction " + fractions +
              " [reported, not asserted]";
  } catch (const Error& e) {
    ok6 = false;
    detail6 = std::string("could not read exported weights: ") + e.what();
  }
  report(6, ok6, detail6);
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  fs::path data_dir;
  fs::path out_dir = "acceptance_out";
  if (const char* env = std::getenv("OPN_DATA_DIR")) data_dir = env;
#ifdef OPN_DEFAULT_DATA_DIR
  if (data_dir.empty()) data_dir = OPN_DEFAULT_DATA_DIR;
#endif
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--cli") cli = argv[i + 1];
    if (flag == "--data-dir") data_dir = argv[i + 1];
    if (flag == "--out-dir") out_dir = argv[i + 1];
  }
  if (cli.empty()) {
    std::cerr << "usage: opn_acceptance --cli <path-to-opn> [--data-dir D] [--out-dir O]\n";
    return 2;
  }

  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_7();
  criterion_8(data_dir);
  criteria_5_and_6(cli, data_dir, out_dir);

  std::size_t failed = 0;
  for (const Outcome& o : g_outcomes) failed += o.passed ? 0 : 1;
  std::cout << "\nacceptance: " << (g_outcomes.size() - failed) << "/" << g_outcomes.size()
            << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
