#include "opn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

#include "opn/layers.hpp"
#include "opn/pooling.hpp"
#include "opn/rng.hpp"

namespace opn {

Tensor4 numeric_grad(const std::function<double(const Tensor4&)>& f, const Tensor4& x, double h) {
  if (!(h > 0.0)) throw ConfigError("numeric_grad: h must be positive");
  Tensor4 grad(x.dims());
  Tensor4 probe = x;
  double* p = probe.data();
  double* g = grad.data();
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + h;
    const double up = f(probe);
    p[i] = saved - h;
    const double down = f(probe);
    p[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("numeric_grad: non-finite function value");
    }
    g[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

std::vector<double> numeric_grad_params(const std::function<double()>& f,
                                        std::vector<double>& params, double h) {
  if (!(h > 0.0)) throw ConfigError("numeric_grad_params: h must be positive");
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = f();
    params[i] = saved - h;
    const double down = f();
    params[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("numeric_grad_params: non-finite function value");
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

std::vector<CheckKind> all_check_kinds() {
  return {CheckKind::kConv,        CheckKind::kDense,   CheckKind::kRelu,
          CheckKind::kDropout,     CheckKind::kSoftmaxXent, CheckKind::kAvgPool,
          CheckKind::kMaxPool,     CheckKind::kLbpn,    CheckKind::kOpn,
          CheckKind::kOpnSoftmax};
}

std::string to_string(CheckKind kind) {
  switch (kind) {
    case CheckKind::kConv: return "conv";
    case CheckKind::kDense: return "dense";
    case CheckKind::kRelu: return "relu";
    case CheckKind::kDropout: return "dropout";
    case CheckKind::kSoftmaxXent: return "softmax_xent";
    case CheckKind::kAvgPool: return "avg_pool";
    case CheckKind::kMaxPool: return "max_pool";
    case CheckKind::kLbpn: return "lbpn";
    case CheckKind::kOpn: return "opn";
    case CheckKind::kOpnSoftmax: return "opn_softmax";
  }
  return "?";
}

CheckKind parse_check_kind(const std::string& name) {
  for (CheckKind kind : all_check_kinds()) {
    if (to_string(kind) == name) return kind;
  }
  throw ConfigError("unknown layer kind '" + name + "'");
}

namespace {

Tensor4 random_tensor(Rng& rng, const Dims4& dims, double lo = -1.0, double hi = 1.0) {
  Tensor4 t(dims);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Minimum pairwise gap across every pooling region.
double min_region_gap(const Tensor4& x, const PoolSpec& spec) {
  const Dims4 d = x.dims();
  auto [oh, ow] = spec.output_hw(d.height, d.width);
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> vals(spec.region_size());
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.channels; ++c) {
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          std::size_t p = 0;
          for (std::size_t u = 0; u < spec.filter_h; ++u) {
            for (std::size_t v = 0; v < spec.filter_w; ++v, ++p) {
              vals[p] = x(b, c, i * spec.stride + u, j * spec.stride + v);
            }
          }
          std::sort(vals.begin(), vals.end());
          for (std::size_t q = 1; q < vals.size(); ++q) {
            best = std::min(best, vals[q] - vals[q - 1]);
          }
        }
      }
    }
  }
  return best;
}

// Resamples until every region is tie-free by a margin of 100 h, so the sort
// permutation cannot change across the central-difference evaluations.
Tensor4 tie_free_tensor(Rng& rng, const Dims4& dims, const PoolSpec& spec, double h) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Tensor4 x = random_tensor(rng, dims);
    if (min_region_gap(x, spec) > 100.0 * h) return x;
  }
  throw NumericError("tie_free_tensor: could not draw a tie-free instance");
}

struct Comparator {
  GradReport& report;
  std::size_t trial;

  void block(const std::string& name, std::span<const double> analytic,
             std::span<const double> numeric) {
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double err = relative_error(analytic[i], numeric[i]);
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_location =
            "trial " + std::to_string(trial) + ", " + name + "[" + std::to_string(i) + "]";
      }
    }
  }
};

Dims4 random_pool_dims(Rng& rng) {
  const std::size_t hw[] = {2, 4};
  return {1 + rng.below(2), 1 + rng.below(3), hw[rng.below(2)], hw[rng.below(2)]};
}

void check_trial(CheckKind kind, double h, Comparator& cmp, Rng& rng) {
  const PoolSpec spec{2, 2, 2};
  switch (kind) {
    case CheckKind::kConv: {
      const Dims4 xd{1 + rng.below(2), 1 + rng.below(2), 3 + rng.below(2), 3 + rng.below(2)};
      const std::size_t out_c = 1 + rng.below(3);
      const std::size_t filter = rng.below(2) ? 3 : 1;
      Rng wrng(rng.next_u64());
      ConvLayer layer = make_conv_layer(xd.channels, out_c, filter, filter, wrng);
      Tensor4 x = random_tensor(rng, xd);
      Tensor4 proj = random_tensor(rng, conv2d_forward(x, layer).dims());
      const auto loss = [&](const Tensor4& xin) {
        const Tensor4 y = conv2d_forward(xin, layer);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * proj.data()[i];
        return s;
      };
      ConvGrads g = conv2d_backward(proj, x, layer);
      cmp.block("dx", g.dx.values(), numeric_grad(loss, x, h).values());
      cmp.block("dW", g.dweights, numeric_grad_params([&] { return loss(x); }, layer.weights, h));
      cmp.block("db", g.dbias, numeric_grad_params([&] { return loss(x); }, layer.bias, h));
      break;
    }
    case CheckKind::kDense: {
      const std::size_t in = 3 + rng.below(4), out = 2 + rng.below(3);
      const Dims4 xd{1 + rng.below(2), in, 1, 1};
      Rng wrng(rng.next_u64());
      DenseLayer layer = make_dense_layer(in, out, wrng);
      Tensor4 x = random_tensor(rng, xd);
      Tensor4 proj = random_tensor(rng, {xd.batch, out, 1, 1});
      const auto loss = [&](const Tensor4& xin) {
        const Tensor4 y = dense_forward(xin, layer);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * proj.data()[i];
        return s;
      };
      DenseGrads g = dense_backward(proj, x, layer);
      cmp.block("dx", g.dx.values(), numeric_grad(loss, x, h).values());
      cmp.block("dW", g.dweights, numeric_grad_params([&] { return loss(x); }, layer.weights, h));
      cmp.block("db", g.dbias, numeric_grad_params([&] { return loss(x); }, layer.bias, h));
      break;
    }
    case CheckKind::kRelu: {
      const Dims4 xd{1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4)};
      // Inputs bounded away from the kink at 0.
      Tensor4 x(xd);
      for (double& v : x.values()) {
        v = rng.uniform(0.1, 1.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
      }
      Tensor4 proj = random_tensor(rng, xd);
      const auto loss = [&](const Tensor4& xin) {
        const Tensor4 y = relu_forward(xin).y;
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * proj.data()[i];
        return s;
      };
      const ReluResult fwd = relu_forward(x);
      cmp.block("dx", relu_backward(proj, fwd.mask).values(), numeric_grad(loss, x, h).values());
      break;
    }
    case CheckKind::kDropout: {
      const Dims4 xd{1 + rng.below(2), 2 + rng.below(2), 1 + rng.below(4), 1 + rng.below(4)};
      const double keep = 0.7;
      const std::uint64_t seed = rng.next_u64();
      Tensor4 x = random_tensor(rng, xd);
      Tensor4 proj = random_tensor(rng, xd);
      // The mask depends only on (seed, element count), so the oracle sees a
      // fixed mask across perturbations.
      const auto loss = [&](const Tensor4& xin) {
        const Tensor4 y = dropout_forward(xin, keep, seed).y;
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * proj.data()[i];
        return s;
      };
      const DropoutResult fwd = dropout_forward(x, keep, seed);
      cmp.block("dx", dropout_backward(proj, fwd.mask, keep).values(),
                numeric_grad(loss, x, h).values());
      break;
    }
    case CheckKind::kSoftmaxXent: {
      const std::size_t classes = 3 + rng.below(3);
      const Dims4 xd{1 + rng.below(2), classes, 1, 1};
      Tensor4 logits = random_tensor(rng, xd);
      std::vector<int> labels(xd.batch);
      for (int& l : labels) l = static_cast<int>(rng.below(classes));
      const auto loss = [&](const Tensor4& lg) { return softmax_xent_forward(lg, labels).loss; };
      const SoftmaxXentResult fwd = softmax_xent_forward(logits, labels);
      cmp.block("dlogits", softmax_xent_backward(fwd.probs, labels).values(),
                numeric_grad(loss, logits, h).values());
      break;
    }
    case CheckKind::kAvgPool: {
      const Dims4 xd = random_pool_dims(rng);
      Tensor4 x = random_tensor(rng, xd);
      Tensor4 proj = random_tensor(rng, avg_pool_forward(x, spec).dims());
      const auto loss = [&](const Tensor4& xin) {
        const Tensor4 y = avg_pool_forward(xin, spec);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * proj.data()[i];
        return s;
      };
      cmp.block("dx", avg_pool_backward(proj, spec, xd).values(),
                numeric_grad(loss, x, h).values());
      break;
    }
    case CheckKind::kMaxPool: {
      const Dims4 xd = random_pool_dims(rng);
      Tensor4 x = tie_free_tensor(rng, xd, spec, h);
      auto [y, cache] = max_pool_forward(x, spec);
      Tensor4 proj = random_tensor(rng, y.dims());
      const auto loss = [&](const Tensor4& xin) {
        const Tensor4 yy = max_pool_forward(xin, spec).first;
        double s = 0.0;
        for (std::size_t i = 0; i < yy.size(); ++i) s += yy.data()[i] * proj.data()[i];
        return s;
      };
      cmp.block("dx", max_pool_backward(proj, cache, xd).values(),
                numeric_grad(loss, x, h).values());
      break;
    }
    case CheckKind::kLbpn: {
      const Dims4 xd = random_pool_dims(rng);
      LocationWeights w(xd.channels, spec.region_size());
      for (double& v : w.w) v = rng.gaussian() * 0.5;
      Tensor4 x = random_tensor(rng, xd);
      Tensor4 proj = random_tensor(rng, lbpn_forward(x, spec, w).dims());
      const auto loss = [&](const Tensor4& xin) {
        const Tensor4 y = lbpn_forward(xin, spec, w);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * proj.data()[i];
        return s;
      };
      LbpnGrads g = lbpn_backward(proj, x, spec, w);
      cmp.block("dx", g.dx.values(), numeric_grad(loss, x, h).values());
      cmp.block("dW", g.dw.w, numeric_grad_params([&] { return loss(x); }, w.w, h));
      break;
    }
    case CheckKind::kOpn: {
      const Dims4 xd = random_pool_dims(rng);
      RankWeights w(xd.channels, spec.region_size());
      for (double& v : w.w) v = rng.gaussian() * 0.5;
      Tensor4 x = tie_free_tensor(rng, xd, spec, h);
      OpnForwardResult fwd = opn_forward(x, spec, w);
      Tensor4 proj = random_tensor(rng, fwd.y.dims());
      const auto loss = [&](const Tensor4& xin) {
        const Tensor4 y = opn_forward(xin, spec, w).y;
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * proj.data()[i];
        return s;
      };
      OpnGrads g = opn_backward(proj, x, fwd.perms, w);
      cmp.block("dx", g.dx.values(), numeric_grad(loss, x, h).values());
      cmp.block("dW", g.dw.w, numeric_grad_params([&] { return loss(x); }, w.w, h));
      break;
    }
    case CheckKind::kOpnSoftmax: {
      const Dims4 xd = random_pool_dims(rng);
      RankWeights theta(xd.channels, spec.region_size());
      for (double& v : theta.w) v = rng.gaussian() * 0.5;
      Tensor4 x = tie_free_tensor(rng, xd, spec, h);
      OpnSoftmaxForwardResult fwd = opn_softmax_forward(x, spec, theta);
      Tensor4 proj = random_tensor(rng, fwd.y.dims());
      const auto loss = [&](const Tensor4& xin) {
        const Tensor4 y = opn_softmax_forward(xin, spec, theta).y;
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * proj.data()[i];
        return s;
      };
      OpnSoftmaxGrads g = opn_softmax_backward(proj, x, fwd.perms, theta, fwd.w_effective);
      cmp.block("dx", g.dx.values(), numeric_grad(loss, x, h).values());
      cmp.block("dTheta", g.dtheta.w,
                numeric_grad_params([&] { return loss(x); }, theta.w, h));
      break;
    }
  }
}

}  // namespace

GradReport check_layer(CheckKind kind, std::size_t trials, double h, double tolerance,
                       std::uint64_t seed) {
  if (trials == 0) throw ConfigError("check_layer: trials must be >= 1");
  GradReport report{to_string(kind), trials, h, tolerance, 0.0, "", false};
  Rng rng(seed ^ (static_cast<std::uint64_t>(kind) * 0x9E3779B97F4A7C15ULL));
  Comparator cmp{report, 0};
  for (std::size_t t = 0; t < trials; ++t) {
    cmp.trial = t;
    check_trial(kind, h, cmp, rng);
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

std::vector<GradReport> check_all_layers(std::size_t trials, double h, double tolerance,
                                         std::uint64_t seed) {
  std::vector<GradReport> reports;
  for (CheckKind kind : all_check_kinds()) {
    reports.push_back(check_layer(kind, trials, h, tolerance, seed));
  }
  return reports;
}

}  // namespace opn
