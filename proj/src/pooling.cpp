#include "opn/pooling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace opn {

std::pair<std::size_t, std::size_t> PoolSpec::output_hw(std::size_t h, std::size_t w) const {
  return {(h - filter_h) / stride + 1, (w - filter_w) / stride + 1};
}

void PoolSpec::require_tiles(const Dims4& in) const {
  if (filter_h == 0 || filter_w == 0 || stride == 0) {
    throw ShapeError("PoolSpec: filter and stride must be >= 1");
  }
  const bool fits = filter_h <= in.height && filter_w <= in.width;
  const bool steps = fits && (in.height - filter_h) % stride == 0 &&
                     (in.width - filter_w) % stride == 0;
  // With filter == stride the windows must also cover the input exactly.
  const bool covers = steps && (!non_overlapping() ||
                                (in.height % stride == 0 && in.width % stride == 0));
  if (!fits || !steps || !covers) {
    throw ShapeError("PoolSpec " + std::to_string(filter_h) + "x" + std::to_string(filter_w) +
                     "/" + std::to_string(stride) + " does not tile input " + to_string(in));
  }
}

void PoolSpec::require_non_overlapping() const {
  if (!non_overlapping()) {
    throw ShapeError("learned pooling requires filter == stride, got " +
                     std::to_string(filter_h) + "x" + std::to_string(filter_w) + "/" +
                     std::to_string(stride));
  }
}

PoolKind parse_pool_kind(const std::string& name) {
  if (name == "max") return PoolKind::kMax;
  if (name == "avg") return PoolKind::kAvg;
  if (name == "lbpn") return PoolKind::kLbpn;
  if (name == "opn") return PoolKind::kOpn;
  if (name == "opn_softmax") return PoolKind::kOpnSoftmax;
  throw ConfigError("unknown pooling kind '" + name +
                    "' (expected max, avg, lbpn, opn, opn_softmax)");
}

std::string to_string(PoolKind kind) {
  switch (kind) {
    case PoolKind::kMax: return "max";
    case PoolKind::kAvg: return "avg";
    case PoolKind::kLbpn: return "lbpn";
    case PoolKind::kOpn: return "opn";
    case PoolKind::kOpnSoftmax: return "opn_softmax";
  }
  return "?";
}

bool pool_kind_has_weights(PoolKind kind) {
  return kind == PoolKind::kLbpn || kind == PoolKind::kOpn || kind == PoolKind::kOpnSoftmax;
}

namespace {

Dims4 pooled_dims(const Tensor4& x, const PoolSpec& spec) {
  spec.require_tiles(x.dims());
  auto [oh, ow] = spec.output_hw(x.dims().height, x.dims().width);
  return {x.dims().batch, x.dims().channels, oh, ow};
}

void require_channel_weights(std::size_t channels, std::size_t k, std::size_t w_channels,
                             std::size_t w_k, const char* what) {
  if (w_channels != channels || w_k != k) {
    throw ShapeError(std::string(what) + ": weights are " + std::to_string(w_channels) + "x" +
                     std::to_string(w_k) + ", input needs " + std::to_string(channels) + "x" +
                     std::to_string(k));
  }
}

void require_dy(const Tensor4& dy, const Dims4& expect, const char* what) {
  if (!(dy.dims() == expect)) {
    throw ShapeError(std::string(what) + ": dy dims " + to_string(dy.dims()) +
                     " do not match forward output " + to_string(expect));
  }
}

// Iterates all pooling regions of x, invoking fn(b, c, flat_out_index,
// region_values, region_input_offsets).
template <typename F>
void for_each_region(const Dims4& xd, const PoolSpec& spec, F fn) {
  const auto [oh, ow] = spec.output_hw(xd.height, xd.width);
  std::vector<std::size_t> offs(spec.region_size());
  std::size_t out_index = 0;
  for (std::size_t b = 0; b < xd.batch; ++b) {
    for (std::size_t c = 0; c < xd.channels; ++c) {
      const std::size_t plane = (b * xd.channels + c) * xd.height * xd.width;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          std::size_t p = 0;
          for (std::size_t u = 0; u < spec.filter_h; ++u) {
            const std::size_t row = plane + (i * spec.stride + u) * xd.width + j * spec.stride;
            for (std::size_t v = 0; v < spec.filter_w; ++v, ++p) offs[p] = row + v;
          }
          fn(b, c, out_index++, offs);
        }
      }
    }
  }
}

// Stable descending insertion sort of region positions; no allocation.
void rank_into(const double* vals, std::size_t k, std::uint32_t* out) {
  for (std::size_t i = 0; i < k; ++i) {
    const double v = vals[i];
    if (std::isnan(v)) throw NumericError("rank_region: NaN activation");
    std::size_t pos = i;
    while (pos > 0 && vals[out[pos - 1]] < v) {
      out[pos] = out[pos - 1];
      --pos;
    }
    out[pos] = static_cast<std::uint32_t>(i);
  }
}

}  // namespace

Tensor4 avg_pool_forward(const Tensor4& x, const PoolSpec& spec) {
  Tensor4 y(pooled_dims(x, spec));
  const double inv_k = 1.0 / static_cast<double>(spec.region_size());
  const double* px = x.data();
  double* py = y.data();
  for_each_region(x.dims(), spec, [&](std::size_t, std::size_t, std::size_t out,
                                      const std::vector<std::size_t>& offs) {
    double s = 0.0;
    for (std::size_t o : offs) s += px[o];
    py[out] = s * inv_k;
  });
  return y;
}

Tensor4 avg_pool_backward(const Tensor4& dy, const PoolSpec& spec, const Dims4& x_dims) {
  spec.require_tiles(x_dims);
  auto [oh, ow] = spec.output_hw(x_dims.height, x_dims.width);
  require_dy(dy, {x_dims.batch, x_dims.channels, oh, ow}, "avg_pool_backward");
  Tensor4 dx(x_dims, 0.0);
  const double inv_k = 1.0 / static_cast<double>(spec.region_size());
  const double* pdy = dy.data();
  double* pdx = dx.data();
  for_each_region(x_dims, spec, [&](std::size_t, std::size_t, std::size_t out,
                                    const std::vector<std::size_t>& offs) {
    const double g = pdy[out] * inv_k;
    for (std::size_t o : offs) pdx[o] += g;
  });
  return dx;
}

std::pair<Tensor4, ArgmaxCache> max_pool_forward(const Tensor4& x, const PoolSpec& spec) {
  Tensor4 y(pooled_dims(x, spec));
  ArgmaxCache cache{y.dims(), spec, std::vector<std::uint32_t>(y.size())};
  const double* px = x.data();
  double* py = y.data();
  for_each_region(x.dims(), spec, [&](std::size_t, std::size_t, std::size_t out,
                                      const std::vector<std::size_t>& offs) {
    double best = px[offs[0]];
    std::uint32_t best_p = 0;
    for (std::size_t p = 1; p < offs.size(); ++p) {
      if (px[offs[p]] > best) {
        best = px[offs[p]];
        best_p = static_cast<std::uint32_t>(p);
      }
    }
    py[out] = best;
    cache.argmax[out] = best_p;
  });
  return {std::move(y), std::move(cache)};
}

Tensor4 max_pool_backward(const Tensor4& dy, const ArgmaxCache& cache, const Dims4& x_dims) {
  cache.spec.require_tiles(x_dims);
  require_dy(dy, cache.out_dims, "max_pool_backward");
  if (cache.argmax.size() != dy.size()) {
    throw ShapeError("max_pool_backward: cache does not match dy");
  }
  Tensor4 dx(x_dims, 0.0);
  const double* pdy = dy.data();
  double* pdx = dx.data();
  for_each_region(x_dims, cache.spec, [&](std::size_t, std::size_t, std::size_t out,
                                          const std::vector<std::size_t>& offs) {
    pdx[offs[cache.argmax[out]]] += pdy[out];
  });
  return dx;
}

Tensor4 lbpn_forward(const Tensor4& x, const PoolSpec& spec, const LocationWeights& w) {
  spec.require_non_overlapping();
  Tensor4 y(pooled_dims(x, spec));
  require_channel_weights(x.dims().channels, spec.region_size(), w.channels, w.k, "lbpn_forward");
  const double* px = x.data();
  double* py = y.data();
  for_each_region(x.dims(), spec, [&](std::size_t, std::size_t c, std::size_t out,
                                      const std::vector<std::size_t>& offs) {
    const double* wc = w.w.data() + c * w.k;
    double s = 0.0;
    for (std::size_t p = 0; p < offs.size(); ++p) s += wc[p] * px[offs[p]];
    py[out] = s;
  });
  return y;
}

LbpnGrads lbpn_backward(const Tensor4& dy, const Tensor4& x, const PoolSpec& spec,
                        const LocationWeights& w) {
  spec.require_non_overlapping();
  require_dy(dy, pooled_dims(x, spec), "lbpn_backward");
  require_channel_weights(x.dims().channels, spec.region_size(), w.channels, w.k,
                          "lbpn_backward");
  LbpnGrads g{Tensor4(x.dims(), 0.0), LocationWeights(w.channels, w.k, 0.0)};
  const double* px = x.data();
  const double* pdy = dy.data();
  double* pdx = g.dx.data();
  for_each_region(x.dims(), spec, [&](std::size_t, std::size_t c, std::size_t out,
                                      const std::vector<std::size_t>& offs) {
    const double gy = pdy[out];
    const double* wc = w.w.data() + c * w.k;
    double* dwc = g.dw.w.data() + c * w.k;
    for (std::size_t p = 0; p < offs.size(); ++p) {
      pdx[offs[p]] += wc[p] * gy;
      dwc[p] += px[offs[p]] * gy;
    }
  });
  return g;
}

std::vector<std::uint32_t> rank_region(std::span<const double> region) {
  if (region.empty()) throw ShapeError("rank_region: empty region");
  std::vector<std::uint32_t> out(region.size());
  rank_into(region.data(), region.size(), out.data());
  return out;
}

OpnForwardResult opn_forward(const Tensor4& x, const PoolSpec& spec, const RankWeights& w) {
  spec.require_non_overlapping();
  Tensor4 y(pooled_dims(x, spec));
  const std::size_t k = spec.region_size();
  require_channel_weights(x.dims().channels, k, w.channels, w.k, "opn_forward");
  RankPermutation perms{y.dims(), spec, k, std::vector<std::uint32_t>(y.size() * k)};
  const double* px = x.data();
  double* py = y.data();
  std::vector<double> vals(k);
  for_each_region(x.dims(), spec, [&](std::size_t, std::size_t c, std::size_t out,
                                      const std::vector<std::size_t>& offs) {
    for (std::size_t p = 0; p < k; ++p) vals[p] = px[offs[p]];
    std::uint32_t* perm = perms.perm.data() + out * k;
    rank_into(vals.data(), k, perm);
    const double* wc = w.w.data() + c * k;
    double s = 0.0;
    for (std::size_t r = 0; r < k; ++r) s += wc[r] * vals[perm[r]];
    py[out] = s;
  });
  return {std::move(y), std::move(perms)};
}

OpnGrads opn_backward(const Tensor4& dy, const Tensor4& x, const RankPermutation& perms,
                      const RankWeights& w) {
  require_dy(dy, perms.out_dims, "opn_backward");
  const std::size_t k = perms.k;
  require_channel_weights(x.dims().channels, k, w.channels, w.k, "opn_backward");
  if (perms.perm.size() != dy.size() * k || !(perms.out_dims == pooled_dims(x, perms.spec))) {
    throw ShapeError("opn_backward: permutation cache does not match inputs");
  }
  OpnGrads g{Tensor4(x.dims(), 0.0), RankWeights(w.channels, w.k, 0.0)};
  const double* px = x.data();
  const double* pdy = dy.data();
  double* pdx = g.dx.data();
  for_each_region(x.dims(), perms.spec, [&](std::size_t, std::size_t c, std::size_t out,
                                            const std::vector<std::size_t>& offs) {
    const double gy = pdy[out];
    const std::uint32_t* perm = perms.perm.data() + out * k;
    const double* wc = w.w.data() + c * k;
    double* dwc = g.dw.w.data() + c * k;
    for (std::size_t r = 0; r < k; ++r) {
      pdx[offs[perm[r]]] += wc[r] * gy;
      dwc[r] += px[offs[perm[r]]] * gy;
    }
  });
  return g;
}

RankWeights softmax_rows(const RankWeights& theta) {
  RankWeights w(theta.channels, theta.k);
  for (std::size_t c = 0; c < theta.channels; ++c) {
    const double* t = theta.w.data() + c * theta.k;
    double* o = w.w.data() + c * theta.k;
    double m = t[0];
    for (std::size_t r = 1; r < theta.k; ++r) m = std::max(m, t[r]);
    double z = 0.0;
    for (std::size_t r = 0; r < theta.k; ++r) {
      o[r] = std::exp(t[r] - m);
      z += o[r];
    }
    for (std::size_t r = 0; r < theta.k; ++r) o[r] /= z;
  }
  return w;
}

OpnSoftmaxForwardResult opn_softmax_forward(const Tensor4& x, const PoolSpec& spec,
                                            const RankWeights& theta) {
  RankWeights w = softmax_rows(theta);
  auto fwd = opn_forward(x, spec, w);
  return {std::move(fwd.y), std::move(fwd.perms), std::move(w)};
}

OpnSoftmaxGrads opn_softmax_backward(const Tensor4& dy, const Tensor4& x,
                                     const RankPermutation& perms, const RankWeights& theta,
                                     const RankWeights& w_effective) {
  require_channel_weights(w_effective.channels, w_effective.k, theta.channels, theta.k,
                          "opn_softmax_backward");
  OpnGrads raw = opn_backward(dy, x, perms, w_effective);
  // Chain rule through the row softmax:
  //   dtheta_r = w_r * (dw_r - sum_s w_s dw_s)
  OpnSoftmaxGrads g{std::move(raw.dx), RankWeights(theta.channels, theta.k)};
  for (std::size_t c = 0; c < theta.channels; ++c) {
    const double* wc = w_effective.w.data() + c * theta.k;
    const double* dwc = raw.dw.w.data() + c * theta.k;
    double* dtc = g.dtheta.w.data() + c * theta.k;
    double dot = 0.0;
    for (std::size_t r = 0; r < theta.k; ++r) dot += wc[r] * dwc[r];
    for (std::size_t r = 0; r < theta.k; ++r) dtc[r] = wc[r] * (dwc[r] - dot);
  }
  return g;
}

RankWeights init_rank_weights(std::size_t channels, std::size_t k) {
  RankWeights w(channels, k);
  const double denom = static_cast<double>(k) * static_cast<double>(k + 1);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t r = 0; r < k; ++r) {
      w.at(c, r) = 2.0 * static_cast<double>(k - r) / denom;
    }
  }
  return w;
}

LocationWeights init_location_weights(std::size_t channels, std::size_t k) {
  return LocationWeights(channels, k, 1.0 / static_cast<double>(k));
}

RankWeights init_rank_logits(std::size_t channels, std::size_t k) {
  RankWeights theta = init_rank_weights(channels, k);
  for (double& v : theta.w) v = std::log(v);
  return theta;
}

std::size_t pooling_param_count(PoolKind kind, std::size_t channels, const PoolSpec& spec) {
  return pool_kind_has_weights(kind) ? spec.region_size() * channels : 0;
}

std::size_t conv_equivalent_param_count(std::size_t region_size, std::size_t channels) {
  return region_size * channels * channels + channels;
}

double strictly_decreasing_fraction(const RankWeights& w) {
  if (w.channels == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t c = 0; c < w.channels; ++c) {
    bool decreasing = true;
    for (std::size_t r = 1; r < w.k; ++r) {
      if (!(w.at(c, r) < w.at(c, r - 1))) {
        decreasing = false;
        break;
      }
    }
    hits += decreasing;
  }
  return static_cast<double>(hits) / static_cast<double>(w.channels);
}

void write_weights_csv(std::ostream& os, std::size_t layer, std::size_t channels, std::size_t k,
                       std::span<const double> w) {
  os << "layer,channel,rank,weight\n";
  char buf[32];
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t r = 0; r < k; ++r) {
      std::snprintf(buf, sizeof buf, "%.17g", w[c * k + r]);
      os << layer << "," << c << "," << r << "," << buf << "\n";
    }
  }
}

void write_weights_csv(std::ostream& os, std::size_t layer, const RankWeights& w) {
  write_weights_csv(os, layer, w.channels, w.k, w.w);
}

void write_weights_csv(std::ostream& os, std::size_t layer, const LocationWeights& w) {
  write_weights_csv(os, layer, w.channels, w.k, w.w);
}

}  // namespace opn
