#include "opn/layers.hpp"

#include <cblas.h>

#include <cmath>
#include <cstring>

namespace opn {

namespace {

// C (m x n) = A (m x k) * B (k x n) [+ C], all row-major.
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
            std::size_t k, bool trans_a, bool trans_b, double beta) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(trans_a ? m : k), b,
              static_cast<int>(trans_b ? k : n), beta, c, static_cast<int>(n));
}

struct ConvShape {
  std::size_t pad_top, pad_left;
  std::size_t k;        // in_channels * fh * fw
  std::size_t spatial;  // h * w (output == input, same padding)
};

ConvShape conv_shape(const Dims4& xd, const ConvLayer& l) {
  if (xd.channels != l.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(xd.channels) + " channels, layer expects " +
                     std::to_string(l.in_channels));
  }
  if (l.weights.size() != l.weight_count() || l.bias.size() != l.out_channels) {
    throw ShapeError("conv2d: layer parameter arrays do not match its dims");
  }
  return {(l.filter_h - 1) / 2, (l.filter_w - 1) / 2, l.in_channels * l.filter_h * l.filter_w,
          xd.height * xd.width};
}

// Expands one batch item into a (k x spatial) patch matrix; out-of-image taps
// are zero. Row index = (c, u, v) of the filter tap, column = output pixel.
void im2col(const double* x, const Dims4& xd, const ConvLayer& l, const ConvShape& cs,
            double* cols) {
  const std::size_t h = xd.height, w = xd.width;
  for (std::size_t c = 0; c < l.in_channels; ++c) {
    const double* plane = x + c * h * w;
    for (std::size_t u = 0; u < l.filter_h; ++u) {
      for (std::size_t v = 0; v < l.filter_w; ++v) {
        double* row = cols + ((c * l.filter_h + u) * l.filter_w + v) * cs.spatial;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(u) - static_cast<std::ptrdiff_t>(cs.pad_top);
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(v) - static_cast<std::ptrdiff_t>(cs.pad_left);
        for (std::size_t i = 0; i < h; ++i) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + dy;
          double* out_row = row + i * w;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) {
            std::memset(out_row, 0, w * sizeof(double));
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(si) * w;
          for (std::size_t j = 0; j < w; ++j) {
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dx;
            out_row[j] = (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w))
                             ? 0.0
                             : src[static_cast<std::size_t>(sj)];
          }
        }
      }
    }
  }
}

// Transpose of im2col: accumulates the patch matrix back into an image.
void col2im_accumulate(const double* cols, const Dims4& xd, const ConvLayer& l,
                       const ConvShape& cs, double* x) {
  const std::size_t h = xd.height, w = xd.width;
  for (std::size_t c = 0; c < l.in_channels; ++c) {
    double* plane = x + c * h * w;
    for (std::size_t u = 0; u < l.filter_h; ++u) {
      for (std::size_t v = 0; v < l.filter_w; ++v) {
        const double* row = cols + ((c * l.filter_h + u) * l.filter_w + v) * cs.spatial;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(u) - static_cast<std::ptrdiff_t>(cs.pad_top);
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(v) - static_cast<std::ptrdiff_t>(cs.pad_left);
        for (std::size_t i = 0; i < h; ++i) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + dy;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
          double* dst = plane + static_cast<std::size_t>(si) * w;
          const double* src_row = row + i * w;
          for (std::size_t j = 0; j < w; ++j) {
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dx;
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
            dst[static_cast<std::size_t>(sj)] += src_row[j];
          }
        }
      }
    }
  }
}

}  // namespace

ConvLayer make_conv_layer(std::size_t in_channels, std::size_t out_channels,
                          std::size_t filter_h, std::size_t filter_w, Rng& rng) {
  ConvLayer l{in_channels, out_channels, filter_h, filter_w, {}, {}};
  const double stddev = std::sqrt(2.0 / static_cast<double>(in_channels * filter_h * filter_w));
  l.weights.resize(l.weight_count());
  for (double& w : l.weights) w = stddev * rng.gaussian();
  l.bias.assign(out_channels, 0.1);
  return l;
}

Tensor4 conv2d_forward(const Tensor4& x, const ConvLayer& layer) {
  const Dims4 xd = x.dims();
  const ConvShape cs = conv_shape(xd, layer);
  Tensor4 y({xd.batch, layer.out_channels, xd.height, xd.width});
  std::vector<double> cols(cs.k * cs.spatial);
  for (std::size_t b = 0; b < xd.batch; ++b) {
    im2col(x.data() + b * xd.channels * cs.spatial, xd, layer, cs, cols.data());
    double* yb = y.data() + b * layer.out_channels * cs.spatial;
    // (out x k) * (k x spatial) -> (out x spatial), exactly this item's layout.
    matmul(layer.weights.data(), cols.data(), yb, layer.out_channels, cs.spatial, cs.k, false,
           false, 0.0);
    for (std::size_t o = 0; o < layer.out_channels; ++o) {
      double* plane = yb + o * cs.spatial;
      const double bias = layer.bias[o];
      for (std::size_t s = 0; s < cs.spatial; ++s) plane[s] += bias;
    }
  }
  return y;
}

ConvGrads conv2d_backward(const Tensor4& dy, const Tensor4& x, const ConvLayer& layer) {
  const Dims4 xd = x.dims();
  const ConvShape cs = conv_shape(xd, layer);
  if (!(dy.dims() == Dims4{xd.batch, layer.out_channels, xd.height, xd.width})) {
    throw ShapeError("conv2d_backward: dy dims " + to_string(dy.dims()) +
                     " do not match forward output");
  }
  ConvGrads g{Tensor4(xd, 0.0), std::vector<double>(layer.weights.size(), 0.0),
              std::vector<double>(layer.out_channels, 0.0)};
  std::vector<double> cols(cs.k * cs.spatial);
  std::vector<double> dcols(cs.k * cs.spatial);
  for (std::size_t b = 0; b < xd.batch; ++b) {
    const double* dyb = dy.data() + b * layer.out_channels * cs.spatial;
    im2col(x.data() + b * xd.channels * cs.spatial, xd, layer, cs, cols.data());
    // dW += dy_b (out x spatial) * cols^T (spatial x k)
    matmul(dyb, cols.data(), g.dweights.data(), layer.out_channels, cs.k, cs.spatial, false,
           true, 1.0);
    // dcols = W^T (k x out) * dy_b (out x spatial)
    matmul(layer.weights.data(), dyb, dcols.data(), cs.k, cs.spatial, layer.out_channels, true,
           false, 0.0);
    col2im_accumulate(dcols.data(), xd, layer, cs, g.dx.data() + b * xd.channels * cs.spatial);
    for (std::size_t o = 0; o < layer.out_channels; ++o) {
      const double* plane = dyb + o * cs.spatial;
      double s = 0.0;
      for (std::size_t i = 0; i < cs.spatial; ++i) s += plane[i];
      g.dbias[o] += s;
    }
  }
  return g;
}

ReluResult relu_forward(const Tensor4& x) {
  ReluResult r{Tensor4(x.dims()), std::vector<std::uint8_t>(x.size())};
  const double* px = x.data();
  double* py = r.y.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool keep = px[i] > 0.0;
    r.mask[i] = keep;
    py[i] = keep ? px[i] : 0.0;
  }
  return r;
}

Tensor4 relu_backward(const Tensor4& dy, const std::vector<std::uint8_t>& mask) {
  if (mask.size() != dy.size()) {
    throw ShapeError("relu_backward: mask size does not match dy");
  }
  Tensor4 dx(dy.dims());
  const double* pdy = dy.data();
  double* pdx = dx.data();
  for (std::size_t i = 0; i < dy.size(); ++i) pdx[i] = mask[i] ? pdy[i] : 0.0;
  return dx;
}

DenseLayer make_dense_layer(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  DenseLayer l{in_dim, out_dim, std::vector<double>(in_dim * out_dim), {}};
  const double stddev = std::sqrt(2.0 / static_cast<double>(in_dim));
  for (double& w : l.weights) w = stddev * rng.gaussian();
  l.bias.assign(out_dim, 0.1);
  return l;
}

namespace {

void require_dense_input(const Tensor4& x, const DenseLayer& l, const char* what) {
  if (x.dims().channels != l.in_dim || x.dims().height != 1 || x.dims().width != 1) {
    throw ShapeError(std::string(what) + ": input dims " + to_string(x.dims()) +
                     " do not match in_dim " + std::to_string(l.in_dim));
  }
  if (l.weights.size() != l.in_dim * l.out_dim || l.bias.size() != l.out_dim) {
    throw ShapeError(std::string(what) + ": layer parameter arrays do not match its dims");
  }
}

}  // namespace

Tensor4 dense_forward(const Tensor4& x, const DenseLayer& layer) {
  require_dense_input(x, layer, "dense_forward");
  const std::size_t batch = x.dims().batch;
  Tensor4 y({batch, layer.out_dim, 1, 1});
  // y (B x out) = x (B x in) * W^T (in x out)
  matmul(x.data(), layer.weights.data(), y.data(), batch, layer.out_dim, layer.in_dim, false,
         true, 0.0);
  double* py = y.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < layer.out_dim; ++o) py[b * layer.out_dim + o] += layer.bias[o];
  }
  return y;
}

DenseGrads dense_backward(const Tensor4& dy, const Tensor4& x, const DenseLayer& layer) {
  require_dense_input(x, layer, "dense_backward");
  const std::size_t batch = x.dims().batch;
  if (!(dy.dims() == Dims4{batch, layer.out_dim, 1, 1})) {
    throw ShapeError("dense_backward: dy dims " + to_string(dy.dims()) +
                     " do not match forward output");
  }
  DenseGrads g{Tensor4(x.dims()), std::vector<double>(layer.weights.size()),
               std::vector<double>(layer.out_dim, 0.0)};
  // dx (B x in) = dy (B x out) * W (out x in)
  matmul(dy.data(), layer.weights.data(), g.dx.data(), batch, layer.in_dim, layer.out_dim,
         false, false, 0.0);
  // dW (out x in) = dy^T (out x B) * x (B x in)
  matmul(dy.data(), x.data(), g.dweights.data(), layer.out_dim, layer.in_dim, batch, true,
         false, 0.0);
  const double* pdy = dy.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < layer.out_dim; ++o) g.dbias[o] += pdy[b * layer.out_dim + o];
  }
  return g;
}

DropoutResult dropout_forward(const Tensor4& x, double keep_prob, std::uint64_t seed) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw ConfigError("dropout: keep_prob must be in (0, 1], got " + std::to_string(keep_prob));
  }
  DropoutResult r{Tensor4(x.dims()), std::vector<std::uint8_t>(x.size(), 1)};
  const double* px = x.data();
  double* py = r.y.data();
  if (keep_prob == 1.0) {
    std::memcpy(py, px, x.size() * sizeof(double));
    return r;
  }
  Rng rng(seed);
  const double inv_keep = 1.0 / keep_prob;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool keep = rng.bernoulli(keep_prob);
    r.mask[i] = keep;
    py[i] = keep ? px[i] * inv_keep : 0.0;
  }
  return r;
}

Tensor4 dropout_backward(const Tensor4& dy, const std::vector<std::uint8_t>& mask,
                         double keep_prob) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw ConfigError("dropout: keep_prob must be in (0, 1], got " + std::to_string(keep_prob));
  }
  if (mask.size() != dy.size()) {
    throw ShapeError("dropout_backward: mask size does not match dy");
  }
  Tensor4 dx(dy.dims());
  const double inv_keep = 1.0 / keep_prob;
  const double* pdy = dy.data();
  double* pdx = dx.data();
  for (std::size_t i = 0; i < dy.size(); ++i) pdx[i] = mask[i] ? pdy[i] * inv_keep : 0.0;
  return dx;
}

SoftmaxXentResult softmax_xent_forward(const Tensor4& logits, std::span<const int> labels) {
  const std::size_t batch = logits.dims().batch;
  const std::size_t classes = logits.dims().channels;
  if (logits.dims().height != 1 || logits.dims().width != 1) {
    throw ShapeError("softmax_xent: logits must be (B, classes, 1, 1), got " +
                     to_string(logits.dims()));
  }
  if (labels.size() != batch) {
    throw ShapeError("softmax_xent: expected one label per batch item");
  }
  SoftmaxXentResult r{0.0, Tensor4(logits.dims())};
  const double* pl = logits.data();
  double* pp = r.probs.data();
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw DataError("softmax_xent: label " + std::to_string(label) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
    const double* row = pl + b * classes;
    double* out = pp + b * classes;
    double m = row[0];
    for (std::size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      out[c] = std::exp(row[c] - m);
      z += out[c];
    }
    for (std::size_t c = 0; c < classes; ++c) out[c] /= z;
    loss -= std::log(out[static_cast<std::size_t>(label)]);
  }
  r.loss = loss / static_cast<double>(batch);
  return r;
}

Tensor4 softmax_xent_backward(const Tensor4& probs, std::span<const int> labels) {
  const std::size_t batch = probs.dims().batch;
  const std::size_t classes = probs.dims().channels;
  if (labels.size() != batch) {
    throw ShapeError("softmax_xent_backward: expected one label per batch item");
  }
  Tensor4 dlogits(probs.dims());
  const double inv_b = 1.0 / static_cast<double>(batch);
  const double* pp = probs.data();
  double* pd = dlogits.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw DataError("softmax_xent_backward: label out of range");
    }
    for (std::size_t c = 0; c < classes; ++c) {
      const double onehot = (static_cast<std::size_t>(label) == c) ? 1.0 : 0.0;
      pd[b * classes + c] = (pp[b * classes + c] - onehot) * inv_b;
    }
  }
  return dlogits;
}

}  // namespace opn
