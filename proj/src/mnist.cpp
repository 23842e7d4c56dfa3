#include "opn/mnist.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace opn {

namespace {

std::uint32_t read_be32(std::span<const unsigned char> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) {
    throw FormatError("IDX: truncated header");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

}  // namespace

Tensor4 parse_idx_images(std::span<const unsigned char> bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxImagesMagic) {
    throw FormatError("IDX images: bad magic " + std::to_string(magic));
  }
  const std::size_t n = read_be32(bytes, 4);
  const std::size_t h = read_be32(bytes, 8);
  const std::size_t w = read_be32(bytes, 12);
  if (n == 0 || h == 0 || w == 0) {
    throw FormatError("IDX images: zero count in header");
  }
  const std::size_t payload = n * h * w;
  if (bytes.size() != 16 + payload) {
    throw FormatError("IDX images: payload length " + std::to_string(bytes.size() - 16) +
                      " does not match header (" + std::to_string(payload) + ")");
  }
  Tensor4 images({n, 1, h, w});
  double* out = images.data();
  const unsigned char* in = bytes.data() + 16;
  for (std::size_t i = 0; i < payload; ++i) out[i] = static_cast<double>(in[i]) / 255.0;
  return images;
}

std::vector<int> parse_idx_labels(std::span<const unsigned char> bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxLabelsMagic) {
    throw FormatError("IDX labels: bad magic " + std::to_string(magic));
  }
  const std::size_t n = read_be32(bytes, 4);
  if (n == 0) {
    throw FormatError("IDX labels: zero count in header");
  }
  if (bytes.size() != 8 + n) {
    throw FormatError("IDX labels: payload length " + std::to_string(bytes.size() - 8) +
                      " does not match header count " + std::to_string(n));
  }
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char v = bytes[8 + i];
    if (v > 9) {
      throw DataError("IDX labels: label " + std::to_string(int{v}) + " outside 0..9");
    }
    labels[i] = v;
  }
  return labels;
}

std::vector<unsigned char> encode_idx_images(const Tensor4& images) {
  const Dims4 d = images.dims();
  if (d.channels != 1) {
    throw ShapeError("encode_idx_images: expected single-channel images");
  }
  std::vector<unsigned char> out;
  out.reserve(16 + images.size());
  write_be32(out, kIdxImagesMagic);
  write_be32(out, static_cast<std::uint32_t>(d.batch));
  write_be32(out, static_cast<std::uint32_t>(d.height));
  write_be32(out, static_cast<std::uint32_t>(d.width));
  for (double v : images.values()) {
    const long q = std::lround(v * 255.0);
    out.push_back(static_cast<unsigned char>(std::clamp(q, 0L, 255L)));
  }
  return out;
}

std::vector<unsigned char> encode_idx_labels(std::span<const int> labels) {
  std::vector<unsigned char> out;
  out.reserve(8 + labels.size());
  write_be32(out, kIdxLabelsMagic);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int v : labels) {
    if (v < 0 || v > 9) {
      throw DataError("encode_idx_labels: label outside 0..9");
    }
    out.push_back(static_cast<unsigned char>(v));
  }
  return out;
}

bool is_gzip(std::span<const unsigned char> bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

std::vector<unsigned char> gzip_decompress(std::span<const unsigned char> bytes) {
  z_stream zs{};
  // 15 window bits + 16 selects the gzip wrapper.
  if (inflateInit2(&zs, 15 + 16) != Z_OK) {
    throw FormatError("gzip: inflateInit failed");
  }
  std::vector<unsigned char> out;
  out.resize(std::max<std::size_t>(bytes.size() * 4, 1 << 16));
  zs.next_in = const_cast<unsigned char*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  int rc = Z_OK;
  std::size_t written = 0;
  while (rc != Z_STREAM_END) {
    if (written == out.size()) out.resize(out.size() * 2);
    zs.next_out = out.data() + written;
    zs.avail_out = static_cast<uInt>(out.size() - written);
    rc = inflate(&zs, Z_NO_FLUSH);
    written = out.size() - zs.avail_out;
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError("gzip: corrupt stream (zlib " + std::to_string(rc) + ")");
    }
  }
  inflateEnd(&zs);
  out.resize(written);
  return out;
}

std::vector<unsigned char> read_maybe_gzipped(const std::filesystem::path& path) {
  std::filesystem::path actual = path;
  if (!std::filesystem::exists(actual)) {
    std::filesystem::path gz = path;
    gz += ".gz";
    if (!std::filesystem::exists(gz)) {
      throw FormatError("no such file: " + path.string() + " (or .gz)");
    }
    actual = gz;
  }
  std::ifstream in(actual, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open " + actual.string());
  }
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (is_gzip(bytes)) return gzip_decompress(bytes);
  return bytes;
}

Dataset load_dataset(const std::filesystem::path& dir, const std::string& images_name,
                     const std::string& labels_name) {
  Dataset d;
  d.images = parse_idx_images(read_maybe_gzipped(dir / images_name));
  d.labels = parse_idx_labels(read_maybe_gzipped(dir / labels_name));
  if (d.images.dims().batch != d.labels.size()) {
    throw FormatError("dataset: " + std::to_string(d.images.dims().batch) + " images vs " +
                      std::to_string(d.labels.size()) + " labels");
  }
  return d;
}

MnistData load_mnist(const std::filesystem::path& dir, std::size_t val_size) {
  Dataset full = load_dataset(dir, kTrainImagesName, kTrainLabelsName);
  auto [train, val] = split_validation(full, val_size);
  return {std::move(train), std::move(val), load_dataset(dir, kTestImagesName, kTestLabelsName)};
}

std::pair<Dataset, Dataset> split_validation(const Dataset& full, std::size_t val_size) {
  const std::size_t n = full.size();
  if (val_size >= n) {
    throw ConfigError("split_validation: val_size " + std::to_string(val_size) +
                      " >= dataset size " + std::to_string(n));
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Dataset train = take(full, std::span(idx).first(n - val_size));
  Dataset val = take(full, std::span(idx).last(val_size));
  return {std::move(train), std::move(val)};
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    Rng& rng) {
  if (batch_size == 0) throw ConfigError("epoch_batches: batch_size must be >= 1");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  std::vector<std::vector<std::size_t>> batches;
  batches.reserve((n + batch_size - 1) / batch_size);
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(start + batch_size, n);
    batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                         idx.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

Dataset take(const Dataset& d, std::span<const std::size_t> indices) {
  const Dims4 dims = d.images.dims();
  const std::size_t item = dims.channels * dims.height * dims.width;
  Dataset out;
  out.images = Tensor4({indices.size(), dims.channels, dims.height, dims.width});
  out.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= d.size()) throw IndexError("take: index out of range");
    std::memcpy(out.images.data() + i * item, d.images.data() + src * item,
                item * sizeof(double));
    out.labels[i] = d.labels[src];
  }
  return out;
}

Dataset head(const Dataset& d, std::size_t n) {
  if (n == 0 || n > d.size()) {
    throw ConfigError("head: subset size must be in 1.." + std::to_string(d.size()));
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return take(d, idx);
}

}  // namespace opn
